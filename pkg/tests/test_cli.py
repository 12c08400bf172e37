from pathlib import Path

import numpy as np
import pytest

import loragate.autodiff as autodiff
import loragate.cli as cli
from loragate.cli import cmd_analyze, cmd_run, main, run_gradcheck

TINY = """\
vocab_size = 24
d_model = 16
n_heads = 2
n_blocks = 2
max_seq_len = 10
n_tasks = 2
classes_per_task = 2
samples_per_class = 32
seq_len = 8
batch_size = 16
method = jump-inclora
seeds = 42
output_dir = {out}
"""


def write_config(tmp_path, text=None, **fmt):
    path = tmp_path / "exp.cfg"
    path.write_text((text or TINY).format(**fmt))
    return path


class TestRun:
    def test_structural_outputs(self, tmp_path):
        out = tmp_path / "artifacts"
        cfg = write_config(tmp_path, out=out)
        assert cmd_run(str(cfg)) == 0
        assert (out / "accuracy_o0_s42.csv").exists()
        assert (out / "metrics.csv").exists()
        assert (out / "report.txt").exists()
        assert (out / "config.txt").exists()
        mask_dirs = sorted((out / "masks" / "o0_s42").iterdir())
        assert [d.name for d in mask_dirs] == ["task0", "task1"]

    def test_accuracy_csv_schema(self, tmp_path):
        out = tmp_path / "artifacts"
        cmd_run(str(write_config(tmp_path, out=out)))
        lines = (out / "accuracy_o0_s42.csv").read_text().splitlines()
        assert lines[0] == "row,task_index,accuracy"
        rows = [tuple(map(float, ln.split(","))) for ln in lines[1:]]
        # isolated row, then the lower triangle: 2 + 1 + 2 entries
        assert len(rows) == 5
        for _, _, acc in rows:
            assert 0.0 <= acc <= 1.0

    def test_metrics_csv_schema(self, tmp_path):
        out = tmp_path / "artifacts"
        cmd_run(str(write_config(tmp_path, out=out)))
        lines = (out / "metrics.csv").read_text().splitlines()
        assert lines[0] == "metric,order,seed,value"
        names = {ln.split(",")[0] for ln in lines[1:]}
        assert {"oa", "bwt", "fwt", "mean_sparsity", "mean_pairwise_jaccard"} <= names

    def test_rerun_byte_identical(self, tmp_path):
        out = tmp_path / "artifacts"
        cfg = write_config(tmp_path, out=out)
        cmd_run(str(cfg))
        first = {p.name: p.read_bytes() for p in out.rglob("*") if p.is_file()}
        cmd_run(str(cfg))
        second = {p.name: p.read_bytes() for p in out.rglob("*") if p.is_file()}
        assert first == second

    def test_invalid_config_nonzero_exit(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("not_a_key = 3\n")
        assert cmd_run(str(cfg)) == 2
        assert "unknown key" in capsys.readouterr().err

    def test_output_root_override(self, tmp_path, monkeypatch):
        root = tmp_path / "root"
        monkeypatch.setenv(cli.ENV_OUTPUT_ROOT, str(root))
        cfg = write_config(tmp_path, text=TINY.replace("{out}", "nested/run"))
        assert cmd_run(str(cfg)) == 0
        assert (root / "nested" / "run" / "metrics.csv").exists()

    def test_parallel_jobs_match_serial(self, tmp_path):
        serial_out = tmp_path / "serial"
        par_out = tmp_path / "parallel"
        text = TINY.replace("seeds = 42", "seeds = 42,43")
        cmd_run(str(write_config(tmp_path, text=text, out=serial_out)))
        (tmp_path / "exp.cfg").unlink()
        cmd_run(str(write_config(tmp_path, text=text, out=par_out)), jobs=2)
        for name in ("metrics.csv", "accuracy_o0_s42.csv", "accuracy_o0_s43.csv"):
            assert (serial_out / name).read_bytes() == (par_out / name).read_bytes()


class TestGradcheck:
    def test_clean_build_passes(self, capsys):
        assert run_gradcheck() == 0
        assert "FAIL" not in capsys.readouterr().out

    def test_perturbed_kernel_sign_fails(self, monkeypatch, capsys):
        original = autodiff.threshold_pseudograd
        monkeypatch.setattr(autodiff, "threshold_pseudograd",
                            lambda x, t, b: -original(x, t, b))
        assert run_gradcheck() == 1
        assert "FAIL" in capsys.readouterr().out

    def test_reports_error_per_operation(self, capsys):
        run_gradcheck()
        out = capsys.readouterr().out
        for name in ("matmul", "frobenius_sq", "threshold_pseudograd_casewise"):
            assert name in out


class TestAnalyze:
    def run_once(self, tmp_path, method_line="method = jump-inclora", tasks=2):
        out = tmp_path / "artifacts"
        text = TINY.replace("method = jump-inclora", method_line)
        text = text.replace("n_tasks = 2", f"n_tasks = {tasks}")
        cmd_run(str(write_config(tmp_path, text=text, out=out)))
        return out

    def test_emits_sparsity_and_overlap(self, tmp_path):
        out = self.run_once(tmp_path)
        assert cmd_analyze(str(out), "all") == 0
        csv = out / "analysis_o0_s42_all.csv"
        lines = csv.read_text().splitlines()
        assert lines[0] == "task,layer,sparsity,mean_prior_jaccard"
        assert len(lines) == 1 + 2 * 4  # 2 tasks x 4 adapted layers
        first_task = [ln for ln in lines[1:] if ln.startswith("0,")]
        assert all(ln.endswith(",na") for ln in first_task)

    def test_gating_disabled_gives_zero_sparsity(self, tmp_path):
        out = self.run_once(tmp_path, method_line="method = inclora")
        cmd_analyze(str(out), "all")
        lines = (out / "analysis_o0_s42_all.csv").read_text().splitlines()[1:]
        for ln in lines:
            assert float(ln.split(",")[2]) == 0.0

    def test_single_task_all_not_applicable(self, tmp_path):
        out = self.run_once(tmp_path, tasks=1)
        cmd_analyze(str(out), "all")
        lines = (out / "analysis_o0_s42_all.csv").read_text().splitlines()[1:]
        assert lines and all(ln.endswith(",na") for ln in lines)

    def test_middle_layer_selector(self, tmp_path):
        out = self.run_once(tmp_path)
        cmd_analyze(str(out), "middle")
        lines = (out / "analysis_o0_s42_middle.csv").read_text().splitlines()[1:]
        layers = {ln.split(",")[1] for ln in lines}
        assert layers == {"blk1.q", "blk1.v"}

    def test_specific_layer_selector(self, tmp_path):
        out = self.run_once(tmp_path)
        cmd_analyze(str(out), "blk0.v")
        lines = (out / "analysis_o0_s42_blk0_v.csv").read_text().splitlines()[1:]
        assert {ln.split(",")[1] for ln in lines} == {"blk0.v"}

    def test_unknown_layer_rejected(self, tmp_path, capsys):
        out = self.run_once(tmp_path)
        assert cmd_analyze(str(out), "blk9.q") == 2
        assert "unknown layer" in capsys.readouterr().err

    def test_missing_masks_rejected(self, tmp_path, capsys):
        assert cmd_analyze(str(tmp_path), "all") == 2
        assert "mask" in capsys.readouterr().err

    def test_idempotent(self, tmp_path):
        out = self.run_once(tmp_path)
        cmd_analyze(str(out), "all")
        first = (out / "analysis_o0_s42_all.csv").read_bytes()
        cmd_analyze(str(out), "all")
        assert (out / "analysis_o0_s42_all.csv").read_bytes() == first


class TestMain:
    def test_usage_error_without_command(self):
        with pytest.raises(SystemExit):
            main([])

    def test_gradcheck_subcommand(self, capsys):
        assert main(["gradcheck"]) == 0
        capsys.readouterr()
