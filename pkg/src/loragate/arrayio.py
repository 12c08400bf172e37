"""Raw array store: one little-endian binary file per array plus a manifest.

Layout of a store directory:

* ``manifest.json`` — ``{"arrays": {name: {"file", "shape", "dtype"}}, "meta": {...}}``
* one ``<name>.bin`` per array: the C-order (row-major) little-endian bytes of
  the array, nothing else.

Round trips are bit-exact: bytes are written with ``ndarray.tobytes`` and read
back with ``frombuffer`` at the recorded dtype and shape.
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

_SAFE = re.compile(r"[^A-Za-z0-9._-]")


def _filename(name: str) -> str:
    return _SAFE.sub("_", name) + ".bin"


def save_arrays(directory, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"arrays": {}, "meta": meta or {}}
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        fname = _filename(name)
        (directory / fname).write_bytes(little.tobytes(order="C"))
        manifest["arrays"][name] = {
            "file": fname,
            "shape": list(arr.shape),
            "dtype": str(arr.dtype),
        }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_arrays(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    arrays = {}
    for name, entry in manifest["arrays"].items():
        raw = (directory / entry["file"]).read_bytes()
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        arr = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"])
        arrays[name] = arr.astype(np.dtype(entry["dtype"]), copy=True)
    return arrays, manifest.get("meta", {})
