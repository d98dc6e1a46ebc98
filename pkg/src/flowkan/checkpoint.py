"""Checkpoint archive: JSON manifest + one little-endian raw-float blob.

The archive is a zip with two members:
  manifest.json  {"entries": {name: {shape, dtype, offset}}, "extra": {...}}
  data.bin       concatenated little-endian arrays at the stated offsets

Live parameters live under the "params/" prefix, EMA shadows under "ema/";
the normalizer and run config travel in the manifest's "extra" field.
"""

from __future__ import annotations

import io
import json
import zipfile

import numpy as np

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(path, arrays, extra=None):
    """Write named arrays plus a JSON-serializable extra dict."""
    entries = {}
    blob = io.BytesIO()
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise ValueError(f"unsupported dtype {dtype} for {name!r}")
        raw = arr.astype(_DTYPES[dtype]).tobytes()
        entries[name] = {"shape": list(arr.shape), "dtype": dtype, "offset": offset}
        blob.write(raw)
        offset += len(raw)
    manifest = {"entries": entries, "extra": extra or {}}
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
        zf.writestr("data.bin", blob.getvalue())


def load_checkpoint(path):
    """Return (arrays dict, extra dict)."""
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        blob = zf.read("data.bin")
    arrays = {}
    for name, meta in manifest["entries"].items():
        shape = tuple(meta["shape"])
        wire = np.dtype(_DTYPES[meta["dtype"]])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype=wire, count=count, offset=meta["offset"])
        arrays[name] = arr.reshape(shape).astype(meta["dtype"])
    return arrays, manifest["extra"]
