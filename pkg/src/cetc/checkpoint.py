"""Flat parameter archive: JSON manifest + raw little-endian float32 payloads.

The archive is a ZIP file containing ``manifest.json`` (a mapping from
dotted parameter name to shape) and one ``params/<name>.bin`` entry per
parameter holding the C-order little-endian float32 bytes.  Entries are
stored uncompressed with a fixed timestamp so identical parameters always
produce byte-identical archives.  Round-tripping float32 values is
bit-exact; float64 parameters are quantized to float32 on save.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint"]

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


def _write_entry(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, payload)


def save_checkpoint(path, params: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {name: list(arr.shape) for name, arr in params.items()}
    with zipfile.ZipFile(path, "w") as zf:
        _write_entry(zf, "manifest.json",
                     json.dumps(manifest, indent=1, sort_keys=True).encode())
        for name in sorted(params):
            payload = np.ascontiguousarray(params[name], dtype="<f4").tobytes()
            _write_entry(zf, f"params/{name}.bin", payload)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read("manifest.json"))
        params = {}
        for name, shape in manifest.items():
            raw = zf.read(f"params/{name}.bin")
            flat = np.frombuffer(raw, dtype="<f4")
            expected = int(np.prod(shape)) if shape else 1
            if flat.size != expected:
                raise ValueError(
                    f"checkpoint entry {name}: payload has {flat.size} floats, "
                    f"manifest shape {shape} needs {expected}"
                )
            params[name] = flat.reshape(shape).copy()
    return params
