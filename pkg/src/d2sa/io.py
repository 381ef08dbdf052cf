"""``d2sa-tensor`` binary container, JSON manifests and 8-bit PGM images.

Container layout::

    d2sa-tensor v1 <dtype> <ndims> <extents...>\\n
    <little-endian float64 payload, row-major>

``dtype`` is ``float64`` or ``complex128``; complex payloads store the whole
real plane followed by the whole imaginary plane.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

__all__ = ["save_tensor", "load_tensor", "save_manifest", "load_manifest", "write_pgm", "read_pgm"]

_MAGIC = "d2sa-tensor"
_VERSION = "v1"
_LE_F64 = np.dtype("<f8")


def save_tensor(path, array) -> Path:
    path = Path(path)
    arr = np.asarray(array)
    if np.iscomplexobj(arr):
        dtype = "complex128"
        payload = np.concatenate([arr.real.ravel(), arr.imag.ravel()])
    else:
        dtype = "float64"
        payload = arr.ravel()
    header = " ".join([_MAGIC, _VERSION, dtype, str(arr.ndim), *map(str, arr.shape)]) + "\n"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(payload, dtype=_LE_F64).tobytes())
    return path


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        body = fh.read()
    if len(header) < 4 or header[0] != _MAGIC or header[1] != _VERSION:
        raise ValueError(f"{path}: not a {_MAGIC} {_VERSION} file")
    dtype, ndims = header[2], int(header[3])
    shape = tuple(int(s) for s in header[4 : 4 + ndims])
    if len(shape) != ndims:
        raise ValueError(f"{path}: header declares {ndims} dims but lists {len(shape)}")
    flat = np.frombuffer(body, dtype=_LE_F64).astype(np.float64)
    count = int(np.prod(shape, dtype=np.int64))
    if dtype == "float64":
        if flat.size != count:
            raise ValueError(f"{path}: expected {count} values, found {flat.size}")
        return flat.reshape(shape)
    if dtype == "complex128":
        if flat.size != 2 * count:
            raise ValueError(f"{path}: expected {2 * count} values, found {flat.size}")
        return (flat[:count] + 1j * flat[count:]).reshape(shape)
    raise ValueError(f"{path}: unsupported dtype {dtype!r}")


def save_manifest(path, manifest: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path) -> dict:
    return json.loads(Path(path).read_text())


def write_pgm(path, image: np.ndarray) -> Path:
    """Write an 8-bit binary (P5) portable graymap."""
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"PGM needs a 2D uint8 array, got {img.dtype} {img.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end].decode("ascii"))
        pos = end
    if fields[0] != "P5" or fields[3] != "255":
        raise ValueError(f"{path}: only 8-bit P5 graymaps are supported")
    w, h = int(fields[1]), int(fields[2])
    pos += 1
    return np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w).copy()
