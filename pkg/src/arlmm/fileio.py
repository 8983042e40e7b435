"""Matrix files and dataset directories.

Binary layout: a 28-byte header ``magic(6) dtype(3) layout(1) rows(u64)
cols(u64)``, little-endian, followed by ``rows * cols`` little-endian
float64 values in row-major order.  Files ending in ``.csv`` are read and
written as comma-separated text with an optional non-numeric header row.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import MixedModelData

MAGIC = b"ARLMM1"
_HEADER = struct.Struct("<6s3s1sQQ")


def write_matrix(path, mat) -> None:
    path = Path(path)
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim == 1:
        mat = mat[:, None]
    if mat.ndim != 2:
        raise DataError(f"{path}: only 1-d or 2-d arrays can be written, got {mat.ndim}-d")
    if path.suffix.lower() == ".csv":
        np.savetxt(path, mat, delimiter=",", fmt="%.17g")
        return
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, b"f64", b"R", mat.shape[0], mat.shape[1]))
        fh.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())


def _read_csv(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        return np.zeros((0, 0))
    start = 0
    try:
        [float(v) for v in rows[0]]
    except ValueError:
        start = 1
    width = len(rows[start]) if len(rows) > start else 0
    out = np.empty((len(rows) - start, width))
    for i, row in enumerate(rows[start:], start=start + 1):
        if len(row) != width:
            raise DataError(f"{path}:{i}: expected {width} fields, found {len(row)}")
        try:
            out[i - start - 1] = [float(v) for v in row]
        except ValueError as exc:
            raise DataError(f"{path}:{i}: {exc}") from None
    return out


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    if path.suffix.lower() == ".csv":
        return _read_csv(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, dtype, layout, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if dtype != b"f64" or layout != b"R":
        raise DataError(f"{path}: unsupported dtype/layout {dtype!r}/{layout!r}")
    payload = raw[_HEADER.size:]
    if len(payload) != rows * cols * 8:
        raise DataError(f"{path}: payload has {len(payload)} bytes, header implies {rows * cols * 8}")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _ext(fmt):
    return ".csv" if fmt == "csv" else ".bin"


def write_dataset(directory, data: MixedModelData, truth=None, fmt="bin") -> dict:
    """Write ``x``, stacked ``z``, ``y`` and group sizes (plus truth) into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ext = _ext(fmt)
    files = {"x": f"x{ext}", "z": f"z{ext}", "y": f"y{ext}"}
    write_matrix(directory / files["x"], data.x)
    write_matrix(directory / files["z"], np.vstack(data.z_blocks))
    write_matrix(directory / files["y"], data.y)
    meta = {"files": files, "group_sizes": list(data.group_sizes), "n": data.n, "p": data.p,
            "d": data.d, "m": data.m}
    if truth is not None:
        files["beta_true"] = f"beta_true{ext}"
        write_matrix(directory / files["beta_true"], truth.beta_true)
        with open(directory / "truth.json", "w") as fh:
            json.dump(truth.to_dict(), fh, indent=1)
    with open(directory / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=1)
    return {name: file_digest(directory / f) for name, f in sorted(files.items())}


def read_meta(directory) -> dict:
    path = Path(directory) / "meta.json"
    if not path.exists():
        raise DataError(f"{path}: missing dataset metadata")
    with open(path) as fh:
        return json.load(fh)


def read_dataset(directory) -> MixedModelData:
    directory = Path(directory)
    meta = read_meta(directory)
    files = meta["files"]
    x = read_matrix(directory / files["x"])
    z = read_matrix(directory / files["z"])
    y = read_matrix(directory / files["y"])
    if y.ndim == 2 and y.shape[1] != 1:
        raise DataError(f"{directory / files['y']}: expected one column, found {y.shape[1]}")
    y = y.ravel()
    sizes = [int(v) for v in meta["group_sizes"]]
    if z.shape[0] != sum(sizes):
        raise DataError(f"{directory / files['z']}: {z.shape[0]} rows but group sizes sum to {sum(sizes)}")
    if x.shape[0] != y.size:
        raise DataError(f"{directory / files['x']}: {x.shape[0]} rows but y has {y.size} entries")
    bounds = np.cumsum([0] + sizes)
    blocks = tuple(z[a:b] for a, b in zip(bounds[:-1], bounds[1:]))
    return MixedModelData(x, blocks, y, tuple(sizes))


def read_truth_beta(directory) -> np.ndarray:
    directory = Path(directory)
    meta = read_meta(directory)
    name = meta["files"].get("beta_true")
    if name is None:
        raise DataError(f"{directory}: dataset has no ground truth")
    return read_matrix(directory / name).ravel()


def write_json(path, record) -> None:
    text = json.dumps(record, indent=1, default=_jsonable)
    if path in (None, "-"):
        print(text)
    else:
        Path(path).write_text(text + os.linesep)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


def dumps_line(record) -> str:
    return json.dumps(record, default=_jsonable, sort_keys=True)
