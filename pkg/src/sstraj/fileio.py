"""Binary array container and trajectory files.

Container layout (all integers little-endian):

    bytes 0-3   magic "LSST"
    bytes 4-5   format version, u16 (currently 1)
    bytes 6-7   dtype tag, u16: 0 = float64, 1 = complex128
    bytes 8-15  rank, u64
    then        rank dims, u64 each
    then        raw little-endian payload, row-major

Trajectory files are the same container (float64, shape m x 2) plus a
JSON sidecar ``<file>.meta.json`` carrying dwell, fov, seed and
provenance (generating command and config hash).  Round-trips are
bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .core import Trajectory

MAGIC = b"LSST"
FORMAT_VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<c16")}
_TAG_FOR_KIND = {"f": 0, "c": 1}


class DataError(ValueError):
    """Missing or malformed data file."""


def sidecar_path(path: str | Path) -> Path:
    return Path(str(path) + ".meta.json")


def write_array(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype.kind in ("i", "u", "b"):
        arr = arr.astype(np.float64)
    if arr.dtype.kind not in _TAG_FOR_KIND:
        raise DataError(f"unsupported dtype {arr.dtype}")
    tag = _TAG_FOR_KIND[arr.dtype.kind]
    arr = np.asarray(arr, dtype=_DTYPE_TAGS[tag])
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        # ascontiguousarray would promote 0-d inputs to 1-d
        arr = np.ascontiguousarray(arr)
    with open(path, "wb") as f:
        f.write(struct.pack("<4sHH", MAGIC, FORMAT_VERSION, tag))
        f.write(struct.pack("<Q", arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<Q", d))
        f.write(arr.tobytes(order="C"))


def read_array(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with open(path, "rb") as f:
        head = f.read(8)
        if len(head) < 8 or head[:4] != MAGIC:
            raise DataError(f"{path}: not an array container (bad magic)")
        version, tag = struct.unpack("<HH", head[4:8])
        if version != FORMAT_VERSION:
            raise DataError(f"{path}: unsupported format version {version}")
        if tag not in _DTYPE_TAGS:
            raise DataError(f"{path}: unknown dtype tag {tag}")
        (rank,) = struct.unpack("<Q", f.read(8))
        if rank > 32:
            raise DataError(f"{path}: implausible rank {rank}")
        dims = struct.unpack(f"<{rank}Q", f.read(8 * rank)) if rank else ()
        dtype = _DTYPE_TAGS[tag]
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = f.read()
    expected = count * dtype.itemsize
    if len(payload) != expected:
        raise DataError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype=dtype, count=count).reshape(dims)
    return arr.copy()


def write_trajectory(
    path: str | Path,
    traj: Trajectory,
    seed: int | None = None,
    command: str = "",
    config_hash: str = "",
    extra: dict | None = None,
) -> None:
    write_array(path, traj.points)
    meta = {
        "dwell": traj.dwell,
        "fov": traj.fov,
        "seed": seed,
        "command": command,
        "config_hash": config_hash,
    }
    if extra:
        meta.update(extra)
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def read_trajectory(path: str | Path) -> tuple[Trajectory, dict]:
    points = read_array(path)
    if points.ndim != 2 or points.shape[1] != 2:
        raise DataError(f"{path}: trajectory must be (m, 2), got {points.shape}")
    side = sidecar_path(path)
    if not side.exists():
        raise DataError(f"missing trajectory sidecar: {side}")
    try:
        meta = json.loads(side.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{side}: invalid JSON ({e})") from e
    for key in ("dwell", "fov"):
        if key not in meta:
            raise DataError(f"{side}: missing required key {key!r}")
    return Trajectory(points, dwell=float(meta["dwell"]), fov=float(meta["fov"])), meta
