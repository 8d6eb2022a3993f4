"""Binary volume/stack files and their JSON sidecars.

Layout: a 64-byte little-endian header ``magic(4s) dims(3 x u32) count(u32)``
padded with zeros, then float32 samples in C order. Volumes use magic
``CPV1``, dims ``(side, side, side)`` and count 1; stacks use ``CPS1``, dims
``(side, side, 1)`` and count ``n``. Ground truth and provenance live in
``<file>.json`` next to the binary.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .simdata import ProjectionStack, Volume

HEADER_SIZE = 64
_HEADER = struct.Struct("<4s3II")
VOLUME_MAGIC = b"CPV1"
STACK_MAGIC = b"CPS1"


class FormatError(ValueError):
    pass


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _write(path, magic, dims, count, data, meta):
    header = _HEADER.pack(magic, *dims, count).ljust(HEADER_SIZE, b"\0")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    with open(sidecar_path(path), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)


def _read(path, magic):
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than the header")
    got, d0, d1, d2, count = _HEADER.unpack_from(raw)
    if got != magic:
        raise FormatError(f"{path}: magic {got!r}, expected {magic!r}")
    size = d0 * d1 * d2 * count
    body = raw[HEADER_SIZE:]
    if len(body) != 4 * size:
        raise FormatError(f"{path}: payload has {len(body)} bytes, header implies {4 * size}")
    data = np.frombuffer(body, dtype="<f4").astype(float)
    meta = {}
    side = sidecar_path(path)
    if side.exists():
        meta = json.loads(side.read_text())
    return (d0, d1, d2, count), data, meta


def write_volume(path, vol: Volume, meta: dict | None = None) -> None:
    s = vol.side
    _write(path, VOLUME_MAGIC, (s, s, s), 1, vol.data, dict(meta or {}, voxel_size=vol.voxel_size))


def read_volume(path) -> Volume:
    (d0, d1, d2, count), data, meta = _read(path, VOLUME_MAGIC)
    if not (d0 == d1 == d2) or count != 1:
        raise FormatError(f"{path}: not a single cubic volume")
    return Volume(data.reshape(d0, d1, d2), voxel_size=meta.get("voxel_size", 1.0))


def stack_metadata(stack: ProjectionStack) -> dict:
    meta = dict(stack.meta)
    meta.update(n=stack.n, side=stack.side, snr=stack.snr, seed=stack.seed)
    if stack.true_rotations is not None:
        meta["true_rotations"] = [r.ravel().tolist() for r in stack.true_rotations]
    if stack.true_shifts is not None:
        meta["true_shifts"] = stack.true_shifts.tolist()
    return meta


def write_stack(path, stack: ProjectionStack) -> None:
    s = stack.side
    _write(path, STACK_MAGIC, (s, s, 1), stack.n, stack.images, stack_metadata(stack))


def read_stack(path) -> ProjectionStack:
    (d0, d1, d2, count), data, meta = _read(path, STACK_MAGIC)
    if d0 != d1 or d2 != 1:
        raise FormatError(f"{path}: images must be square")
    rot = meta.pop("true_rotations", None)
    shifts = meta.pop("true_shifts", None)
    snr, seed = meta.pop("snr", None), meta.pop("seed", None)
    meta.pop("n", None), meta.pop("side", None)
    return ProjectionStack(
        data.reshape(count, d0, d1),
        true_rotations=None if rot is None else np.asarray(rot, dtype=float).reshape(-1, 3, 3),
        true_shifts=None if shifts is None else np.asarray(shifts, dtype=float),
        snr=snr, seed=seed, meta=meta,
    )


def write_rotations(path, R) -> None:
    """One row per image: the 9 entries of ``R`` row-major, full precision."""
    R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"r{i}{j}" for i in range(3) for j in range(3)])
        for r in R:
            w.writerow([repr(float(v)) for v in r.ravel()])


def read_rotations(path) -> np.ndarray:
    return _read_table(path, 9).reshape(-1, 3, 3)


def write_shifts(path, shifts) -> None:
    shifts = np.asarray(shifts, dtype=float).reshape(-1, 2)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dx", "dy"])
        for dx, dy in shifts:
            w.writerow([repr(float(dx)), repr(float(dy))])


def read_shifts(path) -> np.ndarray:
    return _read_table(path, 2)


def _read_table(path, width):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    try:
        out = np.array([[float(v) for v in row] for row in rows], dtype=float)
    except ValueError as e:
        raise FormatError(f"{path}: {e}") from None
    if out.ndim != 2 or out.shape[1] != width:
        raise FormatError(f"{path}: expected {width} columns")
    return out
