"""On-disk formats.

Binary tensor dump: magic "COME", u32 version, u32 rank, u32 dims[rank],
little-endian float32 payload.  Version 1 is a single tensor; version 2 is a
pack of named sections, each section being name length + utf-8 name followed
by rank, dims and payload.  Layouts travel as a one-line plain-text header,
merge masks as one line of 0/1 group flags per sample, and point clouds as
whitespace-separated xyz text.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .errors import ShapeError
from .layout import LayoutDescriptor
from .tensors import DTYPE

MAGIC = b"COME"
VERSION_TENSOR = 1
VERSION_PACK = 2

_U32 = np.dtype("<u4")
_F32 = np.dtype("<f4")


def _write_u32(fh, *values: int) -> None:
    fh.write(np.asarray(values, dtype=_U32).tobytes())


def _read_u32(fh, count: int) -> np.ndarray:
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise ShapeError("truncated tensor dump")
    return np.frombuffer(raw, dtype=_U32)


def _write_body(fh, arr: np.ndarray) -> None:
    arr = np.asarray(arr, dtype=DTYPE)
    if arr.ndim and not arr.flags["C_CONTIGUOUS"]:
        arr = np.ascontiguousarray(arr)
    _write_u32(fh, arr.ndim, *arr.shape)
    fh.write(arr.astype(_F32).tobytes())


def _read_body(fh) -> np.ndarray:
    rank = int(_read_u32(fh, 1)[0])
    dims = tuple(int(d) for d in _read_u32(fh, rank))
    count = int(np.prod(dims)) if rank else 1
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise ShapeError("truncated tensor payload")
    return np.frombuffer(raw, dtype=_F32).astype(DTYPE).reshape(dims)


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        _write_u32(fh, VERSION_TENSOR)
        _write_body(fh, arr)


def read_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ShapeError(f"bad magic in {path}")
        version = int(_read_u32(fh, 1)[0])
        if version != VERSION_TENSOR:
            raise ShapeError(f"unsupported tensor dump version {version}")
        return _read_body(fh)


def write_tensor_pack(path: str | Path, sections: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        _write_u32(fh, VERSION_PACK, len(sections))
        for name, arr in sections.items():
            encoded = name.encode("utf-8")
            _write_u32(fh, len(encoded))
            fh.write(encoded)
            _write_body(fh, arr)


def read_tensor_pack(path: str | Path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ShapeError(f"bad magic in {path}")
        version, count = (int(x) for x in _read_u32(fh, 2))
        if version != VERSION_PACK:
            raise ShapeError(f"unsupported pack version {version}")
        for _ in range(count):
            name_len = int(_read_u32(fh, 1)[0])
            name = fh.read(name_len).decode("utf-8")
            out[name] = _read_body(fh)
    return out


def layout_header(layout: LayoutDescriptor) -> str:
    return (
        f"frames={layout.frames} special={layout.special_per_frame} "
        f"patches={layout.patches_per_frame} group={layout.group_size}"
    )


def parse_layout_header(text: str) -> LayoutDescriptor:
    fields = dict(part.split("=", 1) for part in text.split())
    try:
        return LayoutDescriptor(
            frames=int(fields["frames"]),
            special_per_frame=int(fields["special"]),
            patches_per_frame=int(fields["patches"]),
            group_size=int(fields["group"]),
        )
    except KeyError as exc:
        raise ShapeError(f"layout header missing field {exc}") from exc


def format_mask_flags(flags: np.ndarray) -> str:
    """One line of 0/1 group flags per sample."""
    flags = np.asarray(flags, dtype=bool)
    return "\n".join("".join("1" if f else "0" for f in row) for row in flags) + "\n"


def parse_mask_flags(text: str) -> np.ndarray:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        return np.zeros((0, 0), dtype=bool)
    widths = {len(ln) for ln in lines}
    if len(widths) != 1:
        raise ShapeError("mask dump lines have inconsistent lengths")
    return np.array([[ch == "1" for ch in ln] for ln in lines], dtype=bool)


def write_xyz(path: str | Path, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ShapeError("point cloud must be (n, 3)")
    with open(path, "w") as fh:
        for x, y, z in points:
            fh.write(f"{x:.17g} {y:.17g} {z:.17g}\n")


def read_xyz(path: str | Path) -> np.ndarray:
    data = np.loadtxt(io.StringIO(Path(path).read_text()), ndmin=2)
    if data.size == 0:
        return np.zeros((0, 3), dtype=np.float64)
    if data.shape[1] != 3:
        raise ShapeError("point cloud text must have 3 columns")
    return data.astype(np.float64)
