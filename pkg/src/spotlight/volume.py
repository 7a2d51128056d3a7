"""3D containers, the ``.vol`` disk format, cropping, downscaling and patches.

All arrays are indexed (z, y, x). Operations return new objects and never
mutate their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from spotlight.errors import (
    CorruptFile,
    OddShape,
    OutOfBounds,
    ShapeMismatch,
    TooSmall,
    UnsupportedFormat,
)

Triple = tuple[int, int, int]
PathLike = Union[str, Path]

_DTYPES = {"f32": np.dtype("<f4"), "u32": np.dtype("<u4")}


def _triple(values, cast=int) -> tuple:
    out = tuple(cast(v) for v in values)
    if len(out) != 3:
        raise ShapeMismatch(f"expected 3 components, got {len(out)}")
    return out


@dataclass(frozen=True)
class Volume:
    """Dense scalar field with voxel size in micrometers."""

    data: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ShapeMismatch(f"volume must be 3D and non-empty, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains NaN or Inf")
        vs = _triple(self.voxel_size, float)
        if min(vs) <= 0:
            raise ValueError(f"voxel sizes must be positive, got {vs}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "voxel_size", vs)

    @property
    def shape(self) -> Triple:
        return self.data.shape

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.voxel_size)


@dataclass(frozen=True)
class MaskVolume:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 3:
            raise ShapeMismatch(f"mask must be 3D, got shape {bits.shape}")
        object.__setattr__(self, "bits", bits)

    @property
    def shape(self) -> Triple:
        return self.bits.shape


@dataclass(frozen=True)
class LabelVolume:
    """Instance labels; 0 is background."""

    labels: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3:
            raise ShapeMismatch(f"labels must be 3D, got shape {labels.shape}")
        if labels.size and labels.min() < 0:
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "labels", labels.astype(np.uint32, copy=False))
        object.__setattr__(self, "voxel_size", _triple(self.voxel_size, float))

    @property
    def shape(self) -> Triple:
        return self.labels.shape

    @property
    def n_instances(self) -> int:
        ids = np.unique(self.labels)
        return int(np.count_nonzero(ids))


def as_array(v) -> np.ndarray:
    """Unwrap a Volume/MaskVolume/LabelVolume, or pass an array through."""
    if isinstance(v, Volume):
        return v.data
    if isinstance(v, MaskVolume):
        return v.bits
    if isinstance(v, LabelVolume):
        return v.labels
    return np.asarray(v)


# -- disk format ---------------------------------------------------------------


def _header_path(path: PathLike) -> Path:
    return Path(str(path) + ".hdr")


def _write(path: PathLike, array: np.ndarray, voxel_size, dtype: str) -> None:
    path = Path(path)
    z, y, x = array.shape
    vz, vy, vx = voxel_size
    lines = [
        f"shape_z={z}",
        f"shape_y={y}",
        f"shape_x={x}",
        f"voxel_um_z={vz!r}",
        f"voxel_um_y={vy!r}",
        f"voxel_um_x={vx!r}",
        f"dtype={dtype}",
        "order=ZYX",
    ]
    path.write_bytes(np.ascontiguousarray(array, dtype=_DTYPES[dtype]).tobytes())
    _header_path(path).write_text("\n".join(lines) + "\n")


def _read(path: PathLike) -> tuple[np.ndarray, tuple, str]:
    path = Path(path)
    hdr = _header_path(path)
    if not hdr.exists():
        raise CorruptFile(f"missing header {hdr}")
    fields = {}
    for line in hdr.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CorruptFile(f"malformed header line {line!r} in {hdr}")
        fields[key.strip()] = value.strip()
    dtype = fields.get("dtype")
    if dtype not in _DTYPES:
        raise UnsupportedFormat(f"unknown dtype {dtype!r} in {hdr}")
    if fields.get("order", "ZYX") != "ZYX":
        raise UnsupportedFormat(f"unsupported axis order {fields['order']!r}")
    try:
        shape = tuple(int(fields[f"shape_{a}"]) for a in "zyx")
        voxel = tuple(float(fields[f"voxel_um_{a}"]) for a in "zyx")
    except (KeyError, ValueError) as exc:
        raise CorruptFile(f"incomplete header {hdr}: {exc}") from None
    payload = path.read_bytes()
    expected = int(np.prod(shape)) * _DTYPES[dtype].itemsize
    if len(payload) != expected:
        raise CorruptFile(f"{path}: payload has {len(payload)} bytes, header implies {expected}")
    array = np.frombuffer(payload, dtype=_DTYPES[dtype]).reshape(shape)
    return array.astype(_DTYPES[dtype].newbyteorder("="), copy=True), voxel, dtype


def save_volume(v: Volume, path: PathLike) -> None:
    _write(path, v.data, v.voxel_size, "f32")


def load_volume(path: PathLike) -> Volume:
    array, voxel, dtype = _read(path)
    if dtype != "f32":
        raise UnsupportedFormat(f"{path} holds {dtype}, expected f32 intensities")
    return Volume(array, voxel)


def save_labels(lv: LabelVolume, path: PathLike) -> None:
    _write(path, lv.labels, lv.voxel_size, "u32")


def load_labels(path: PathLike) -> LabelVolume:
    array, voxel, dtype = _read(path)
    if dtype != "u32":
        raise UnsupportedFormat(f"{path} holds {dtype}, expected u32 labels")
    return LabelVolume(array, voxel)


# -- geometry ------------------------------------------------------------------


def crop_to_multiple(v: Volume, m: int = 16) -> Volume:
    """Corner-anchored crop so every dimension is a multiple of ``m``."""
    if m < 1:
        raise ValueError("m must be positive")
    if min(v.shape) < m:
        raise TooSmall(f"shape {v.shape} has a dimension smaller than {m}")
    z, y, x = (d // m * m for d in v.shape)
    return v.with_data(v.data[:z, :y, :x].copy())


def downscale_half(v: Volume) -> Volume:
    """2x2x2 mean pooling; doubles the voxel size."""
    if any(d % 2 for d in v.shape):
        raise OddShape(f"shape {v.shape} is not even in every dimension")
    z, y, x = v.shape
    blocks = v.data.astype(np.float64).reshape(z // 2, 2, y // 2, 2, x // 2, 2)
    pooled = blocks.mean(axis=(1, 3, 5)).astype(v.data.dtype)
    return Volume(pooled, tuple(2 * s for s in v.voxel_size))


def extract_patch(v, origin: Triple, size: Triple):
    """Contiguous sub-volume; works on Volume, MaskVolume, LabelVolume or arrays."""
    origin = _triple(origin)
    size = _triple(size)
    shape = as_array(v).shape
    if any(o < 0 for o in origin) or any(s < 1 for s in size):
        raise OutOfBounds(f"invalid origin {origin} / size {size}")
    if any(o + s > d for o, s, d in zip(origin, size, shape)):
        raise OutOfBounds(f"patch {origin}+{size} exceeds shape {shape}")
    sl = tuple(slice(o, o + s) for o, s in zip(origin, size))
    if isinstance(v, Volume):
        return v.with_data(v.data[sl].copy())
    if isinstance(v, MaskVolume):
        return MaskVolume(v.bits[sl].copy())
    if isinstance(v, LabelVolume):
        return LabelVolume(v.labels[sl].copy(), v.voxel_size)
    return np.asarray(v)[sl].copy()
