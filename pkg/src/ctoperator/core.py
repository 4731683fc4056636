"""Grid-sampled containers shared by every other module.

Coordinates follow the pixel-center convention with the physical domain
centered on the origin: sample ``(i, j)`` of a ``width x height`` image sits
at ``((i - (width-1)/2) * spacing, (j - (height-1)/2) * spacing)``. Arrays are
stored row-major as ``values[j, i]`` (y rows, x columns) and sinograms as
``values[angle, detector]``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class FormatError(ValueError):
    """Raised for malformed grid or model files."""


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; split with ``rng.spawn``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Image:
    values: np.ndarray
    spacing: float = 1.0

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.ndim != 2:
            raise ValueError("image values must be 2D (height, width)")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")
        if not np.all(np.isfinite(vals)):
            raise ValueError("image values must be finite")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "spacing", float(self.spacing))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical x (per column) and y (per row) sample coordinates."""
        xs = (np.arange(self.width) - (self.width - 1) / 2) * self.spacing
        ys = (np.arange(self.height) - (self.height - 1) / 2) * self.spacing
        return xs, ys

    @classmethod
    def zeros(cls, width: int, height: int | None = None, spacing: float = 1.0) -> "Image":
        height = width if height is None else height
        return cls(np.zeros((height, width)), spacing)


@dataclass(frozen=True, eq=False)
class AngleSet:
    angles: np.ndarray
    period: float = math.pi
    uniform: bool = False

    def __post_init__(self):
        ang = _frozen(self.angles).ravel()
        ang.setflags(write=False)
        if ang.size == 0:
            raise ValueError("angle set must not be empty")
        if np.any(np.diff(ang) <= 0):
            raise ValueError("angles must be strictly increasing")
        if ang[0] < 0 or ang[-1] >= self.period:
            raise ValueError("angles must lie in [0, period)")
        object.__setattr__(self, "angles", ang)
        object.__setattr__(self, "period", float(self.period))

    @classmethod
    def uniform_views(cls, count: int, period: float = math.pi) -> "AngleSet":
        if count < 1:
            raise ValueError("view count must be >= 1")
        return cls(np.arange(count) * (period / count), period, uniform=True)

    def __len__(self) -> int:
        return self.angles.size

    def subset(self, indices) -> "AngleSet":
        idx = np.asarray(indices)
        return AngleSet(self.angles[idx], self.period, uniform=False)


@dataclass(frozen=True, eq=False)
class Sinogram:
    angle_set: AngleSet
    values: np.ndarray
    det_spacing: float = 1.0

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.ndim != 2 or vals.shape[0] != len(self.angle_set):
            raise ValueError("sinogram values must be (angles, detectors)")
        if not self.det_spacing > 0:
            raise ValueError("detector spacing must be positive")
        if not np.all(np.isfinite(vals)):
            raise ValueError("sinogram values must be finite")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "det_spacing", float(self.det_spacing))

    @property
    def det_count(self) -> int:
        return self.values.shape[1]

    @property
    def angles(self) -> np.ndarray:
        return self.angle_set.angles

    def det_coords(self) -> np.ndarray:
        return (np.arange(self.det_count) - (self.det_count - 1) / 2) * self.det_spacing

    def with_values(self, values) -> "Sinogram":
        return Sinogram(self.angle_set, values, self.det_spacing)


@dataclass(frozen=True)
class SampleMask:
    kept: tuple[int, ...] = field(default=())

    def __post_init__(self):
        kept = tuple(int(k) for k in self.kept)
        if not kept:
            raise ValueError("mask must keep at least one angle")
        if any(b <= a for a, b in zip(kept, kept[1:])):
            raise ValueError("mask indices must be strictly increasing")
        if kept[0] < 0:
            raise ValueError("mask indices must be non-negative")
        object.__setattr__(self, "kept", kept)

    @classmethod
    def stride(cls, full_count: int, views: int) -> "SampleMask":
        """Uniform-stride mask keeping ``views`` of ``full_count`` angles."""
        if views < 1 or full_count % views:
            raise ValueError(f"{views} views does not divide {full_count}")
        return cls(tuple(range(0, full_count, full_count // views)))


def resample_bilinear(img: Image, new_width: int, new_height: int) -> Image:
    """Bilinear resampling onto a grid covering the same physical extent."""
    if new_width < 2 or new_height < 2:
        raise ValueError("target dimensions must be >= 2")
    w, h = img.width, img.height
    spacing = img.spacing * w / new_width
    if not math.isclose(spacing * new_height, img.spacing * h, rel_tol=1e-12):
        raise ValueError("non-uniform rescale would produce non-square pixels")
    # new sample centers expressed in fractional source indices
    fx = (np.arange(new_width) + 0.5) * (w / new_width) - 0.5
    fy = (np.arange(new_height) + 0.5) * (h / new_height) - 0.5
    fx = np.clip(fx, 0, w - 1)
    fy = np.clip(fy, 0, h - 1)
    x0 = np.minimum(np.floor(fx).astype(int), w - 2) if w > 1 else np.zeros(new_width, int)
    y0 = np.minimum(np.floor(fy).astype(int), h - 2) if h > 1 else np.zeros(new_height, int)
    tx = fx - x0
    ty = fy - y0
    v = img.values
    top = v[y0][:, x0] * (1 - tx) + v[y0][:, x0 + 1] * tx
    bot = v[y0 + 1][:, x0] * (1 - tx) + v[y0 + 1][:, x0 + 1] * tx
    out = top * (1 - ty)[:, None] + bot * ty[:, None]
    return Image(out, spacing)


def add_gaussian_noise(sino: Sinogram, sigma: float, seed: int) -> Sinogram:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return sino.with_values(sino.values)
    z = make_rng(seed).standard_normal(sino.values.shape)
    return sino.with_values(sino.values + sigma * z)


def apply_mask(full: Sinogram, mask: SampleMask) -> Sinogram:
    idx = np.asarray(mask.kept)
    if idx[-1] >= len(full.angle_set):
        raise ValueError("mask index out of range")
    return Sinogram(full.angle_set.subset(idx), full.values[idx], full.det_spacing)


# -- binary grid files --------------------------------------------------------

GRID_MAGIC = b"CTOG"
GRID_VERSION = 1
_MAX_DIM = 1 << 20


def write_grid_file(path, obj: Image | Sinogram) -> None:
    parts = [GRID_MAGIC, struct.pack("<I", GRID_VERSION)]
    if isinstance(obj, Image):
        parts.append(struct.pack("<BIId", 0, obj.width, obj.height, obj.spacing))
    elif isinstance(obj, Sinogram):
        n = len(obj.angle_set)
        parts.append(struct.pack("<BIIdd", 1, n, obj.det_count, obj.det_spacing, obj.angle_set.period))
        parts.append(obj.angles.astype("<f8").tobytes())
    else:
        raise TypeError(f"cannot serialize {type(obj).__name__}")
    parts.append(np.ascontiguousarray(obj.values, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_grid_file(path) -> Image | Sinogram:
    data = Path(path).read_bytes()
    if data[:4] != GRID_MAGIC:
        raise FormatError("bad magic; not a CTOG grid file")
    try:
        (version,) = struct.unpack_from("<I", data, 4)
        if version != GRID_VERSION:
            raise FormatError(f"unsupported grid format version {version}")
        (kind,) = struct.unpack_from("<B", data, 8)
        if kind == 0:
            width, height, spacing = struct.unpack_from("<IId", data, 9)
            _check_dims(width, height)
            offset = 9 + 16
            values = _payload(data, offset, height * width).reshape(height, width)
            return Image(values, spacing)
        if kind == 1:
            n, det, det_spacing, period = struct.unpack_from("<IIdd", data, 9)
            _check_dims(n, det)
            offset = 9 + 24
            angles = _payload(data, offset, n, exact=False)
            offset += 8 * n
            values = _payload(data, offset, n * det).reshape(n, det)
            return Sinogram(AngleSet(angles, period), values, det_spacing)
    except struct.error as exc:
        raise FormatError(f"truncated header: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(str(exc)) from None
    raise FormatError(f"unknown grid kind {kind}")


def _check_dims(a: int, b: int) -> None:
    if not (0 < a <= _MAX_DIM and 0 < b <= _MAX_DIM):
        raise FormatError(f"dimension overflow ({a} x {b})")


def _payload(data: bytes, offset: int, count: int, exact: bool = True) -> np.ndarray:
    end = offset + 8 * count
    if len(data) < end or (exact and len(data) != end):
        raise FormatError("truncated or oversized payload")
    return np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64)
