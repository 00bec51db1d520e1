"""Field containers, residual construction, patching, and the dataset format.

Residuals are the data space of the diffusion model: for super-resolution
the correction between a high-resolution field and its bicubic-upsampled
low-resolution counterpart, for forecasting the difference between a future
and the current frame. This module also owns the on-disk trajectory format
(magic "FLEXDS01") shared by the simulator, trainer and CLI.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from .conditioning import ConditioningContext, Task
from .errors import (ConsistencyError, CoverageError, DataError,
                     ParameterError, ShapeError)

__all__ = [
    "Quantity", "Field", "ResidualSample", "DatasetHeader",
    "upsample", "subsample", "make_sr_residual", "make_fc_residual",
    "normalize", "denormalize", "extract_patches", "stitch",
    "write_dataset", "read_dataset",
]

MAGIC = b"FLEXDS01"
_HEADER_FMT = "<III d d d B d d"  # nx, ny, count, dt, viscosity, re_tag, quantity, mean, std
_HEADER_SIZE = struct.calcsize(_HEADER_FMT)


class Quantity(IntEnum):
    VORTICITY = 0
    VELOCITY_U = 1
    VELOCITY_V = 2


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class Field:
    """One 2D scalar grid snapshot with its grid metadata."""

    values: np.ndarray
    quantity: Quantity = Quantity.VORTICITY
    domain_length: float = 2.0 * np.pi
    time_index: int = 0
    dt: float = 0.0
    re_tag: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ShapeError(f"field values must be 2D, got {self.values.shape}")
        nx, ny = self.values.shape
        if nx < 8 or ny < 8 or not _is_pow2(nx) or not _is_pow2(ny):
            raise ShapeError(f"grid sizes must be powers of two >= 8, got {nx}x{ny}")
        if not np.all(np.isfinite(self.values)):
            raise DataError("field contains non-finite values")
        self.quantity = Quantity(self.quantity)

    @property
    def nx(self) -> int:
        return self.values.shape[0]

    @property
    def ny(self) -> int:
        return self.values.shape[1]

    def with_values(self, values: np.ndarray) -> "Field":
        return replace(self, values=values)


@dataclass
class ResidualSample:
    """A normalized residual plus the conditioning needed to invert it."""

    residual: np.ndarray
    context: ConditioningContext
    norm_mean: float = 0.0
    norm_std: float = 1.0


# -- bicubic resampling on the torus ---------------------------------------

def _cubic_kernel(x: np.ndarray) -> np.ndarray:
    """Keys cubic convolution kernel (a = -1/2), support [-2, 2]."""
    x = np.abs(x)
    out = np.zeros_like(x)
    near = x <= 1.0
    far = (x > 1.0) & (x < 2.0)
    out[near] = (1.5 * x[near] - 2.5) * x[near] ** 2 + 1.0
    out[far] = ((-0.5 * x[far] + 2.5) * x[far] - 4.0) * x[far] + 2.0
    return out


def _upsample_axis(arr: np.ndarray, factor: int, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    frac = (np.arange(factor) / factor)[None, :]               # phase within a cell
    offsets = np.array([-1, 0, 1, 2])[:, None]
    weights = _cubic_kernel(offsets - frac)                    # (4, factor)
    weights = weights / weights.sum(axis=0, keepdims=True)     # exact on constants
    base = np.arange(n)[:, None, None]
    idx = (base + offsets[None, :, :]) % n                     # (n, 4, factor)
    moved = np.moveaxis(arr, axis, 0)
    gathered = moved[idx]                                      # (n, 4, factor, ...)
    out = np.einsum("kf,nkf...->nf...", weights, gathered)
    out = out.reshape((n * factor,) + moved.shape[1:])
    return np.moveaxis(out, 0, axis)


def upsample(low, factor: int):
    """Bicubic upsampling with periodic boundaries.

    Output sample j along each axis sits at position j/factor of the input
    grid, so input samples are reproduced exactly at their own locations.
    Accepts a Field or a raw 2D array and returns the same kind.
    """
    if factor not in (2, 4, 8):
        raise ParameterError(f"unsupported upsample factor {factor}")
    values = low.values if isinstance(low, Field) else np.asarray(low)
    out = values.astype(np.float64, copy=False)
    out = _upsample_axis(out, factor, axis=0)
    out = _upsample_axis(out, factor, axis=1)
    out = out.astype(values.dtype, copy=False)
    if isinstance(low, Field):
        return low.with_values(out)
    return out


def subsample(hr, factor: int):
    """Uniform strided subsampling (no anti-alias filter)."""
    values = hr.values if isinstance(hr, Field) else np.asarray(hr)
    if values.shape[0] % factor or values.shape[1] % factor:
        raise ShapeError(
            f"grid {values.shape} not divisible by factor {factor}")
    out = values[::factor, ::factor]
    if isinstance(hr, Field):
        return hr.with_values(out)
    return out


# -- residual construction ---------------------------------------------------

def normalize(r: np.ndarray, mean: float, std: float) -> np.ndarray:
    if std <= 0:
        raise ParameterError(f"std must be > 0, got {std}")
    return (np.asarray(r) - mean) / std


def denormalize(r: np.ndarray, mean: float, std: float) -> np.ndarray:
    if std <= 0:
        raise ParameterError(f"std must be > 0, got {std}")
    return np.asarray(r) * std + mean


def make_sr_residual(hr: Field, factor: int, norm_mean: float = 0.0,
                     norm_std: float = 1.0, *, low_pass: bool = False) -> ResidualSample:
    """Build the super-resolution residual hr - up(subsample(hr)).

    The low-resolution field is formed by uniform strided subsampling;
    low_pass optionally applies a spectral anti-alias filter first (off by
    default, matching the benchmark protocol of the training corpus).
    """
    values = hr.values
    if values.shape[0] % factor or values.shape[1] % factor:
        raise ShapeError(f"grid {values.shape} not divisible by factor {factor}")
    src = _spectral_low_pass(values, factor) if low_pass else values
    base = upsample(subsample(src, factor), factor)
    residual = values - base
    ctx = ConditioningContext(
        task=Task.SR,
        snapshots=(normalize(base, norm_mean, norm_std),),
        re_tag=hr.re_tag,
        upsample_factor=factor,
    )
    return ResidualSample(residual=normalize(residual, norm_mean, norm_std),
                          context=ctx, norm_mean=norm_mean, norm_std=norm_std)


def make_fc_residual(current: Field, future: Field, s: int,
                     norm_mean: float = 0.0, norm_std: float = 1.0,
                     previous: Field | None = None) -> ResidualSample:
    """Build the forecast residual future - current at horizon s.

    The conditioning context carries the two most recent frames
    (previous, current); previous defaults to current when the history is
    one frame deep.
    """
    if current.values.shape != future.values.shape:
        raise ShapeError("current/future grids disagree")
    if future.time_index - current.time_index != s:
        raise ConsistencyError(
            f"time_index gap {future.time_index - current.time_index} != s={s}")
    prev = previous if previous is not None else current
    if prev.values.shape != current.values.shape:
        raise ShapeError("previous/current grids disagree")
    residual = future.values - current.values
    ctx = ConditioningContext(
        task=Task.FC,
        snapshots=(normalize(prev.values, norm_mean, norm_std),
                   normalize(current.values, norm_mean, norm_std)),
        re_tag=current.re_tag,
        step_index=s,
    )
    return ResidualSample(residual=normalize(residual, norm_mean, norm_std),
                          context=ctx, norm_mean=norm_mean, norm_std=norm_std)


def _spectral_low_pass(values: np.ndarray, factor: int) -> np.ndarray:
    """Zero all modes above the coarse-grid Nyquist wavenumber."""
    nx, ny = values.shape
    fx = np.fft.fftfreq(nx) * nx
    fy = np.fft.fftfreq(ny) * ny
    keep = (np.abs(fx)[:, None] <= nx // (2 * factor)) & \
           (np.abs(fy)[None, :] <= ny // (2 * factor))
    return np.real(np.fft.ifft2(np.fft.fft2(values) * keep))


# -- patch extraction and stitching -----------------------------------------

def extract_patches(field, patch: int, stride: int):
    """Deterministic raster-order tiling; returns [((i, j), array), ...]."""
    values = field.values if isinstance(field, Field) else np.asarray(field)
    nx, ny = values.shape
    if patch > nx or patch > ny:
        raise ParameterError(f"patch {patch} larger than field {values.shape}")
    if stride < 1:
        raise ParameterError("stride must be >= 1")
    out = []
    for i in range(0, nx - patch + 1, stride):
        for j in range(0, ny - patch + 1, stride):
            out.append(((i, j), values[i:i + patch, j:j + patch]))
    return out


def _taper_window(patch: int) -> np.ndarray:
    w = np.sin(np.pi * (np.arange(patch) + 0.5) / patch) ** 2
    return w[:, None] * w[None, :]


def stitch(patches, out_size, overlap_mode: str = "exact") -> np.ndarray:
    """Reassemble offset patches into a full field.

    "exact" places non-overlapping tiles directly (round-trip identity with
    extract_patches at stride == patch); "uniform" averages overlaps with
    equal weights; "taper" averages with a cosine taper that downweights
    patch borders.
    """
    nx, ny = (out_size, out_size) if np.isscalar(out_size) else out_size
    acc = np.zeros((nx, ny))
    weight = np.zeros((nx, ny))
    for (i, j), values in patches:
        p, q = values.shape
        if i + p > nx or j + q > ny:
            raise CoverageError(f"patch at ({i}, {j}) exceeds output {nx}x{ny}")
        if overlap_mode == "taper":
            w = _taper_window(p)
        else:
            w = np.ones((p, q))
        acc[i:i + p, j:j + q] += w * values
        weight[i:i + p, j:j + q] += w
    if overlap_mode == "exact" and np.any(weight > 1):
        raise CoverageError("overlapping patches in exact mode")
    if np.any(weight == 0):
        raise CoverageError("patches do not cover the output domain")
    return acc / weight


# -- on-disk dataset format ---------------------------------------------------

@dataclass
class DatasetHeader:
    nx: int
    ny: int
    count: int
    dt: float
    viscosity: float
    re_tag: float
    quantity: Quantity
    norm_mean: float = 0.0
    norm_std: float = 0.0  # 0 marks "not yet computed"


def write_dataset(path, snapshots: np.ndarray, header: DatasetHeader) -> None:
    """Write one trajectory: header plus row-major float32 grids."""
    snapshots = np.ascontiguousarray(snapshots, dtype=np.float32)
    if snapshots.ndim != 3:
        raise ShapeError(f"snapshots must be (count, nx, ny), got {snapshots.shape}")
    count, nx, ny = snapshots.shape
    if (nx, ny, count) != (header.nx, header.ny, header.count):
        raise ConsistencyError("header does not match snapshot array")
    packed = struct.pack(
        _HEADER_FMT, header.nx, header.ny, header.count, header.dt,
        header.viscosity, header.re_tag, int(header.quantity),
        header.norm_mean, header.norm_std)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(packed)
        fh.write(snapshots.astype("<f4").tobytes())


def read_dataset(path) -> tuple[np.ndarray, DatasetHeader]:
    """Read a trajectory file back; returns (snapshots, header)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset file not found: {path}")
    blob = path.read_bytes()
    if blob[:8] != MAGIC:
        raise DataError(f"{path} is not a FLEXDS01 dataset")
    fields = struct.unpack_from(_HEADER_FMT, blob, 8)
    header = DatasetHeader(nx=fields[0], ny=fields[1], count=fields[2],
                           dt=fields[3], viscosity=fields[4], re_tag=fields[5],
                           quantity=Quantity(fields[6]), norm_mean=fields[7],
                           norm_std=fields[8])
    data = np.frombuffer(blob, dtype="<f4", offset=8 + _HEADER_SIZE)
    expected = header.count * header.nx * header.ny
    if data.size != expected:
        raise DataError(f"{path}: payload has {data.size} values, expected {expected}")
    return data.reshape(header.count, header.nx, header.ny).copy(), header


def fields_from_dataset(snapshots: np.ndarray, header: DatasetHeader) -> list[Field]:
    """Wrap dataset snapshots as Field objects with shared metadata."""
    return [Field(values=snapshots[k], quantity=header.quantity,
                  time_index=k, dt=header.dt, re_tag=header.re_tag)
            for k in range(snapshots.shape[0])]
