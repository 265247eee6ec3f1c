"""3D scalar volumes with anisotropic physical voxel geometry.

Coordinates are physical (micrometres). Voxel data is stored as a float64
array of shape (nx, ny, nz); the flat serialization order is x-fastest.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DimensionMismatchError, ParameterError

Triple = tuple[float, float, float]


def _as_int_triple(t) -> tuple[int, int, int]:
    out = tuple(int(x) for x in t)
    if len(out) != 3:
        raise ParameterError(f"expected 3 components, got {len(out)}")
    return out


def _as_float_triple(t) -> Triple:
    out = tuple(float(x) for x in t)
    if len(out) != 3:
        raise ParameterError(f"expected 3 components, got {len(out)}")
    return out


@dataclass(frozen=True)
class Grid:
    """Voxel lattice geometry: counts, spacing (um/voxel), origin (um)."""

    dims: tuple[int, int, int]
    spacing: Triple
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "dims", _as_int_triple(self.dims))
        object.__setattr__(self, "spacing", _as_float_triple(self.spacing))
        object.__setattr__(self, "origin", _as_float_triple(self.origin))
        if any(d < 1 for d in self.dims):
            raise ParameterError(f"dims must be >= 1, got {self.dims}")
        if any(not (s > 0) or not math.isfinite(s) for s in self.spacing):
            raise ParameterError(f"spacing must be positive finite, got {self.spacing}")
        if any(not math.isfinite(o) for o in self.origin):
            raise ParameterError(f"origin must be finite, got {self.origin}")

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def extent_um(self) -> Triple:
        """Physical span from first to last voxel center per axis."""
        return tuple((d - 1) * s for d, s in zip(self.dims, self.spacing))

    def voxel_to_world(self, voxels: np.ndarray) -> np.ndarray:
        """Integer (or fractional) voxel indices (N, 3) to physical points."""
        v = np.atleast_2d(np.asarray(voxels, dtype=np.float64))
        return v * np.array(self.spacing) + np.array(self.origin)

    def world_points(self) -> np.ndarray:
        """All voxel-center coordinates, x-fastest order, shape (n_voxels, 3)."""
        nx, ny, nz = self.dims
        ix, iy, iz = np.meshgrid(
            np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
        )
        idx = np.stack(
            [ix.ravel(order="F"), iy.ravel(order="F"), iz.ravel(order="F")], axis=1
        )
        return self.voxel_to_world(idx)


@dataclass
class Volume:
    """Scalar image on a Grid; `data` has shape grid.dims, float64."""

    data: np.ndarray
    grid: Grid

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.shape != self.grid.dims:
            raise DimensionMismatchError(
                f"data shape {self.data.shape} != grid dims {self.grid.dims}"
            )
        if not np.all(np.isfinite(self.data)):
            raise ParameterError("volume intensities must be finite")

    @classmethod
    def from_flat(cls, flat: np.ndarray, grid: Grid) -> "Volume":
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != grid.n_voxels:
            raise DimensionMismatchError(
                f"flat length {flat.size} != voxel count {grid.n_voxels}"
            )
        return cls(flat.reshape(grid.dims, order="F"), grid)

    def to_flat(self) -> np.ndarray:
        """x-fastest flat copy of the data."""
        return self.data.ravel(order="F").copy()

    def copy(self) -> "Volume":
        return Volume(self.data.copy(), self.grid)

    def with_data(self, data: np.ndarray) -> "Volume":
        return Volume(data, self.grid)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.grid.dims

    @property
    def spacing(self) -> Triple:
        return self.grid.spacing

    @property
    def origin(self) -> Triple:
        return self.grid.origin


@dataclass(frozen=True)
class PreprocessParams:
    clip_percentile: float = 99.0
    smooth_sigma_um: Triple = (1.5, 1.5, 1.5)
    out_range: tuple[float, float] = (0.0, 255.0)

    def __post_init__(self):
        if not (0 < self.clip_percentile <= 100):
            raise ParameterError(
                f"clip_percentile must be in (0, 100], got {self.clip_percentile}"
            )
        object.__setattr__(
            self, "smooth_sigma_um", _as_float_triple(self.smooth_sigma_um)
        )
        if any(s < 0 for s in self.smooth_sigma_um):
            raise ParameterError(f"sigma must be >= 0, got {self.smooth_sigma_um}")
        lo, hi = self.out_range
        if not lo < hi:
            raise ParameterError(f"out_range must be increasing, got {self.out_range}")


def nearest_rank(values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile: sorted[ceil(q/100*N) - 1], clamped to valid."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ParameterError("percentile of empty value set")
    if not (0 <= q <= 100):
        raise ParameterError(f"q must be in [0, 100], got {q}")
    rank = max(math.ceil(q / 100.0 * values.size) - 1, 0)
    rank = min(rank, values.size - 1)
    return float(np.sort(values)[rank])


def percentile(v: Volume, q: float) -> float:
    return nearest_rank(v.data, q)


def percentile_clip(v: Volume, q: float) -> Volume:
    cap = percentile(v, q)
    return v.with_data(np.minimum(v.data, cap))


def gaussian_kernel_1d(sigma_vox: float) -> np.ndarray:
    """Discrete Gaussian, radius ceil(3*sigma), renormalized to sum 1."""
    if sigma_vox <= 0:
        return np.array([1.0])
    radius = math.ceil(3.0 * sigma_vox)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(x * x) / (2.0 * sigma_vox * sigma_vox))
    return k / k.sum()


def _smooth_axis(data: np.ndarray, axis: int, kernel: np.ndarray) -> np.ndarray:
    if kernel.size == 1:
        return data
    moved = np.moveaxis(data, axis, -1)
    shape = moved.shape
    lines = np.ascontiguousarray(moved.reshape(-1, shape[-1]))
    out = kernels.convolve_lines(lines, kernel)
    return np.moveaxis(out.reshape(shape), -1, axis)


def gaussian_smooth(v: Volume, sigma_um) -> Volume:
    sigma_um = _as_float_triple(sigma_um)
    if any(s < 0 for s in sigma_um):
        raise ParameterError(f"sigma must be >= 0, got {sigma_um}")
    data = v.data
    for axis in range(3):
        sigma_vox = sigma_um[axis] / v.spacing[axis]
        data = _smooth_axis(data, axis, gaussian_kernel_1d(sigma_vox))
    return v.with_data(np.ascontiguousarray(data))


def rescale_intensity(v: Volume, out_lo: float, out_hi: float) -> Volume:
    if not out_lo < out_hi:
        raise ParameterError(f"need out_lo < out_hi, got ({out_lo}, {out_hi})")
    vmin = float(v.data.min())
    vmax = float(v.data.max())
    if vmax == vmin:
        return v.with_data(np.full(v.dims, out_lo))
    t = (v.data - vmin) / (vmax - vmin)
    # endpoint-exact form: t=0 -> out_lo, t=1 -> out_hi with no rounding drift
    return v.with_data(out_lo * (1.0 - t) + out_hi * t)


def preprocess(v: Volume, p: PreprocessParams | None = None) -> Volume:
    p = p or PreprocessParams()
    out = percentile_clip(v, p.clip_percentile)
    out = gaussian_smooth(out, p.smooth_sigma_um)
    return rescale_intensity(out, p.out_range[0], p.out_range[1])


def sample_points(v: Volume, points_um: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear values and inside-grid flags for physical points (N, 3).

    Points outside the grid get value 0 and flag False.
    """
    pts = np.ascontiguousarray(np.atleast_2d(points_um), dtype=np.float64)
    if pts.shape[1] != 3:
        raise ParameterError(f"points must be (N, 3), got {pts.shape}")
    sx, sy, sz = v.spacing
    ox, oy, oz = v.origin
    return kernels.trilinear_points(v.data, sx, sy, sz, ox, oy, oz, pts)


def sample_trilinear(v: Volume, point_um) -> float:
    vals, _ = sample_points(v, np.asarray(point_um, dtype=np.float64).reshape(1, 3))
    return float(vals[0])
