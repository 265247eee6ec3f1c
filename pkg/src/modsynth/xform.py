"""Geometric transforms on physical 3D points.

All transforms map physical points (um) to physical points and expose
`apply(pts)` on (N, 3) arrays. Resampling follows the pull-back convention:
the transform carries target-grid voxel centers into the source volume's
space, so no field inversion is ever needed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import (
    DegenerateLandmarksError,
    InsufficientLandmarksError,
    ParameterError,
)
from .landmarks import LandmarkSet
from .volume import Grid, Volume, sample_points


def _frozen_array(obj, name: str, value: np.ndarray, shape: tuple[int, ...]):
    arr = np.ascontiguousarray(value, dtype=np.float64)
    if arr.shape != shape:
        raise ParameterError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} must be finite")
    arr.flags.writeable = False
    object.__setattr__(obj, name, arr)


@dataclass(frozen=True, eq=False)
class AffineTransform3D:
    matrix: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        _frozen_array(self, "matrix", self.matrix, (3, 3))
        _frozen_array(self, "translation", self.translation, (3,))

    @classmethod
    def identity(cls) -> "AffineTransform3D":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_params(cls, params: np.ndarray) -> "AffineTransform3D":
        """12-vector: 9 row-major matrix entries then 3 translations."""
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (12,):
            raise ParameterError(f"need 12 parameters, got shape {params.shape}")
        return cls(params[:9].reshape(3, 3), params[9:])

    def to_params(self) -> np.ndarray:
        return np.concatenate([self.matrix.ravel(), self.translation])

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        return pts @ self.matrix.T + self.translation

    def compose(self, inner: "AffineTransform3D") -> "AffineTransform3D":
        """self(inner(x)): apply `inner` first, then this transform."""
        return AffineTransform3D(
            self.matrix @ inner.matrix,
            self.matrix @ inner.translation + self.translation,
        )

    def inverse(self) -> "AffineTransform3D":
        inv = np.linalg.inv(self.matrix)
        return AffineTransform3D(inv, -inv @ self.translation)

    def determinant(self) -> float:
        return float(np.linalg.det(self.matrix))


def affine_is_singular(a: AffineTransform3D, tol: float = 1e-6) -> bool:
    return abs(a.determinant()) < tol


@dataclass(frozen=True, eq=False)
class TpsTransform:
    """Thin-plate spline with 3D polyharmonic kernel U(r) = r.

    T(p) = affine(p) + sum_i weights_i * ||p - control_pts_i||.
    """

    control_pts: np.ndarray
    weights: np.ndarray
    affine: AffineTransform3D

    def __post_init__(self):
        n = np.asarray(self.control_pts).shape[0]
        _frozen_array(self, "control_pts", self.control_pts, (n, 3))
        _frozen_array(self, "weights", self.weights, (n, 3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.ascontiguousarray(np.atleast_2d(pts), dtype=np.float64)
        return kernels.tps_map_points(
            self.control_pts,
            self.weights,
            self.affine.matrix,
            self.affine.translation,
            pts,
        )


@dataclass(eq=False)
class DeformationField:
    """Dense displacement field on a grid: T(x) = x + d(x), d trilinear."""

    grid: Grid
    displacements: np.ndarray  # (nx, ny, nz, 3) um

    def __post_init__(self):
        self.displacements = np.ascontiguousarray(
            self.displacements, dtype=np.float64
        )
        if self.displacements.shape != self.grid.dims + (3,):
            raise ParameterError(
                f"displacement shape {self.displacements.shape} "
                f"!= grid dims {self.grid.dims} + (3,)"
            )
        if not np.all(np.isfinite(self.displacements)):
            raise ParameterError("displacements must be finite")

    def sample(self, pts: np.ndarray) -> np.ndarray:
        """Interpolated displacement at each point; zero outside the grid."""
        pts = np.ascontiguousarray(np.atleast_2d(pts), dtype=np.float64)
        sx, sy, sz = self.grid.spacing
        ox, oy, oz = self.grid.origin
        out = np.empty_like(pts)
        for c in range(3):
            comp = np.ascontiguousarray(self.displacements[..., c])
            vals, _ = kernels.trilinear_points(comp, sx, sy, sz, ox, oy, oz, pts)
            out[:, c] = vals
        return out

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        return pts + self.sample(pts)


def _tps_system(moving: np.ndarray, fixed: np.ndarray, regularization: float):
    n = moving.shape[0]
    diff = moving[:, None, :] - moving[None, :, :]
    K = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    if regularization:
        K = K + regularization * np.eye(n)
    P = np.concatenate([np.ones((n, 1)), moving], axis=1)
    A = np.zeros((n + 4, n + 4))
    A[:n, :n] = K
    A[:n, n:] = P
    A[n:, :n] = P.T
    rhs = np.zeros((n + 4, 3))
    rhs[:n] = fixed
    return A, rhs


def tps_fit(lms: LandmarkSet, regularization: float = 0.0) -> TpsTransform:
    """Fit moving -> fixed on active landmarks; exact interpolation at lambda=0."""
    if regularization < 0:
        raise ParameterError("regularization must be >= 0")
    moving = lms.moving_array()
    fixed = lms.fixed_array()
    n = moving.shape[0]
    if n < 4:
        raise InsufficientLandmarksError(
            f"TPS fit needs >= 4 active landmarks, got {n}"
        )
    diff = moving[:, None, :] - moving[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    if np.any(dist[~np.eye(n, dtype=bool)] == 0.0):
        raise DegenerateLandmarksError("duplicate moving landmark positions")
    centered = moving - moving.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    if svals[2] <= 1e-10 * max(svals[0], 1.0):
        raise DegenerateLandmarksError("active landmarks are coplanar")

    A, rhs = _tps_system(moving, fixed, regularization)
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as e:
        raise DegenerateLandmarksError(f"singular TPS system: {e}") from e
    resid = np.linalg.norm(A @ sol - rhs)
    if not np.all(np.isfinite(sol)) or resid > 1e-6 * max(np.linalg.norm(rhs), 1.0):
        raise DegenerateLandmarksError(
            f"TPS system ill-conditioned (residual {resid:.3e})"
        )
    weights = sol[:n]
    translation = sol[n]
    matrix = sol[n + 1:n + 4].T
    return TpsTransform(moving, weights, AffineTransform3D(matrix, translation))


def tps_apply(t: TpsTransform, point_um) -> np.ndarray:
    return t.apply(np.asarray(point_um, dtype=np.float64).reshape(1, 3))[0]


def tps_inverse(lms: LandmarkSet, regularization: float = 0.0) -> TpsTransform:
    """Fit on role-swapped landmarks: exact inverse at the landmarks."""
    return tps_fit(lms.swapped(), regularization)


def resample_with_inbounds(
    src: Volume, t, target_grid: Grid
) -> tuple[Volume, np.ndarray]:
    """Pull-back resample of `src` onto `target_grid`.

    Returns the resampled volume and a boolean array marking target voxels
    whose mapped location fell inside the source grid.
    """
    pts = target_grid.world_points()
    mapped = np.ascontiguousarray(t.apply(pts))
    vals, inb = sample_points(src, mapped)
    vol = Volume.from_flat(vals, target_grid)
    mask = inb.reshape(target_grid.dims, order="F")
    return vol, mask


def resample(src: Volume, t, target_grid: Grid) -> Volume:
    vol, _ = resample_with_inbounds(src, t, target_grid)
    return vol


def rasterize_field(t, grid: Grid) -> DeformationField:
    """Cache a transform as displacements at every voxel center."""
    pts = grid.world_points()
    disp_flat = t.apply(pts) - pts
    disp = np.empty(grid.dims + (3,))
    for c in range(3):
        disp[..., c] = disp_flat[:, c].reshape(grid.dims, order="F")
    return DeformationField(grid, disp)
