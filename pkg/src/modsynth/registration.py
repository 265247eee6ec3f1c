"""Intensity-based registration: SSD/NCC/MI costs, multi-resolution affine
descent, and an optional free-form-deformation refinement.

Transforms follow the pull-back convention: the recovered map carries
fixed-image points into moving-image space, and the moving image is sampled
there. All costs are oriented so lower is better (NCC and MI are negated).
The optimizer is central-finite-difference gradient descent with
backtracking; only cost-improving moves are accepted, so the recorded trace
is monotone non-increasing within a level.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import kernels
from ._ioutil import atomic_write_text
from .errors import (
    CorruptFileError,
    DegenerateStatisticsError,
    EmptyMaskError,
    GridMismatchError,
    InvalidInitError,
    ParameterError,
)
from .volume import Grid, Volume, gaussian_smooth
from .xform import AffineTransform3D, DeformationField, affine_is_singular

COST_SSD = "ssd"
COST_NCC = "ncc"
COST_MI = "mi"

FAIL_SINGULAR = "SingularAffine"
FAIL_NONCONVERGENCE = "NonConvergence"


@dataclass(frozen=True)
class CostKind:
    kind: str = COST_SSD
    mi_bins: int = 32

    def __post_init__(self):
        kind = self.kind.strip().lower()
        if kind in ("cc", "ncc"):
            kind = COST_NCC
        if kind not in (COST_SSD, COST_NCC, COST_MI):
            raise ParameterError(f"unknown cost kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if self.mi_bins < 2:
            raise ParameterError(f"mi_bins must be >= 2, got {self.mi_bins}")


@dataclass(frozen=True)
class DeformableOptions:
    enabled: bool = False
    control_spacing_um: tuple[float, float, float] = (16.0, 16.0, 16.0)
    bending_weight: float = 0.01

    def __post_init__(self):
        spacing = tuple(float(s) for s in self.control_spacing_um)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ParameterError(f"control spacing must be positive, got {spacing}")
        object.__setattr__(self, "control_spacing_um", spacing)
        if self.bending_weight < 0:
            raise ParameterError("bending_weight must be >= 0")


@dataclass(frozen=True)
class RegistrationOptions:
    levels: int = 3
    max_iters_per_level: int = 200
    step_init: float = 0.25
    step_shrink: float = 0.5
    step_growth: float = 1.25
    step_min: float = 1e-10
    converge_tol: float = 1e-7
    fd_eps: float = 1e-3
    translation_scale_um: float | None = None  # None -> half mean fixed extent
    deformable: DeformableOptions = dc_field(default_factory=DeformableOptions)

    def __post_init__(self):
        if self.levels < 1:
            raise ParameterError(f"levels must be >= 1, got {self.levels}")
        if self.max_iters_per_level < 1:
            raise ParameterError("max_iters_per_level must be >= 1")
        for name in ("step_init", "step_shrink", "step_growth", "step_min",
                     "converge_tol", "fd_eps"):
            if getattr(self, name) <= 0:
                raise ParameterError(f"{name} must be > 0")
        if self.step_shrink >= 1:
            raise ParameterError("step_shrink must be < 1")

    def to_dict(self) -> dict:
        return {
            "levels": self.levels,
            "max_iters_per_level": self.max_iters_per_level,
            "step_init": self.step_init,
            "step_shrink": self.step_shrink,
            "step_growth": self.step_growth,
            "step_min": self.step_min,
            "converge_tol": self.converge_tol,
            "fd_eps": self.fd_eps,
            "translation_scale_um": self.translation_scale_um,
            "deformable": {
                "enabled": self.deformable.enabled,
                "control_spacing_um": list(self.deformable.control_spacing_um),
                "bending_weight": self.deformable.bending_weight,
            },
        }


@dataclass(eq=False)
class FfdTransform:
    """Affine plus a control-grid displacement: T(x) = A(x) + d(x)."""

    affine: AffineTransform3D
    field: DeformationField

    def apply(self, pts: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        return self.affine.apply(pts) + self.field.sample(pts)


@dataclass(eq=False)
class RegistrationResult:
    affine: AffineTransform3D
    final_cost: float
    cost_trace: list[tuple[int, int, float, float]]  # (level, iter, cost, step)
    failed: bool
    failure_reason: str | None = None
    field: DeformationField | None = None
    options: dict = dc_field(default_factory=dict)

    def transform(self):
        if self.field is None:
            return self.affine
        return FfdTransform(self.affine, self.field)


# ---------------------------------------------------------------------------
# cost functions
# ---------------------------------------------------------------------------

def _masked_flat(
    fixed: Volume, moving: Volume, mask: Volume | None
) -> tuple[np.ndarray, np.ndarray]:
    if fixed.grid != moving.grid:
        raise GridMismatchError(
            f"fixed grid {fixed.grid} != moving grid {moving.grid}"
        )
    if mask is None:
        return fixed.data.ravel(), moving.data.ravel()
    if mask.grid.dims != fixed.grid.dims:
        raise GridMismatchError("mask grid differs from image grid")
    keep = mask.data > 0.5
    if not keep.any():
        raise EmptyMaskError("cost mask selects no voxels")
    return fixed.data[keep], moving.data[keep]


def _ssd_flat(f: np.ndarray, m: np.ndarray) -> float:
    d = f - m
    return float(np.dot(d, d) / d.size)


def _ncc_flat(f: np.ndarray, m: np.ndarray) -> float:
    fc = f - f.mean()
    mc = m - m.mean()
    denom = math.sqrt(float(np.dot(fc, fc)) * float(np.dot(mc, mc)))
    if denom == 0.0:
        raise DegenerateStatisticsError("constant masked intensities in NCC")
    return -float(np.dot(fc, mc)) / denom


def _mi_flat(f: np.ndarray, m: np.ndarray, bins: int) -> float:
    hist = kernels.joint_hist(
        f, m, float(f.min()), float(f.max()), float(m.min()), float(m.max()), bins
    )
    return -_mi_from_hist(hist)


def _mi_from_hist(hist: np.ndarray) -> float:
    total = hist.sum()
    if total == 0:
        raise EmptyMaskError("empty joint histogram")
    p = hist / total
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    nz = p > 0
    pi, pj = np.nonzero(nz)
    terms = p[nz] * (np.log2(p[nz]) - np.log2(px[pi]) - np.log2(py[pj]))
    return float(terms.sum())


def cost_ssd(fixed: Volume, moving_resampled: Volume, mask: Volume | None = None) -> float:
    f, m = _masked_flat(fixed, moving_resampled, mask)
    return _ssd_flat(f, m)


def cost_ncc(fixed: Volume, moving_resampled: Volume, mask: Volume | None = None) -> float:
    f, m = _masked_flat(fixed, moving_resampled, mask)
    return _ncc_flat(f, m)


def joint_histogram(
    a: Volume, b: Volume, bins: int, mask: Volume | None = None
) -> np.ndarray:
    if bins < 2:
        raise ParameterError(f"bins must be >= 2, got {bins}")
    f, m = _masked_flat(a, b, mask)
    return kernels.joint_hist(
        f, m, float(f.min()), float(f.max()), float(m.min()), float(m.max()), bins
    )


def cost_mi(
    fixed: Volume, moving_resampled: Volume, mask: Volume | None = None, bins: int = 32
) -> float:
    return -mutual_information(fixed, moving_resampled, mask, bins)


def mutual_information(
    fixed: Volume, moving_resampled: Volume, mask: Volume | None = None, bins: int = 32
) -> float:
    """MI in bits (non-negated convenience form)."""
    return _mi_from_hist(joint_histogram(fixed, moving_resampled, bins, mask))


def evaluate_cost(
    fixed: Volume, moving_resampled: Volume, cost: CostKind,
    mask: Volume | None = None,
) -> float:
    f, m = _masked_flat(fixed, moving_resampled, mask)
    if cost.kind == COST_SSD:
        return _ssd_flat(f, m)
    if cost.kind == COST_NCC:
        return _ncc_flat(f, m)
    return _mi_flat(f, m, cost.mi_bins)


# ---------------------------------------------------------------------------
# multi-resolution pyramid
# ---------------------------------------------------------------------------

def downsample(v: Volume, factor: int) -> Volume:
    """Gaussian-smooth (sigma = factor/2 voxels) then take every factor-th."""
    if factor < 1:
        raise ParameterError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return v
    sigma_um = tuple((factor / 2.0) * s for s in v.spacing)
    smoothed = gaussian_smooth(v, sigma_um)
    data = np.ascontiguousarray(smoothed.data[::factor, ::factor, ::factor])
    spacing = tuple(s * factor for s in v.spacing)
    return Volume(data, Grid(data.shape, spacing, v.origin))


def pyramid(v: Volume, levels: int) -> list[Volume]:
    """Coarse-to-fine: factors 2^(levels-1), ..., 2, 1."""
    return [downsample(v, 2 ** (levels - 1 - l)) for l in range(levels)]


# ---------------------------------------------------------------------------
# optimizer core
# ---------------------------------------------------------------------------

def _safe_cost(fn, params: np.ndarray) -> float:
    try:
        return fn(params)
    except DegenerateStatisticsError:
        return math.inf


def _descend(
    cost_fn,
    params: np.ndarray,
    scales: np.ndarray,
    opts: RegistrationOptions,
    level: int,
    trace: list[tuple[int, int, float, float]],
) -> tuple[np.ndarray, float, bool]:
    """Backtracking normalized-gradient descent in scaled parameter space.

    Returns (params, cost, converged). Appends only accepted moves (plus the
    initial evaluation) to the trace.
    """
    step = opts.step_init
    cost = _safe_cost(cost_fn, params)
    trace.append((level, 0, cost, step))
    last_rel_change = math.inf
    n_params = params.size
    eps = opts.fd_eps * scales
    for it in range(1, opts.max_iters_per_level + 1):
        grad = np.zeros(n_params)
        for i in range(n_params):
            probe = params.copy()
            probe[i] = params[i] + eps[i]
            c_plus = _safe_cost(cost_fn, probe)
            probe[i] = params[i] - eps[i]
            c_minus = _safe_cost(cost_fn, probe)
            if math.isfinite(c_plus) and math.isfinite(c_minus):
                grad[i] = (c_plus - c_minus) / (2.0 * eps[i])
        direction = grad * scales
        norm = float(np.linalg.norm(direction))
        if norm == 0.0:
            return params, cost, True
        direction /= norm
        moved = False
        while step >= opts.step_min:
            candidate = params - step * direction * scales
            c_new = _safe_cost(cost_fn, candidate)
            if c_new < cost:
                rel = abs(cost - c_new) / max(abs(cost), 1e-30)
                params = candidate
                cost = c_new
                last_rel_change = rel
                trace.append((level, it, cost, step))
                step = min(step * opts.step_growth, opts.step_init * 8.0)
                moved = True
                break
            step *= opts.step_shrink
        if not moved:
            return params, cost, True  # step floor reached: no improving move
        if last_rel_change < opts.converge_tol:
            return params, cost, True
    converged = last_rel_change <= 100.0 * opts.converge_tol
    return params, cost, converged


# ---------------------------------------------------------------------------
# affine registration
# ---------------------------------------------------------------------------

def _resample_flat_affine(
    moving: Volume, params: np.ndarray, fixed_pts: np.ndarray
) -> np.ndarray:
    matrix = params[:9].reshape(3, 3)
    translation = params[9:]
    mapped = fixed_pts @ matrix.T + translation
    sx, sy, sz = moving.spacing
    ox, oy, oz = moving.origin
    vals, _ = kernels.trilinear_points(
        moving.data, sx, sy, sz, ox, oy, oz, np.ascontiguousarray(mapped)
    )
    return vals


def _make_affine_cost(fixed: Volume, moving: Volume, cost: CostKind):
    fixed_flat = fixed.data.ravel(order="F")
    fixed_pts = fixed.grid.world_points()

    def fn(params: np.ndarray) -> float:
        m = _resample_flat_affine(moving, params, fixed_pts)
        if cost.kind == COST_SSD:
            return _ssd_flat(fixed_flat, m)
        if cost.kind == COST_NCC:
            return _ncc_flat(fixed_flat, m)
        return _mi_flat(fixed_flat, m, cost.mi_bins)

    return fn


def _translation_scale(fixed: Volume, opts: RegistrationOptions) -> float:
    if opts.translation_scale_um is not None:
        return opts.translation_scale_um
    extent = fixed.grid.extent_um
    return max(sum(extent) / 3.0 / 2.0, 1.0)


def register_affine(
    fixed: Volume,
    moving: Volume,
    cost: CostKind,
    opts: RegistrationOptions | None = None,
    init: AffineTransform3D | None = None,
) -> RegistrationResult:
    opts = opts or RegistrationOptions()
    init = init or AffineTransform3D.identity()
    recorded = opts.to_dict()
    recorded["cost"] = {"kind": cost.kind, "mi_bins": cost.mi_bins}
    t_scale = _translation_scale(fixed, opts)
    recorded["translation_scale_um"] = t_scale

    if affine_is_singular(init):
        return RegistrationResult(
            affine=init,
            final_cost=math.inf,
            cost_trace=[],
            failed=True,
            failure_reason=FAIL_SINGULAR,
            options=recorded,
        )

    fixed_pyr = pyramid(fixed, opts.levels)
    moving_pyr = pyramid(moving, opts.levels)
    scales = np.concatenate([np.ones(9), np.full(3, t_scale)])
    params = init.to_params()
    trace: list[tuple[int, int, float, float]] = []
    all_converged = True
    final_cost = math.inf
    for level, (f_level, m_level) in enumerate(zip(fixed_pyr, moving_pyr)):
        cost_fn = _make_affine_cost(f_level, m_level, cost)
        params, final_cost, converged = _descend(
            cost_fn, params, scales, opts, level, trace
        )
        all_converged = all_converged and converged

    affine = AffineTransform3D.from_params(params)
    failed = False
    reason = None
    if affine_is_singular(affine):
        failed, reason = True, FAIL_SINGULAR
    elif not all_converged:
        failed, reason = True, FAIL_NONCONVERGENCE
    return RegistrationResult(
        affine=affine,
        final_cost=final_cost,
        cost_trace=trace,
        failed=failed,
        failure_reason=reason,
        options=recorded,
    )


# ---------------------------------------------------------------------------
# free-form deformation refinement
# ---------------------------------------------------------------------------

def _control_grid(fixed: Volume, spacing_um) -> Grid:
    dims = []
    for axis in range(3):
        extent = fixed.grid.extent_um[axis]
        dims.append(max(int(math.ceil(extent / spacing_um[axis])) + 1, 2))
    return Grid(tuple(dims), spacing_um, fixed.origin)


def bending_energy(disp: np.ndarray) -> float:
    """Sum of squared second differences of control displacements, all axes."""
    total = 0.0
    for axis in range(3):
        if disp.shape[axis] < 3:
            continue
        second = np.diff(disp, n=2, axis=axis)
        total += float(np.sum(second * second))
    return total


def register_deformable(
    fixed: Volume,
    moving: Volume,
    cost: CostKind,
    opts: RegistrationOptions,
    init: RegistrationResult,
) -> RegistrationResult:
    if init.failed:
        raise InvalidInitError(
            f"cannot refine a failed registration ({init.failure_reason})"
        )
    if not opts.deformable.enabled:
        raise ParameterError("deformable refinement is disabled in options")

    ctrl_grid = _control_grid(fixed, opts.deformable.control_spacing_um)
    cdims = ctrl_grid.dims
    n_ctrl = ctrl_grid.n_voxels
    affine = init.affine
    fixed_flat = fixed.data.ravel(order="F")
    fixed_pts = fixed.grid.world_points()
    affine_pts = affine.apply(fixed_pts)
    weight = opts.deformable.bending_weight

    sx, sy, sz = ctrl_grid.spacing
    ox, oy, oz = ctrl_grid.origin

    def cost_fn(flat_disp: np.ndarray) -> float:
        disp = flat_disp.reshape(cdims + (3,))
        offsets = np.empty_like(fixed_pts)
        for c in range(3):
            comp = np.ascontiguousarray(disp[..., c])
            vals, _ = kernels.trilinear_points(
                comp, sx, sy, sz, ox, oy, oz, fixed_pts
            )
            offsets[:, c] = vals
        mapped = np.ascontiguousarray(affine_pts + offsets)
        msx, msy, msz = moving.spacing
        mox, moy, moz = moving.origin
        m, _ = kernels.trilinear_points(
            moving.data, msx, msy, msz, mox, moy, moz, mapped
        )
        if cost.kind == COST_SSD:
            data_cost = _ssd_flat(fixed_flat, m)
        elif cost.kind == COST_NCC:
            data_cost = _ncc_flat(fixed_flat, m)
        else:
            data_cost = _mi_flat(fixed_flat, m, cost.mi_bins)
        return data_cost + weight * bending_energy(disp)

    params = np.zeros(n_ctrl * 3)
    scales = np.ones(n_ctrl * 3)  # displacements are already in um
    trace: list[tuple[int, int, float, float]] = []
    params, final_cost, converged = _descend(
        cost_fn, params, scales, opts, 0, trace
    )
    disp = params.reshape(cdims + (3,))
    field = DeformationField(ctrl_grid, disp)
    recorded = dict(init.options)
    recorded["deformable"] = opts.to_dict()["deformable"]
    failed = not converged
    return RegistrationResult(
        affine=affine,
        final_cost=final_cost,
        cost_trace=trace,
        failed=failed,
        failure_reason=FAIL_NONCONVERGENCE if failed else None,
        field=field,
        options=recorded,
    )


# ---------------------------------------------------------------------------
# result serialization
# ---------------------------------------------------------------------------

def save_affine_text(a: AffineTransform3D, path: str) -> None:
    lines = [repr(float(x)) for x in a.to_params()]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_affine_text(path: str) -> AffineTransform3D:
    with open(path, "r", encoding="ascii") as fh:
        values = [float(tok) for tok in fh.read().split()]
    if len(values) != 12:
        raise CorruptFileError(f"{path}: expected 12 values, got {len(values)}")
    return AffineTransform3D.from_params(np.asarray(values))


def save_cost_trace(trace, path: str) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["level", "iter", "cost", "step"])
    for level, it, cost, step in trace:
        writer.writerow([level, it, repr(float(cost)), repr(float(step))])
    atomic_write_text(path, buf.getvalue())


def load_cost_trace(path: str) -> list[tuple[int, int, float, float]]:
    out = []
    with open(path, "r", encoding="ascii", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["level", "iter", "cost", "step"]:
            raise CorruptFileError(f"{path}: unexpected trace header {header}")
        for row in reader:
            out.append((int(row[0]), int(row[1]), float(row[2]), float(row[3])))
    return out


def save_field(field: DeformationField, path_prefix: str) -> None:
    from .volume_io import save_volume

    for c, suffix in enumerate(("_dx", "_dy", "_dz")):
        comp = Volume(
            np.ascontiguousarray(field.displacements[..., c]), field.grid
        )
        save_volume(comp, f"{path_prefix}{suffix}.nrrd")


def load_field(path_prefix: str) -> DeformationField:
    from .volume_io import load_volume

    comps = [load_volume(f"{path_prefix}{suffix}.nrrd") for suffix in ("_dx", "_dy", "_dz")]
    grid = comps[0].grid
    disp = np.stack([c.data for c in comps], axis=-1)
    return DeformationField(grid, disp)
