"""Cost functions, the multi-resolution optimizer, and result files."""
from __future__ import annotations

import math
import os

import numpy as np
import pytest

from conftest import gaussian_bump, mi_oracle_bits, ncc_oracle, random_volume
from modsynth.errors import (
    CorruptFileError,
    DegenerateStatisticsError,
    EmptyMaskError,
    GridMismatchError,
    InvalidInitError,
    ParameterError,
)
from modsynth.registration import (
    CostKind,
    DeformableOptions,
    FfdTransform,
    RegistrationOptions,
    RegistrationResult,
    bending_energy,
    cost_mi,
    cost_ncc,
    cost_ssd,
    downsample,
    evaluate_cost,
    joint_histogram,
    load_affine_text,
    load_cost_trace,
    load_field,
    mutual_information,
    pyramid,
    register_affine,
    register_deformable,
    save_affine_text,
    save_cost_trace,
    save_field,
)
from modsynth.volume import Grid, Volume
from modsynth.xform import AffineTransform3D, DeformationField


def vol_of(values, dims, spacing=(1.0, 1.0, 1.0)) -> Volume:
    data = np.asarray(values, dtype=np.float64).reshape(dims)
    return Volume(data, Grid(dims, spacing, (0.0, 0.0, 0.0)))


def mask_of(flags, like: Volume) -> Volume:
    data = np.asarray(flags, dtype=np.float64).reshape(like.dims)
    return Volume(data, like.grid)


class TestCostKind:
    def test_cc_is_an_alias_for_ncc(self):
        assert CostKind("cc").kind == "ncc"
        assert CostKind("NCC").kind == "ncc"

    def test_known_kinds_pass_through(self):
        for kind in ("ssd", "ncc", "mi"):
            assert CostKind(kind).kind == kind

    def test_unknown_kind_rejected(self):
        with pytest.raises(ParameterError):
            CostKind("correlation-ratio")

    def test_mi_bins_validated(self):
        with pytest.raises(ParameterError):
            CostKind("mi", mi_bins=1)


class TestOptionValidation:
    def test_defaults_build(self):
        opts = RegistrationOptions()
        assert opts.levels == 3
        assert not opts.deformable.enabled

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"levels": 0},
            {"max_iters_per_level": 0},
            {"step_init": 0.0},
            {"step_shrink": 1.0},
            {"step_growth": -1.0},
            {"converge_tol": 0.0},
            {"fd_eps": 0.0},
        ],
    )
    def test_bad_scalar_options_rejected(self, kwargs):
        with pytest.raises(ParameterError):
            RegistrationOptions(**kwargs)

    def test_bad_deformable_options_rejected(self):
        with pytest.raises(ParameterError):
            DeformableOptions(control_spacing_um=(0.0, 1.0, 1.0))
        with pytest.raises(ParameterError):
            DeformableOptions(bending_weight=-0.5)


class TestCostSsd:
    def test_hand_computed_value(self):
        f = vol_of([0.0, 0.0], (2, 1, 1))
        m = vol_of([3.0, 4.0], (2, 1, 1))
        assert cost_ssd(f, m) == 12.5

    def test_zero_iff_equal(self, rng):
        v = random_volume(rng, dims=(6, 5, 4))
        assert cost_ssd(v, v) == 0.0
        w = Volume(v.data + 1e-6, v.grid)
        assert cost_ssd(v, w) > 0.0

    def test_mask_restricts_the_average(self):
        f = vol_of([0.0, 0.0, 10.0], (3, 1, 1))
        m = vol_of([3.0, 4.0, 0.0], (3, 1, 1))
        mask = mask_of([1.0, 1.0, 0.0], f)
        assert cost_ssd(f, m, mask) == 12.5

    def test_empty_mask_rejected(self, rng):
        v = random_volume(rng, dims=(4, 4, 2))
        mask = Volume(np.zeros(v.dims), v.grid)
        with pytest.raises(EmptyMaskError):
            cost_ssd(v, v, mask)

    def test_grid_mismatch_rejected(self, rng):
        a = random_volume(rng, dims=(4, 4, 2))
        b = random_volume(rng, dims=(4, 4, 2), spacing=(2.0, 1.0, 1.0))
        with pytest.raises(GridMismatchError):
            cost_ssd(a, b)
        small = random_volume(rng, dims=(3, 3, 2))
        with pytest.raises(GridMismatchError):
            cost_ssd(a, a, small)


class TestCostNcc:
    def test_identical_images_score_minus_one(self, rng):
        v = random_volume(rng, dims=(6, 6, 3))
        assert abs(cost_ncc(v, v) + 1.0) <= 1e-12

    def test_anticorrelated_images_score_plus_one(self, rng):
        v = random_volume(rng, dims=(6, 6, 3))
        w = Volume(200.0 - v.data, v.grid)
        assert abs(cost_ncc(v, w) - 1.0) <= 1e-12

    def test_matches_covariance_formula(self, rng):
        for _ in range(20):
            f = random_volume(rng, dims=(8, 7, 4))
            m = random_volume(rng, dims=(8, 7, 4))
            expected = -ncc_oracle(f.data.ravel(), m.data.ravel())
            assert abs(cost_ncc(f, m) - expected) <= 1e-12

    def test_invariant_under_positive_rescale(self, rng):
        f = random_volume(rng, dims=(8, 8, 4))
        m = random_volume(rng, dims=(8, 8, 4))
        base = cost_ncc(f, m)
        for a, b in ((2.5, -40.0), (0.03, 7.0), (1000.0, 123.0)):
            rescaled = Volume(a * m.data + b, m.grid)
            assert abs(cost_ncc(f, rescaled) - base) <= 1e-9
            rescaled_f = Volume(a * f.data + b, f.grid)
            assert abs(cost_ncc(rescaled_f, m) - base) <= 1e-9

    def test_constant_image_rejected(self, rng):
        v = random_volume(rng, dims=(4, 4, 2))
        flat = Volume(np.full(v.dims, 7.0), v.grid)
        with pytest.raises(DegenerateStatisticsError):
            cost_ncc(v, flat)
        with pytest.raises(DegenerateStatisticsError):
            cost_ncc(flat, v)


class TestJointHistogram:
    def test_matched_ramps_fill_the_diagonal(self):
        vals = np.arange(32, dtype=np.float64)
        a = vol_of(vals, (32, 1, 1))
        hist = joint_histogram(a, a, bins=32)
        assert np.array_equal(hist, np.eye(32, dtype=np.int64))

    def test_counts_are_conserved(self, rng):
        a = random_volume(rng, dims=(7, 6, 5))
        b = random_volume(rng, dims=(7, 6, 5))
        hist = joint_histogram(a, b, bins=8)
        assert hist.sum() == a.grid.n_voxels
        mask = Volume((rng.uniform(size=a.dims) > 0.4).astype(np.float64), a.grid)
        hist_masked = joint_histogram(a, b, bins=8, mask=mask)
        assert hist_masked.sum() == int((mask.data > 0.5).sum())

    def test_constant_image_lands_in_bin_zero(self, rng):
        b = random_volume(rng, dims=(5, 4, 3))
        a = Volume(np.full(b.dims, 3.0), b.grid)
        hist = joint_histogram(a, b, bins=6)
        assert hist[0].sum() == a.grid.n_voxels
        assert hist[1:].sum() == 0

    def test_max_value_lands_in_last_bin(self):
        a = vol_of([0.0, 10.0], (2, 1, 1))
        hist = joint_histogram(a, a, bins=4)
        assert hist[0, 0] == 1 and hist[3, 3] == 1

    def test_too_few_bins_rejected(self, rng):
        a = random_volume(rng, dims=(4, 4, 2))
        with pytest.raises(ParameterError):
            joint_histogram(a, a, bins=1)


class TestMutualInformation:
    def test_two_matched_bins_give_one_bit(self):
        v = vol_of([0.0, 1.0, 0.0, 1.0], (4, 1, 1))
        assert mutual_information(v, v, bins=2) == 1.0
        assert cost_mi(v, v, bins=2) == -1.0

    def test_independent_images_give_zero_bits(self):
        f = vol_of([i // 4 for i in range(16)], (16, 1, 1))
        m = vol_of([i % 4 for i in range(16)], (16, 1, 1))
        assert abs(mutual_information(f, m, bins=4)) <= 1e-12

    def test_self_information_equals_marginal_entropy(self, rng):
        v = random_volume(rng, dims=(10, 9, 4))
        bins = 8
        lo, hi = float(v.data.min()), float(v.data.max())
        labels = np.minimum(
            ((v.data.ravel() - lo) / (hi - lo) * bins).astype(int), bins - 1
        )
        p = np.bincount(labels, minlength=bins) / labels.size
        h = float(-(p[p > 0] * np.log2(p[p > 0])).sum())
        assert abs(mutual_information(v, v, bins=bins) - h) <= 1e-12

    def test_matches_brute_force_on_random_pairs(self, rng):
        for _ in range(10):
            f = random_volume(rng, dims=(16, 16, 4))
            m = random_volume(rng, dims=(16, 16, 4))
            expected = mi_oracle_bits(f.data.ravel(order="F"), m.data.ravel(order="F"), 32)
            assert abs(mutual_information(f, m, bins=32) - expected) <= 1e-12

    def test_invariant_under_bin_relabeling(self, rng):
        bins = 8
        base = np.tile(np.arange(bins, dtype=np.float64), 50)
        rng.shuffle(base)
        other = rng.integers(0, bins, size=base.size).astype(np.float64)
        other[:bins] = np.arange(bins)
        f = vol_of(base, (base.size, 1, 1))
        m = vol_of(other, (base.size, 1, 1))
        before = mutual_information(f, m, bins=bins)
        perm = rng.permutation(bins).astype(np.float64)
        f_relabeled = vol_of(perm[base.astype(int)], (base.size, 1, 1))
        after = mutual_information(f_relabeled, m, bins=bins)
        assert abs(after - before) <= 1e-12

    def test_nonnegative_on_random_pairs(self, rng):
        for _ in range(5):
            f = random_volume(rng, dims=(8, 8, 4))
            m = random_volume(rng, dims=(8, 8, 4))
            assert mutual_information(f, m, bins=16) >= -1e-12


class TestEvaluateCost:
    def test_dispatch_matches_direct_calls(self, rng):
        f = random_volume(rng, dims=(8, 8, 4))
        m = random_volume(rng, dims=(8, 8, 4))
        assert evaluate_cost(f, m, CostKind("ssd")) == cost_ssd(f, m)
        assert evaluate_cost(f, m, CostKind("ncc")) == cost_ncc(f, m)
        assert evaluate_cost(f, m, CostKind("mi", mi_bins=16)) == cost_mi(
            f, m, bins=16
        )

    def test_cc_alias_dispatches_to_ncc(self, rng):
        f = random_volume(rng, dims=(6, 6, 3))
        m = random_volume(rng, dims=(6, 6, 3))
        assert evaluate_cost(f, m, CostKind("cc")) == cost_ncc(f, m)


class TestDownsampleAndPyramid:
    def test_factor_one_is_identity(self, rng):
        v = random_volume(rng, dims=(6, 5, 4))
        assert downsample(v, 1) is v

    def test_factor_two_halves_dims_and_doubles_spacing(self, rng):
        v = random_volume(rng, dims=(9, 8, 5), spacing=(1.0, 2.0, 3.0))
        d = downsample(v, 2)
        assert d.dims == (5, 4, 3)
        assert d.spacing == (2.0, 4.0, 6.0)
        assert d.origin == v.origin

    def test_constant_volume_stays_constant(self):
        v = Volume(np.full((8, 8, 6), 42.0), Grid((8, 8, 6), (1.0, 1.0, 1.0), (0.0, 0.0, 0.0)))
        d = downsample(v, 2)
        assert np.allclose(d.data, 42.0, atol=1e-12)

    def test_pyramid_runs_coarse_to_fine(self, rng):
        v = random_volume(rng, dims=(16, 16, 8))
        levels = pyramid(v, 3)
        assert len(levels) == 3
        assert levels[2] is v
        assert levels[0].dims == downsample(v, 4).dims
        assert np.array_equal(levels[1].data, downsample(v, 2).data)

    def test_bad_factor_rejected(self, rng):
        v = random_volume(rng, dims=(4, 4, 2))
        with pytest.raises(ParameterError):
            downsample(v, 0)


def quick_opts(**kwargs) -> RegistrationOptions:
    base = dict(levels=2, max_iters_per_level=40)
    base.update(kwargs)
    return RegistrationOptions(**base)


class TestRegisterAffine:
    def test_identical_images_keep_identity(self):
        fixed = gaussian_bump((12, 12, 8), (1.0, 1.0, 1.0), (5.5, 5.5, 3.5), 3.0)
        result = register_affine(fixed, fixed, CostKind("ssd"), quick_opts())
        assert not result.failed
        assert result.final_cost < 1e-8
        drift = np.abs(
            result.affine.to_params() - AffineTransform3D.identity().to_params()
        )
        assert drift.max() < 1e-3

    def test_recovers_known_translation(self):
        dims = (20, 20, 14)
        spacing = (1.0, 1.0, 1.0)
        center = (9.5, 9.5, 6.5)
        shift = (3.0, 2.0, 1.0)
        fixed = gaussian_bump(dims, spacing, center, 4.0)
        moved_center = tuple(c + s for c, s in zip(center, shift))
        moving = gaussian_bump(dims, spacing, moved_center, 4.0)
        result = register_affine(
            fixed, moving, CostKind("cc"), quick_opts(levels=3, max_iters_per_level=80)
        )
        assert not result.failed
        mapped = result.affine.apply(np.asarray([center]))[0]
        target = np.asarray(moved_center)
        for axis in range(3):
            assert abs(mapped[axis] - target[axis]) <= 0.5 * spacing[axis]

    def test_singular_init_fails_without_optimizing(self):
        fixed = gaussian_bump((8, 8, 6), (1.0, 1.0, 1.0), (3.5, 3.5, 2.5), 2.0)
        init = AffineTransform3D(np.zeros((3, 3)), np.zeros(3))
        result = register_affine(fixed, fixed, CostKind("ssd"), quick_opts(), init)
        assert result.failed
        assert result.failure_reason == "SingularAffine"
        assert result.cost_trace == []
        assert math.isinf(result.final_cost)
        assert result.affine is init

    def test_trace_is_monotone_within_each_level(self):
        fixed = gaussian_bump((14, 14, 10), (1.0, 1.0, 1.0), (6.5, 6.5, 4.5), 3.0)
        moving = gaussian_bump((14, 14, 10), (1.0, 1.0, 1.0), (8.0, 7.5, 5.0), 3.0)
        result = register_affine(fixed, moving, CostKind("ssd"), quick_opts())
        assert len(result.cost_trace) > 0
        by_level: dict[int, list[float]] = {}
        for level, _, cost, step in result.cost_trace:
            by_level.setdefault(level, []).append(cost)
            assert step > 0
        for costs in by_level.values():
            assert all(b <= a + 1e-15 for a, b in zip(costs, costs[1:]))

    def test_deterministic_across_runs(self):
        fixed = gaussian_bump((12, 12, 8), (1.0, 1.0, 1.0), (5.0, 6.0, 3.5), 3.0)
        moving = gaussian_bump((12, 12, 8), (1.0, 1.0, 1.0), (6.0, 5.5, 4.0), 3.0)
        r1 = register_affine(fixed, moving, CostKind("ncc"), quick_opts())
        r2 = register_affine(fixed, moving, CostKind("ncc"), quick_opts())
        assert np.array_equal(r1.affine.to_params(), r2.affine.to_params())
        assert r1.cost_trace == r2.cost_trace
        assert r1.final_cost == r2.final_cost

    def test_iteration_budget_exhaustion_is_reported(self):
        fixed = gaussian_bump((14, 14, 10), (1.0, 1.0, 1.0), (6.5, 6.5, 4.5), 3.0)
        moving = gaussian_bump((14, 14, 10), (1.0, 1.0, 1.0), (9.5, 8.5, 5.5), 3.0)
        result = register_affine(
            fixed, moving, CostKind("ssd"), quick_opts(levels=1, max_iters_per_level=1)
        )
        assert result.failed
        assert result.failure_reason == "NonConvergence"
        assert len(result.cost_trace) >= 2

    def test_options_are_recorded(self):
        fixed = gaussian_bump((8, 8, 6), (1.0, 1.0, 1.0), (3.5, 3.5, 2.5), 2.0)
        result = register_affine(fixed, fixed, CostKind("mi", mi_bins=16), quick_opts())
        assert result.options["cost"] == {"kind": "mi", "mi_bins": 16}
        assert result.options["levels"] == 2
        assert result.options["translation_scale_um"] > 0

    def test_transform_returns_bare_affine(self):
        fixed = gaussian_bump((8, 8, 6), (1.0, 1.0, 1.0), (3.5, 3.5, 2.5), 2.0)
        result = register_affine(fixed, fixed, CostKind("ssd"), quick_opts())
        assert result.field is None
        assert result.transform() is result.affine


def passing_init(fixed: Volume) -> RegistrationResult:
    return RegistrationResult(
        affine=AffineTransform3D.identity(),
        final_cost=0.0,
        cost_trace=[],
        failed=False,
        options={"seeded": True},
    )


def deform_opts(weight=0.01, spacing=8.0, iters=10) -> RegistrationOptions:
    return RegistrationOptions(
        levels=1,
        max_iters_per_level=iters,
        deformable=DeformableOptions(
            enabled=True,
            control_spacing_um=(spacing, spacing, spacing),
            bending_weight=weight,
        ),
    )


class TestRegisterDeformable:
    def test_identical_images_keep_zero_field(self):
        fixed = gaussian_bump((12, 12, 8), (1.0, 1.0, 1.0), (5.5, 5.5, 3.5), 3.0)
        init = passing_init(fixed)
        result = register_deformable(fixed, fixed, CostKind("ssd"), deform_opts(), init)
        assert not result.failed
        assert result.final_cost <= init.final_cost + 1e-8
        assert result.field is not None
        assert np.abs(result.field.displacements).max() < 1e-6

    def test_huge_bending_weight_freezes_the_field(self):
        fixed = gaussian_bump((12, 12, 8), (1.0, 1.0, 1.0), (5.5, 5.5, 3.5), 3.0)
        moving = gaussian_bump((12, 12, 8), (1.0, 1.0, 1.0), (7.5, 6.5, 4.5), 3.0)
        init = passing_init(fixed)
        result = register_deformable(
            fixed, moving, CostKind("ssd"), deform_opts(weight=1e12, iters=5), init
        )
        assert np.abs(result.field.displacements).max() < 1e-6

    def test_failed_init_is_rejected(self):
        fixed = gaussian_bump((8, 8, 6), (1.0, 1.0, 1.0), (3.5, 3.5, 2.5), 2.0)
        bad = RegistrationResult(
            affine=AffineTransform3D.identity(),
            final_cost=math.inf,
            cost_trace=[],
            failed=True,
            failure_reason="SingularAffine",
        )
        with pytest.raises(InvalidInitError):
            register_deformable(fixed, fixed, CostKind("ssd"), deform_opts(), bad)

    def test_disabled_refinement_is_rejected(self):
        fixed = gaussian_bump((8, 8, 6), (1.0, 1.0, 1.0), (3.5, 3.5, 2.5), 2.0)
        opts = RegistrationOptions(levels=1, max_iters_per_level=5)
        with pytest.raises(ParameterError):
            register_deformable(fixed, fixed, CostKind("ssd"), opts, passing_init(fixed))

    def test_transform_composes_affine_and_field(self, rng):
        fixed = gaussian_bump((10, 10, 8), (1.0, 1.0, 1.0), (4.5, 4.5, 3.5), 3.0)
        init = passing_init(fixed)
        result = register_deformable(fixed, fixed, CostKind("ssd"), deform_opts(), init)
        t = result.transform()
        assert isinstance(t, FfdTransform)
        pts = rng.uniform(0.0, 9.0, size=(5, 3))
        expected = result.affine.apply(pts) + result.field.sample(pts)
        assert np.allclose(t.apply(pts), expected, atol=0.0)

    def test_deformable_options_are_recorded(self):
        fixed = gaussian_bump((10, 10, 8), (1.0, 1.0, 1.0), (4.5, 4.5, 3.5), 3.0)
        opts = deform_opts(weight=0.25)
        result = register_deformable(fixed, fixed, CostKind("ssd"), opts, passing_init(fixed))
        assert result.options["deformable"]["bending_weight"] == 0.25
        assert result.options["deformable"]["enabled"] is True


class TestBendingEnergy:
    def test_uniform_translation_costs_nothing(self):
        disp = np.full((4, 4, 4, 3), 2.5)
        assert bending_energy(disp) == 0.0

    def test_linear_ramp_costs_nothing(self):
        grid = np.arange(5, dtype=np.float64)
        disp = np.zeros((5, 4, 4, 3))
        disp[..., 0] = grid[:, None, None]
        assert bending_energy(disp) == 0.0

    def test_curvature_is_penalized(self):
        disp = np.zeros((5, 4, 4, 3))
        disp[2, :, :, 0] = 1.0
        assert bending_energy(disp) > 0.0

    def test_matches_direct_second_differences(self, rng):
        disp = rng.normal(size=(5, 4, 6, 3))
        expected = 0.0
        for axis in range(3):
            d2 = np.diff(disp, n=2, axis=axis)
            expected += float((d2 ** 2).sum())
        assert abs(bending_energy(disp) - expected) <= 1e-12


class TestResultSerialization:
    def test_affine_text_roundtrip(self, tmp_path, rng):
        params = rng.normal(size=12)
        params[:9] += np.eye(3).ravel()
        a = AffineTransform3D.from_params(params)
        path = os.path.join(tmp_path, "affine.txt")
        save_affine_text(a, path)
        loaded = load_affine_text(path)
        assert np.array_equal(loaded.to_params(), a.to_params())
        with open(path, "r", encoding="ascii") as fh:
            assert len(fh.read().strip().split("\n")) == 12

    def test_affine_text_wrong_count_rejected(self, tmp_path):
        path = os.path.join(tmp_path, "short.txt")
        with open(path, "w", encoding="ascii") as fh:
            fh.write("1.0 2.0 3.0\n")
        with pytest.raises(CorruptFileError):
            load_affine_text(path)

    def test_trace_roundtrip(self, tmp_path):
        trace = [(0, 0, 125.5, 0.25), (0, 1, 100.25, 0.25), (1, 0, 90.125, 0.3125)]
        path = os.path.join(tmp_path, "trace.csv")
        save_cost_trace(trace, path)
        assert load_cost_trace(path) == trace
        with open(path, "r", encoding="ascii") as fh:
            assert fh.readline().strip() == "level,iter,cost,step"

    def test_trace_bad_header_rejected(self, tmp_path):
        path = os.path.join(tmp_path, "bad.csv")
        with open(path, "w", encoding="ascii") as fh:
            fh.write("a,b,c,d\n0,0,1.0,0.1\n")
        with pytest.raises(CorruptFileError):
            load_cost_trace(path)

    def test_field_roundtrip(self, tmp_path, rng):
        grid = Grid((4, 3, 3), (8.0, 8.0, 8.0), (-1.0, 0.0, 2.0))
        disp = rng.normal(size=(4, 3, 3, 3))
        field = DeformationField(grid, disp)
        prefix = os.path.join(tmp_path, "field")
        save_field(field, prefix)
        for suffix in ("_dx", "_dy", "_dz"):
            assert os.path.exists(f"{prefix}{suffix}.nrrd")
        loaded = load_field(prefix)
        assert loaded.grid == grid
        assert np.array_equal(loaded.displacements, disp)
