"""Numba-vs-numpy kernel benchmark.

Runs every hot kernel on a realistic workload under both backends and
prints per-kernel timings (best of --repeats), the speedup, and the
maximum absolute difference between the two backends' outputs.

The numba backend is imported directly, so this works regardless of the
MODSYNTH_NO_NUMBA flag; if numba is not importable only the numpy column
is reported. The first numba call of each kernel is excluded from timing
(JIT compilation).

Usage:
    python benchmarks/bench_kernels.py [--repeats 5] [--seed 0]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from modsynth.ensemble import (
    BoostedTreesParams,
    RandomForestParams,
    train_boosted_trees,
    train_random_forest,
)
from modsynth.features import FeatureSpec, TrainingSet
from modsynth.kernels import _numpy as numpy_impl

try:
    from modsynth.kernels import _numba as numba_impl
except ImportError:
    numba_impl = None


def walk_to_payload(x, feature, threshold, left, right, root):
    """Reference traversal to a leaf payload row (for tree-builder diffs)."""
    node = root
    while feature[node] >= 0:
        node = left[node] if x[feature[node]] <= threshold[node] else right[node]
    return left[node]


def tree_predictions(X, built):
    feature, threshold, left, right, payload = built
    rows = np.array(
        [walk_to_payload(x, feature, threshold, left, right, 0) for x in X]
    )
    return payload[rows]


def max_abs_diff(a, b) -> float:
    if isinstance(a, tuple):
        return max(max_abs_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def build_workloads(seed: int) -> list[tuple[str, str, tuple, str]]:
    """(kernel name, arg summary, args, diff mode) per benchmark case."""
    rng = np.random.default_rng(seed)

    lines = rng.uniform(0.0, 255.0, size=(4096, 257))
    taps = np.exp(-0.5 * np.linspace(-3, 3, 19) ** 2)
    taps /= taps.sum()

    vol = rng.uniform(0.0, 255.0, size=(96, 96, 48))
    pts = rng.uniform((0, 0, 0), (95.0, 95.0, 141.0), size=(200_000, 3))

    ctrl = rng.uniform(0.0, 100.0, size=(60, 3))
    weights = rng.normal(0.0, 0.1, size=(60, 3))
    matrix = np.eye(3) + rng.normal(0.0, 0.05, size=(3, 3))
    translation = rng.uniform(-5.0, 5.0, size=3)

    ha = rng.uniform(0.0, 255.0, size=1_000_000)
    hb = rng.uniform(0.0, 255.0, size=1_000_000)

    voxels = np.column_stack(
        [
            rng.integers(0, 96, size=100_000),
            rng.integers(0, 96, size=100_000),
            rng.integers(0, 48, size=100_000),
        ]
    ).astype(np.int64)

    Xc = rng.uniform(0.0, 255.0, size=(8000, 30))
    yc = rng.integers(0, 10, size=8000).astype(np.int64)
    idx = np.arange(8000, dtype=np.int64)

    Xr = rng.uniform(0.0, 255.0, size=(20_000, 30))
    resid = rng.normal(0.0, 1.0, size=20_000)

    return [
        (
            "convolve_lines",
            "4096 rows x 257, 19 taps",
            (lines, taps),
            "exact",
        ),
        (
            "trilinear_points",
            "96x96x48 volume, 200k points",
            (vol, 1.0, 1.0, 3.0, 0.0, 0.0, 0.0, pts),
            "exact",
        ),
        (
            "tps_map_points",
            "60 controls, 200k points",
            (ctrl, weights, matrix, translation, pts),
            "exact",
        ),
        (
            "joint_hist",
            "1M pairs, 64 bins",
            (ha, hb, 0.0, 255.0, 0.0, 255.0, 64),
            "exact",
        ),
        (
            "extract_patches",
            "96x96x48 volume, 100k voxels, 5x5x3",
            (vol, voxels, 5, 5, 3),
            "exact",
        ),
        (
            "build_cls_tree",
            "8000 x 30, 10 classes, to purity",
            (Xc, yc, idx, 10, 0, 30, 12345),
            "exact",
        ),
        (
            "build_reg_tree",
            "20k x 30, depth 3",
            (Xr, resid, np.arange(20_000, dtype=np.int64), 3),
            "predictions",
        ),
    ]


def scoring_workloads(seed: int) -> list[tuple[str, str, tuple, str]]:
    """Forest/boosting scorers need trained models; built via the library."""
    rng = np.random.default_rng(seed + 1)
    n, d = 10_000, 27
    X = rng.uniform(0.0, 255.0, size=(n, d))
    y = rng.integers(0, 10, size=n).astype(np.int64)
    spec = FeatureSpec(kind="patch", patch_dims=(3, 3, 3))
    ts = TrainingSet(features=X, labels=y, seed=seed, spec=spec)
    rf = train_random_forest(
        ts, RandomForestParams(n_trees=30, subsample_fraction=0.3, seed=seed)
    )
    bdt = train_boosted_trees(
        ts,
        BoostedTreesParams(
            n_iterations=300, shrinkage=0.05, subsample_fraction=0.3,
            max_depth=2, seed=seed,
        ),
    )
    Xq = rng.uniform(0.0, 255.0, size=(50_000, d))
    return [
        (
            "forest_hist_scores",
            "30 trees, 50k query rows",
            (Xq, rf.feature, rf.threshold, rf.left, rf.right, rf.roots,
             rf.leaf_hist, rf.n_classes),
            "exact",
        ),
        (
            "bdt_scores",
            "300 stumps, 50k query rows",
            (Xq, bdt.feature, bdt.threshold, bdt.left, bdt.right, bdt.roots,
             bdt.leaf_values, bdt.tree_class, bdt.shrinkage, bdt.init_scores),
            "exact",
        ),
    ]


def best_time(fn, args, repeats: int) -> tuple[float, object]:
    out = None
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5, help="timing repeats (best-of)")
    ap.add_argument("--seed", type=int, default=0, help="workload seed")
    args = ap.parse_args()

    cases = build_workloads(args.seed) + scoring_workloads(args.seed)
    have_numba = numba_impl is not None
    if not have_numba:
        print("numba backend unavailable; timing the numpy fallback only\n")

    header = f"{'kernel':<20} {'workload':<36} {'numpy':>10} {'numba':>10} {'speedup':>8} {'max|diff|':>10}"
    print(header)
    print("-" * len(header))
    for name, summary, call_args, diff_mode in cases:
        np_fn = getattr(numpy_impl, name)
        t_np, out_np = best_time(np_fn, call_args, args.repeats)
        if have_numba:
            nb_fn = getattr(numba_impl, name)
            nb_fn(*call_args)  # JIT warm-up, excluded from timing
            t_nb, out_nb = best_time(nb_fn, call_args, args.repeats)
            if diff_mode == "predictions":
                X = call_args[0]
                diff = max_abs_diff(
                    tree_predictions(X, out_np), tree_predictions(X, out_nb)
                )
            else:
                diff = max_abs_diff(out_np, out_nb)
            print(
                f"{name:<20} {summary:<36} {t_np * 1e3:>8.1f}ms {t_nb * 1e3:>8.1f}ms "
                f"{t_np / t_nb:>7.1f}x {diff:>10.2e}"
            )
        else:
            print(f"{name:<20} {summary:<36} {t_np * 1e3:>8.1f}ms {'-':>10} {'-':>8} {'-':>10}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
