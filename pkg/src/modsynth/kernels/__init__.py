"""Kernel backend selection.

The numba backend is the default. Set MODSYNTH_NO_NUMBA=1 (or "true"/"yes")
to force the pure-numpy fallback; the fallback is also used automatically
when numba is not importable.
"""
from __future__ import annotations

import os

from ._rng import derive_stream_seed, feature_permutation, splitmix64
from . import _numpy as numpy_impl

_FLAG = os.environ.get("MODSYNTH_NO_NUMBA", "").strip().lower()
if _FLAG in ("1", "true", "yes"):
    _impl = numpy_impl
    numba_impl = None
    BACKEND = "numpy"
else:
    try:
        from . import _numba as numba_impl
        _impl = numba_impl
        BACKEND = "numba"
    except ImportError:
        numba_impl = None
        _impl = numpy_impl
        BACKEND = "numpy"

convolve_lines = _impl.convolve_lines
trilinear_points = _impl.trilinear_points
tps_map_points = _impl.tps_map_points
joint_hist = _impl.joint_hist
extract_patches = _impl.extract_patches
build_cls_tree = _impl.build_cls_tree
build_reg_tree = _impl.build_reg_tree
forest_hist_scores = _impl.forest_hist_scores
bdt_scores = _impl.bdt_scores

__all__ = [
    "BACKEND",
    "bdt_scores",
    "build_cls_tree",
    "build_reg_tree",
    "convolve_lines",
    "derive_stream_seed",
    "extract_patches",
    "feature_permutation",
    "forest_hist_scores",
    "joint_hist",
    "numba_impl",
    "numpy_impl",
    "splitmix64",
    "tps_map_points",
    "trilinear_points",
]
