"""Decile-class labeling and voxel-wise contrast synthesis.

Training labels come from decile-binning the template intensities after
pulling them onto the subject grid through the landmark TPS; synthesis runs
the trained ensemble at every subject voxel and writes the median intensity
of the predicted bin.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ._ioutil import atomic_write_text
from .ensemble import TreeEnsemble, predict_classes
from .errors import CorruptFileError, DegenerateBinsError, DimensionMismatchError
from .features import FeatureExtractor, FeatureSpec, foreground_mask
from .landmarks import LandmarkSet
from .volume import Volume, nearest_rank
from .xform import resample_with_inbounds, tps_fit


@dataclass(frozen=True)
class BinSpec:
    """Decile bins: 11 edges at percentiles 0,10,...,100 plus bin medians."""

    edges: tuple[float, ...]
    representatives: tuple[float, ...]

    def __post_init__(self):
        edges = tuple(float(e) for e in self.edges)
        reps = tuple(float(r) for r in self.representatives)
        if len(edges) != 11 or len(reps) != 10:
            raise DegenerateBinsError(
                f"need 11 edges and 10 representatives, got {len(edges)}/{len(reps)}"
            )
        if any(b < a for a, b in zip(edges, edges[1:])):
            raise DegenerateBinsError(f"edges must be non-decreasing: {edges}")
        for k in range(10):
            if not (edges[k] <= reps[k] <= edges[k + 1]):
                raise DegenerateBinsError(
                    f"representative {reps[k]} outside bin [{edges[k]}, {edges[k+1]}]"
                )
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "representatives", reps)

    @property
    def n_bins(self) -> int:
        return 10


def compute_bins_from_values(values: np.ndarray) -> BinSpec:
    values = np.asarray(values, dtype=np.float64).ravel()
    if np.unique(values).size < 10:
        raise DegenerateBinsError(
            f"need >= 10 distinct masked intensities, got {np.unique(values).size}"
        )
    edges = tuple(nearest_rank(values, 10.0 * k) for k in range(11))
    reps = []
    for k in range(10):
        lo, hi = edges[k], edges[k + 1]
        if k < 9:
            members = values[(values >= lo) & (values < hi)]
        else:
            members = values[(values >= lo) & (values <= hi)]
        if members.size == 0:
            reps.append(lo)  # tied edges can empty a bin; pin to its lower edge
        else:
            reps.append(nearest_rank(members, 50.0))
    return BinSpec(edges, tuple(reps))


def compute_bins(template_in_subject: Volume, mask: Volume) -> BinSpec:
    if mask.grid.dims != template_in_subject.grid.dims:
        raise DimensionMismatchError("mask grid differs from volume grid")
    return compute_bins_from_values(
        template_in_subject.data[mask.data > 0.5]
    )


def assign_classes(values: np.ndarray, bins: BinSpec) -> np.ndarray:
    """Largest k with edges[k] <= value, clamped to [0, 9]."""
    edges = np.asarray(bins.edges)
    idx = np.searchsorted(edges, np.asarray(values, dtype=np.float64), side="right") - 1
    return np.clip(idx, 0, 9).astype(np.int64)


def assign_class(intensity: float, bins: BinSpec) -> int:
    return int(assign_classes(np.array([intensity]), bins)[0])


def make_training_pair(
    subject: Volume,
    template: Volume,
    lms: LandmarkSet,
    foreground_threshold: float = 1.0,
    regularization: float = 0.0,
) -> tuple[Volume, Volume, Volume]:
    """Pull template intensities onto the subject grid via the landmark TPS.

    Landmarks must pair subject (moving) with template (fixed) positions, so
    the fitted map carries each subject voxel center into template space.
    Returns (subject, template-in-subject-space, mask); the mask is subject
    foreground intersected with voxels that landed inside the template.
    """
    t = tps_fit(lms, regularization)
    pulled, inbounds = resample_with_inbounds(template, t, subject.grid)
    mask = foreground_mask(subject, foreground_threshold) & inbounds
    return subject, pulled, Volume(mask.astype(np.float64), subject.grid)


def make_label_volume(
    template_in_subject: Volume, bins: BinSpec, mask: Volume
) -> Volume:
    """Per-voxel class inside the mask; -1 marks voxels outside it."""
    if mask.grid.dims != template_in_subject.grid.dims:
        raise DimensionMismatchError("mask grid differs from volume grid")
    classes = assign_classes(template_in_subject.data, bins).astype(np.float64)
    classes[mask.data <= 0.5] = -1.0
    return Volume(classes, template_in_subject.grid)


def synthesize(
    subject: Volume,
    model: TreeEnsemble,
    spec: FeatureSpec,
    bins: BinSpec,
    chunk: int = 65536,
) -> Volume:
    """Predict a class at every subject voxel, emit its bin median."""
    if model.feature_dim != spec.length:
        raise DimensionMismatchError(
            f"model feature dim {model.feature_dim} != spec length {spec.length}"
        )
    nx, ny, nz = subject.grid.dims
    n = subject.grid.n_voxels
    extractor = FeatureExtractor(subject, spec)
    reps = np.asarray(bins.representatives)
    out = np.empty(n)
    flat = np.arange(n, dtype=np.int64)
    for lo in range(0, n, chunk):
        sel = flat[lo:lo + chunk]
        voxels = np.empty((sel.size, 3), dtype=np.int64)
        voxels[:, 0] = sel % nx
        voxels[:, 1] = (sel // nx) % ny
        voxels[:, 2] = sel // (nx * ny)
        feats = extractor.features_at(voxels)
        out[lo:lo + sel.size] = reps[predict_classes(model, feats)]
    return Volume.from_flat(out, subject.grid)


def save_bins(bins: BinSpec, path: str) -> None:
    atomic_write_text(
        path,
        json.dumps(
            {
                "edges": [repr(e) for e in bins.edges],
                "representatives": [repr(r) for r in bins.representatives],
            },
            sort_keys=True,
            separators=(",", ":"),
        ),
    )


def load_bins(path: str) -> BinSpec:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            d = json.load(fh)
        return BinSpec(
            tuple(float(e) for e in d["edges"]),
            tuple(float(r) for r in d["representatives"]),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise CorruptFileError(f"{path}: bad bin file ({e})") from e
