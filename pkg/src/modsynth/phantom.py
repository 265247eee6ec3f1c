"""Synthetic multimodal phantoms with exact ground truth.

A phantom pair is a smooth blob template, a warped/remapped/noisy subject on
an anisotropic grid, the true warp as a TPS, exact landmark correspondences,
and the true decile-class volume in subject space. The warp is a small
random affine plus a clipped nonlinear residual, so landmark displacements
never exceed warp_magnitude_um.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from ._ioutil import atomic_write_text
from .errors import ParameterError
from .kernels import derive_stream_seed
from .landmarks import Landmark, LandmarkSet
from .synth import assign_classes, compute_bins_from_values
from .volume import Grid, Volume, rescale_intensity
from .xform import TpsTransform, resample_with_inbounds, tps_fit


@dataclass(frozen=True)
class PhantomParams:
    seed: int = 0
    template_dims: tuple[int, int, int] = (64, 64, 32)
    template_spacing_um: tuple[float, float, float] = (1.0, 1.0, 1.0)
    subject_spacing_um: tuple[float, float, float] = (0.86, 0.86, 5.0)
    n_blobs: int = 25
    warp_magnitude_um: float = 0.0
    gamma: float = 1.0
    gain: float = 1.0
    offset: float = 0.0
    noise_sigma: float = 0.0
    n_landmarks: int = 30

    def __post_init__(self):
        if any(d < 2 for d in self.template_dims):
            raise ParameterError("template dims must be >= 2")
        if any(s <= 0 for s in self.template_spacing_um + self.subject_spacing_um):
            raise ParameterError("spacings must be positive")
        if self.gamma <= 0:
            raise ParameterError(f"gamma must be > 0, got {self.gamma}")
        if self.n_blobs < 1 or self.n_landmarks < 4:
            raise ParameterError("need n_blobs >= 1 and n_landmarks >= 4")
        if self.warp_magnitude_um < 0 or self.noise_sigma < 0:
            raise ParameterError("warp magnitude and noise sigma must be >= 0")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "template_dims": list(self.template_dims),
            "template_spacing_um": list(self.template_spacing_um),
            "subject_spacing_um": list(self.subject_spacing_um),
            "n_blobs": self.n_blobs,
            "warp_magnitude_um": self.warp_magnitude_um,
            "gamma": self.gamma,
            "gain": self.gain,
            "offset": self.offset,
            "noise_sigma": self.noise_sigma,
            "n_landmarks": self.n_landmarks,
        }


@dataclass(eq=False)
class PhantomPair:
    template: Volume
    subject: Volume
    true_transform: TpsTransform
    landmarks: LandmarkSet
    true_label_volume: Volume


def apply_intensity_map(v: Volume, g: float, a: float, b: float) -> Volume:
    """Monotone gamma map m(x) = a*(x/255)^g*255 + b (exact a*x+b at g=1)."""
    if g <= 0:
        raise ParameterError(f"gamma must be > 0, got {g}")
    if g == 1.0:
        return v.with_data(a * v.data + b)
    return v.with_data(a * np.power(v.data / 255.0, g) * 255.0 + b)


def make_template(p: PhantomParams) -> Volume:
    """Sum of random anisotropic Gaussian blobs, rescaled to [0, 255]."""
    rng = np.random.default_rng(derive_stream_seed(p.seed, 0))
    grid = Grid(p.template_dims, p.template_spacing_um)
    extent = np.array(grid.extent_um)
    pts = grid.world_points()
    acc = np.zeros(pts.shape[0])
    for _ in range(p.n_blobs):
        center = rng.uniform(0.12, 0.88, size=3) * extent
        sigma = rng.uniform(2.0, 6.5, size=3)
        amp = rng.uniform(0.4, 1.5)
        z = (pts - center) / sigma
        acc += amp * np.exp(-0.5 * np.einsum("ij,ij->i", z, z))
    vol = Volume.from_flat(acc, grid)
    return rescale_intensity(vol, 0.0, 255.0)


def _subject_grid(p: PhantomParams, template_grid: Grid) -> Grid:
    dims = []
    for axis in range(3):
        extent = template_grid.extent_um[axis]
        dims.append(max(int(math.floor(extent / p.subject_spacing_um[axis])) + 1, 2))
    return Grid(tuple(dims), p.subject_spacing_um)


def _random_warp(
    p: PhantomParams, subject_grid: Grid
) -> tuple[LandmarkSet, TpsTransform]:
    """Landmark pairs subject (moving) -> template (fixed) and their TPS.

    The displacement at each landmark is a global random affine worth at most
    70% of warp_magnitude_um over the subject domain plus a random residual
    of at most 30%, so no landmark moves farther than warp_magnitude_um.
    """
    rng_a = np.random.default_rng(derive_stream_seed(p.seed, 1))
    rng_r = np.random.default_rng(derive_stream_seed(p.seed, 2))
    extent = np.array(subject_grid.extent_um)
    mag = p.warp_magnitude_um

    E = rng_a.uniform(-1.0, 1.0, size=(3, 3))
    t = rng_a.uniform(-1.0, 1.0, size=3)
    corners = np.array([
        [cx, cy, cz]
        for cx in (0.0, extent[0])
        for cy in (0.0, extent[1])
        for cz in (0.0, extent[2])
    ])
    worst = max(float(np.linalg.norm(c @ E.T + t)) for c in corners)
    scale = 0.0 if worst == 0.0 else (0.7 * mag) / worst
    E *= scale
    t *= scale

    # landmark sites: jittered low-discrepancy spread over the interior
    n = p.n_landmarks
    sites = rng_a.uniform(0.08, 0.92, size=(n, 3)) * extent

    dirs = rng_r.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = rng_r.uniform(0.0, 0.3 * mag, size=n)
    residual = dirs * radii[:, None]

    fixed = sites + sites @ E.T + t + residual
    landmarks = LandmarkSet([
        Landmark(f"Pt-{i}", True, tuple(sites[i]), tuple(fixed[i]))
        for i in range(n)
    ])
    return landmarks, tps_fit(landmarks)


def generate_phantom(
    p: PhantomParams, template: Volume | None = None
) -> PhantomPair:
    """Deterministic phantom pair; pass a shared template to build a suite."""
    if template is None:
        template = make_template(p)
    subject_grid = _subject_grid(p, template.grid)
    landmarks, warp = _random_warp(p, subject_grid)

    warped, inbounds = resample_with_inbounds(template, warp, subject_grid)
    mapped = apply_intensity_map(warped, p.gamma, p.gain, p.offset)
    if p.noise_sigma > 0:
        rng_n = np.random.default_rng(derive_stream_seed(p.seed, 3))
        noisy = mapped.data + rng_n.normal(0.0, p.noise_sigma, size=mapped.data.shape)
        subject = Volume(noisy, subject_grid)
    else:
        subject = mapped

    label_mask = inbounds & (warped.data > 1.0)
    bins = compute_bins_from_values(warped.data[label_mask])
    labels = assign_classes(warped.data, bins).astype(np.float64)
    labels[~label_mask] = -1.0
    true_labels = Volume(labels, subject_grid)

    return PhantomPair(
        template=template,
        subject=subject,
        true_transform=warp,
        landmarks=landmarks,
        true_label_volume=true_labels,
    )


def generate_suite(
    base: PhantomParams, gammas: list[float]
) -> list[tuple[PhantomParams, PhantomPair]]:
    """One shared template, one pair per gamma with independent warp/noise."""
    template = make_template(base)
    out = []
    for i, g in enumerate(gammas):
        params = PhantomParams(
            seed=int(derive_stream_seed(base.seed, 100 + i) % (1 << 62)),
            template_dims=base.template_dims,
            template_spacing_um=base.template_spacing_um,
            subject_spacing_um=base.subject_spacing_um,
            n_blobs=base.n_blobs,
            warp_magnitude_um=base.warp_magnitude_um,
            gamma=g,
            gain=base.gain,
            offset=base.offset,
            noise_sigma=base.noise_sigma,
            n_landmarks=base.n_landmarks,
        )
        out.append((params, generate_phantom(params, template=template)))
    return out


def save_params(p: PhantomParams, path: str) -> None:
    atomic_write_text(path, json.dumps(p.to_dict(), sort_keys=True, indent=2))
