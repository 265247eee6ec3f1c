"""Shared fixtures and independent oracle helpers."""
from __future__ import annotations

import math

import numpy as np
import pytest

from modsynth.volume import Grid, Volume


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def random_volume(rng, dims=(8, 8, 4), spacing=(1.0, 1.0, 1.0),
                  origin=(0.0, 0.0, 0.0), lo=0.0, hi=255.0) -> Volume:
    data = rng.uniform(lo, hi, size=dims)
    return Volume(data, Grid(dims, spacing, origin))


def dense_gaussian_oracle(data: np.ndarray, sigma_vox, mode="clamp") -> np.ndarray:
    """Direct (non-separable path) clamped-boundary Gaussian convolution.

    Built independently of the package: one explicit 1D pass per axis using
    gather-with-clipped-indices, kernel radius ceil(3 sigma), renormalized.
    """
    out = np.asarray(data, dtype=np.float64).copy()
    for axis in range(3):
        s = sigma_vox[axis]
        if s <= 0:
            continue
        radius = math.ceil(3.0 * s)
        x = np.arange(-radius, radius + 1, dtype=np.float64)
        k = np.exp(-(x * x) / (2.0 * s * s))
        k /= k.sum()
        n = out.shape[axis]
        acc = np.zeros_like(out)
        for off, w in zip(range(-radius, radius + 1), k):
            idx = np.clip(np.arange(n) + off, 0, n - 1)
            acc += w * np.take(out, idx, axis=axis)
        out = acc
    return out


def trilinear_oracle(vol: Volume, point) -> float:
    """Straightforward 8-corner interpolation; outside the grid -> 0."""
    p = np.asarray(point, dtype=np.float64)
    c = (p - np.asarray(vol.origin)) / np.asarray(vol.spacing)
    nx, ny, nz = vol.dims
    if np.any(c < 0) or c[0] > nx - 1 or c[1] > ny - 1 or c[2] > nz - 1:
        return 0.0
    i = np.minimum(np.floor(c).astype(int), np.asarray([nx, ny, nz]) - 2)
    i = np.maximum(i, 0)
    f = c - i
    total = 0.0
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = ((f[0] if dx else 1 - f[0])
                     * (f[1] if dy else 1 - f[1])
                     * (f[2] if dz else 1 - f[2]))
                total += w * vol.data[i[0] + dx, i[1] + dy, i[2] + dz]
    return float(total)


def entropy_bits(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64).ravel()
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def ncc_oracle(f: np.ndarray, m: np.ndarray) -> float:
    """Normalized cross-correlation by the covariance formula, explicit sums."""
    f = np.asarray(f, dtype=np.float64).ravel()
    m = np.asarray(m, dtype=np.float64).ravel()
    n = f.size
    ef = f.sum() / n
    em = m.sum() / n
    cov = float(((f - ef) * (m - em)).sum()) / n
    var_f = float(((f - ef) ** 2).sum()) / n
    var_m = float(((m - em) ** 2).sum()) / n
    return cov / math.sqrt(var_f * var_m)


def mi_oracle_bits(f: np.ndarray, m: np.ndarray, bins: int) -> float:
    """Brute-force mutual information in bits.

    Scalar loops end to end: equal-width bins over [min, max] per image
    (max value in the last bin, constant image all in bin 0), then the
    double sum over the joint table.
    """
    f = np.asarray(f, dtype=np.float64).ravel()
    m = np.asarray(m, dtype=np.float64).ravel()
    fmin, fmax = float(f.min()), float(f.max())
    mmin, mmax = float(m.min()), float(m.max())

    def bin_of(v, lo, hi):
        if hi <= lo:
            return 0
        i = int((v - lo) / (hi - lo) * bins)
        return min(max(i, 0), bins - 1)

    joint = [[0] * bins for _ in range(bins)]
    for fv, mv in zip(f.tolist(), m.tolist()):
        joint[bin_of(fv, fmin, fmax)][bin_of(mv, mmin, mmax)] += 1
    n = f.size
    pf = [sum(row) / n for row in joint]
    pm = [sum(joint[i][j] for i in range(bins)) / n for j in range(bins)]
    total = 0.0
    for i in range(bins):
        for j in range(bins):
            pij = joint[i][j] / n
            if pij > 0:
                total += pij * (math.log2(pij) - math.log2(pf[i]) - math.log2(pm[j]))
    return total


def gaussian_bump(dims, spacing, center_um, sigma_um, amplitude=100.0,
                  origin=(0.0, 0.0, 0.0)) -> Volume:
    """Analytic isotropic Gaussian blob sampled on a grid (smooth everywhere)."""
    grid = Grid(tuple(dims), tuple(spacing), tuple(origin))
    axes = [origin[a] + np.arange(dims[a]) * spacing[a] for a in range(3)]
    xs, ys, zs = np.meshgrid(*axes, indexing="ij")
    r2 = ((xs - center_um[0]) ** 2 + (ys - center_um[1]) ** 2
          + (zs - center_um[2]) ** 2)
    data = amplitude * np.exp(-r2 / (2.0 * sigma_um ** 2))
    return Volume(data, grid)
