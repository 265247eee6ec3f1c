"""Pure-numpy implementations of the hot kernels.

Every function here has a numba twin in `_numba` with the same signature and
semantics; `modsynth.kernels` picks one at import time. Tree construction uses
integer-exact impurity arithmetic so both paths grow identical trees.
"""
from __future__ import annotations

import numpy as np

from ._rng import derive_stream_seed, feature_permutation

SNAP_TOL = 1e-9  # continuous-index snap, absorbs FP error at voxel centers


def convolve_lines(lines: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Correlate each row of `lines` with `kernel`, clamp-to-edge boundaries."""
    radius = kernel.size // 2
    padded = np.pad(lines, ((0, 0), (radius, radius)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel.size, axis=1)
    return windows @ kernel


def trilinear_points(
    data: np.ndarray,
    sx: float, sy: float, sz: float,
    ox: float, oy: float, oz: float,
    pts: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Trilinear sample at physical points; returns (values, inbounds mask).

    Out-of-grid points get value 0. Continuous indices within SNAP_TOL of a
    lattice point are snapped so voxel centers reproduce stored values exactly.
    """
    nx, ny, nz = data.shape
    cx = (pts[:, 0] - ox) / sx
    cy = (pts[:, 1] - oy) / sy
    cz = (pts[:, 2] - oz) / sz
    for c in (cx, cy, cz):
        r = np.rint(c)
        near = np.abs(c - r) < SNAP_TOL
        c[near] = r[near]
    inb = (
        (cx >= 0.0) & (cx <= nx - 1)
        & (cy >= 0.0) & (cy <= ny - 1)
        & (cz >= 0.0) & (cz <= nz - 1)
    )
    cx = np.clip(cx, 0.0, nx - 1)
    cy = np.clip(cy, 0.0, ny - 1)
    cz = np.clip(cz, 0.0, nz - 1)
    ix0 = np.minimum(np.floor(cx).astype(np.int64), max(nx - 2, 0))
    iy0 = np.minimum(np.floor(cy).astype(np.int64), max(ny - 2, 0))
    iz0 = np.minimum(np.floor(cz).astype(np.int64), max(nz - 2, 0))
    fx = cx - ix0
    fy = cy - iy0
    fz = cz - iz0
    ix1 = np.minimum(ix0 + 1, nx - 1)
    iy1 = np.minimum(iy0 + 1, ny - 1)
    iz1 = np.minimum(iz0 + 1, nz - 1)
    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz
    vals = (
        data[ix0, iy0, iz0] * (gx * gy * gz)
        + data[ix1, iy0, iz0] * (fx * gy * gz)
        + data[ix0, iy1, iz0] * (gx * fy * gz)
        + data[ix1, iy1, iz0] * (fx * fy * gz)
        + data[ix0, iy0, iz1] * (gx * gy * fz)
        + data[ix1, iy0, iz1] * (fx * gy * fz)
        + data[ix0, iy1, iz1] * (gx * fy * fz)
        + data[ix1, iy1, iz1] * (fx * fy * fz)
    )
    vals[~inb] = 0.0
    return vals, inb


def tps_map_points(
    ctrl: np.ndarray,
    weights: np.ndarray,
    matrix: np.ndarray,
    translation: np.ndarray,
    pts: np.ndarray,
) -> np.ndarray:
    """Affine part + sum_i w_i * ||p - c_i|| for each point (U(r) = r kernel)."""
    out = pts @ matrix.T + translation
    chunk = 4096
    for lo in range(0, pts.shape[0], chunk):
        p = pts[lo:lo + chunk]
        diff = p[:, None, :] - ctrl[None, :, :]
        dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        out[lo:lo + chunk] += dist @ weights
    return out


def joint_hist(
    a: np.ndarray, b: np.ndarray,
    amin: float, amax: float,
    bmin: float, bmax: float,
    bins: int,
) -> np.ndarray:
    """Equal-width joint histogram; each max value lands in the last bin."""
    wa = amax - amin
    wb = bmax - bmin
    if wa > 0:
        ia = np.minimum((a - amin) / wa * bins, bins - 1).astype(np.int64)
        ia = np.maximum(ia, 0)
    else:
        ia = np.zeros(a.size, dtype=np.int64)
    if wb > 0:
        ib = np.minimum((b - bmin) / wb * bins, bins - 1).astype(np.int64)
        ib = np.maximum(ib, 0)
    else:
        ib = np.zeros(b.size, dtype=np.int64)
    flat = np.bincount(ia * bins + ib, minlength=bins * bins)
    return flat.reshape(bins, bins).astype(np.int64)


def extract_patches(
    data: np.ndarray, voxels: np.ndarray, px: int, py: int, pz: int
) -> np.ndarray:
    """Patch intensities around each voxel, x-fastest layout, 0 outside."""
    rx, ry, rz = px // 2, py // 2, pz // 2
    padded = np.pad(data, ((rx, rx), (ry, ry), (rz, rz)))
    n = voxels.shape[0]
    out = np.empty((n, px * py * pz))
    axr = np.arange(px).reshape(1, px, 1, 1)
    ayr = np.arange(py).reshape(1, 1, py, 1)
    azr = np.arange(pz).reshape(1, 1, 1, pz)
    chunk = 8192
    for lo in range(0, n, chunk):
        v = voxels[lo:lo + chunk]
        block = padded[
            v[:, 0].reshape(-1, 1, 1, 1) + axr,
            v[:, 1].reshape(-1, 1, 1, 1) + ayr,
            v[:, 2].reshape(-1, 1, 1, 1) + azr,
        ]
        # (n, px, py, pz) -> x-fastest flattening: ix + px*(iy + py*iz)
        out[lo:lo + chunk] = block.transpose(0, 3, 2, 1).reshape(v.shape[0], -1)
    return out


# ---------------------------------------------------------------------------
# decision trees
# ---------------------------------------------------------------------------

def _midpoint_threshold(lo: float, hi: float) -> float:
    thr = (lo + hi) / 2.0
    # rounding can push the midpoint onto hi, which would send hi left
    if thr >= hi:
        thr = lo
    return thr


def build_cls_tree(
    X: np.ndarray,
    y: np.ndarray,
    idx: np.ndarray,
    n_classes: int,
    max_depth: int,
    features_per_split: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Grow a Gini classification tree on X[idx] to purity (or max_depth).

    Returns (feature, threshold, left, right, leaf_hist): leaves have
    feature == -1 and `left` holding their row in leaf_hist (normalized
    class frequencies).
    """
    m = idx.shape[0]
    d = X.shape[1]
    cap = 2 * m + 1
    feature = np.full(cap, -2, dtype=np.int32)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)
    hist = np.zeros((m + 1, n_classes))
    samples = idx.astype(np.int64).copy()
    n_nodes = 1
    n_leaves = 0
    stack = [(0, m, 0, 0)]
    while stack:
        start, end, depth, node = stack.pop()
        seg = samples[start:end]
        ys = y[seg]
        m_node = end - start
        counts = np.bincount(ys, minlength=n_classes).astype(np.float64)
        if (
            m_node == 1
            or counts.max() == m_node
            or (max_depth > 0 and depth >= max_depth)
        ):
            feature[node] = -1
            left[node] = n_leaves
            hist[n_leaves] = counts / m_node
            n_leaves += 1
            continue
        perm = feature_permutation(d, derive_stream_seed(seed, node))
        best_imp = np.inf
        best_f = -1
        best_thr = 0.0
        examined = 0
        for f in perm:
            vals = X[seg, f]
            order = np.argsort(vals)
            sv = vals[order]
            if sv[0] == sv[-1]:
                continue
            examined += 1
            syl = ys[order]
            onehot = np.zeros((m_node, n_classes))
            onehot[np.arange(m_node), syl] = 1.0
            csum = np.cumsum(onehot, axis=0)
            bnd = np.nonzero(sv[1:] != sv[:-1])[0]
            cl = csum[bnd]
            n_l = (bnd + 1).astype(np.float64)
            n_r = m_node - n_l
            ssq_l = np.einsum("ij,ij->i", cl, cl)
            cr = counts[None, :] - cl
            ssq_r = np.einsum("ij,ij->i", cr, cr)
            imp = (n_l - ssq_l / n_l + n_r - ssq_r / n_r) / m_node
            j = int(np.argmin(imp))
            if imp[j] < best_imp:
                best_imp = imp[j]
                best_f = f
                best_thr = _midpoint_threshold(sv[bnd[j]], sv[bnd[j] + 1])
            if examined == features_per_split:
                break
        if best_f < 0:
            feature[node] = -1
            left[node] = n_leaves
            hist[n_leaves] = counts / m_node
            n_leaves += 1
            continue
        go_left = X[seg, best_f] <= best_thr
        samples[start:end] = np.concatenate([seg[go_left], seg[~go_left]])
        mid = start + int(go_left.sum())
        left_id = n_nodes
        right_id = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = left_id
        right[node] = right_id
        stack.append((mid, end, depth + 1, right_id))
        stack.append((start, mid, depth + 1, left_id))
    return (
        feature[:n_nodes],
        threshold[:n_nodes],
        left[:n_nodes],
        right[:n_nodes],
        hist[:n_leaves].copy(),
    )


def build_reg_tree(
    X: np.ndarray,
    r: np.ndarray,
    idx: np.ndarray,
    max_depth: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Variance-reduction regression tree; all features scanned in order.

    Leaves (feature == -1) hold their leaf_value row index in `left`.
    """
    m = idx.shape[0]
    d = X.shape[1]
    cap = 2 * m + 1
    feature = np.full(cap, -2, dtype=np.int32)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)
    values = np.zeros(m + 1)
    samples = idx.astype(np.int64).copy()
    n_nodes = 1
    n_leaves = 0
    stack = [(0, m, 0, 0)]
    while stack:
        start, end, depth, node = stack.pop()
        seg = samples[start:end]
        rs = r[seg]
        m_node = end - start
        mean = rs.sum() / m_node
        if m_node == 1 or depth >= max_depth or np.all(rs == rs[0]):
            feature[node] = -1
            left[node] = n_leaves
            values[n_leaves] = mean
            n_leaves += 1
            continue
        best_sse = np.inf
        best_f = -1
        best_thr = 0.0
        for f in range(d):
            vals = X[seg, f]
            order = np.argsort(vals)
            sv = vals[order]
            if sv[0] == sv[-1]:
                continue
            sr = rs[order]
            s1 = np.cumsum(sr)
            s2 = np.cumsum(sr * sr)
            bnd = np.nonzero(sv[1:] != sv[:-1])[0]
            n_l = (bnd + 1).astype(np.float64)
            n_r = m_node - n_l
            tot1 = s1[-1]
            tot2 = s2[-1]
            sse = (
                (s2[bnd] - s1[bnd] * s1[bnd] / n_l)
                + ((tot2 - s2[bnd]) - (tot1 - s1[bnd]) * (tot1 - s1[bnd]) / n_r)
            )
            j = int(np.argmin(sse))
            if sse[j] < best_sse:
                best_sse = sse[j]
                best_f = f
                best_thr = _midpoint_threshold(sv[bnd[j]], sv[bnd[j] + 1])
        if best_f < 0:
            feature[node] = -1
            left[node] = n_leaves
            values[n_leaves] = mean
            n_leaves += 1
            continue
        go_left = X[seg, best_f] <= best_thr
        samples[start:end] = np.concatenate([seg[go_left], seg[~go_left]])
        mid = start + int(go_left.sum())
        left_id = n_nodes
        right_id = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = left_id
        right[node] = right_id
        stack.append((mid, end, depth + 1, right_id))
        stack.append((start, mid, depth + 1, left_id))
    return (
        feature[:n_nodes],
        threshold[:n_nodes],
        left[:n_nodes],
        right[:n_nodes],
        values[:n_leaves].copy(),
    )


def _traverse_to_payload(
    Xq: np.ndarray,
    feature: np.ndarray,
    threshold: np.ndarray,
    left: np.ndarray,
    right: np.ndarray,
    root: int,
) -> np.ndarray:
    node = np.full(Xq.shape[0], root, dtype=np.int64)
    while True:
        f = feature[node]
        act = np.nonzero(f >= 0)[0]
        if act.size == 0:
            break
        nn = node[act]
        go_left = Xq[act, f[act]] <= threshold[nn]
        node[act] = np.where(go_left, left[nn], right[nn])
    return left[node].astype(np.int64)


def forest_hist_scores(
    Xq: np.ndarray,
    feature: np.ndarray,
    threshold: np.ndarray,
    left: np.ndarray,
    right: np.ndarray,
    roots: np.ndarray,
    hist: np.ndarray,
    n_classes: int,
) -> np.ndarray:
    """Sum per-leaf class histograms over all trees (fixed tree order)."""
    scores = np.zeros((Xq.shape[0], n_classes))
    for t in range(roots.shape[0]):
        rows = _traverse_to_payload(Xq, feature, threshold, left, right, int(roots[t]))
        scores += hist[rows]
    return scores


def bdt_scores(
    Xq: np.ndarray,
    feature: np.ndarray,
    threshold: np.ndarray,
    left: np.ndarray,
    right: np.ndarray,
    roots: np.ndarray,
    values: np.ndarray,
    tree_class: np.ndarray,
    shrinkage: float,
    init_scores: np.ndarray,
) -> np.ndarray:
    """Per-class boosted regression scores (init + shrinkage * sum of trees)."""
    n = Xq.shape[0]
    scores = np.tile(init_scores, (n, 1))
    for t in range(roots.shape[0]):
        rows = _traverse_to_payload(Xq, feature, threshold, left, right, int(roots[t]))
        scores[:, tree_class[t]] += shrinkage * values[rows]
    return scores
