"""Numba-compiled implementations of the hot kernels.

Mirrors `_numpy` function-for-function. Tree construction keeps impurity
arithmetic integer-exact and draws feature subsets from the same splitmix64
stream, so both backends grow structurally identical classification trees.
"""
from __future__ import annotations

import numpy as np
from numba import njit, prange

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

SNAP_TOL = 1e-9


@njit(cache=True, inline="always")
def _splitmix64(state):
    state = state + _GOLDEN
    z = state
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    z = z ^ (z >> np.uint64(31))
    return state, z


@njit(cache=True, inline="always")
def _derive_seed(base, index):
    return base ^ (np.uint64(index + 1) * _GOLDEN)


@njit(cache=True)
def _feature_permutation(n_features, seed):
    perm = np.arange(n_features, dtype=np.int64)
    state = seed
    for i in range(n_features - 1, 0, -1):
        state, z = _splitmix64(state)
        j = np.int64(z % np.uint64(i + 1))
        tmp = perm[i]
        perm[i] = perm[j]
        perm[j] = tmp
    return perm


@njit(cache=True, parallel=True)
def convolve_lines(lines, kernel):
    n_lines, n = lines.shape
    k = kernel.size
    radius = k // 2
    out = np.empty((n_lines, n))
    for i in prange(n_lines):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                jj = j + t - radius
                if jj < 0:
                    jj = 0
                elif jj >= n:
                    jj = n - 1
                acc += lines[i, jj] * kernel[t]
            out[i, j] = acc
    return out


@njit(cache=True, parallel=True)
def trilinear_points(data, sx, sy, sz, ox, oy, oz, pts):
    nx, ny, nz = data.shape
    n = pts.shape[0]
    vals = np.empty(n)
    inb = np.empty(n, dtype=np.bool_)
    for i in prange(n):
        cx = (pts[i, 0] - ox) / sx
        cy = (pts[i, 1] - oy) / sy
        cz = (pts[i, 2] - oz) / sz
        rx = np.rint(cx)
        if abs(cx - rx) < SNAP_TOL:
            cx = rx
        ry = np.rint(cy)
        if abs(cy - ry) < SNAP_TOL:
            cy = ry
        rz = np.rint(cz)
        if abs(cz - rz) < SNAP_TOL:
            cz = rz
        inside = (
            cx >= 0.0 and cx <= nx - 1
            and cy >= 0.0 and cy <= ny - 1
            and cz >= 0.0 and cz <= nz - 1
        )
        inb[i] = inside
        if not inside:
            vals[i] = 0.0
            continue
        ix0 = int(np.floor(cx))
        iy0 = int(np.floor(cy))
        iz0 = int(np.floor(cz))
        if ix0 > nx - 2:
            ix0 = max(nx - 2, 0)
        if iy0 > ny - 2:
            iy0 = max(ny - 2, 0)
        if iz0 > nz - 2:
            iz0 = max(nz - 2, 0)
        fx = cx - ix0
        fy = cy - iy0
        fz = cz - iz0
        ix1 = min(ix0 + 1, nx - 1)
        iy1 = min(iy0 + 1, ny - 1)
        iz1 = min(iz0 + 1, nz - 1)
        gx = 1.0 - fx
        gy = 1.0 - fy
        gz = 1.0 - fz
        vals[i] = (
            data[ix0, iy0, iz0] * (gx * gy * gz)
            + data[ix1, iy0, iz0] * (fx * gy * gz)
            + data[ix0, iy1, iz0] * (gx * fy * gz)
            + data[ix1, iy1, iz0] * (fx * fy * gz)
            + data[ix0, iy0, iz1] * (gx * gy * fz)
            + data[ix1, iy0, iz1] * (fx * gy * fz)
            + data[ix0, iy1, iz1] * (gx * fy * fz)
            + data[ix1, iy1, iz1] * (fx * fy * fz)
        )
    return vals, inb


@njit(cache=True, parallel=True)
def tps_map_points(ctrl, weights, matrix, translation, pts):
    n = pts.shape[0]
    n_ctrl = ctrl.shape[0]
    out = np.empty((n, 3))
    for i in prange(n):
        x = pts[i, 0]
        y = pts[i, 1]
        z = pts[i, 2]
        ax = matrix[0, 0] * x + matrix[0, 1] * y + matrix[0, 2] * z + translation[0]
        ay = matrix[1, 0] * x + matrix[1, 1] * y + matrix[1, 2] * z + translation[1]
        az = matrix[2, 0] * x + matrix[2, 1] * y + matrix[2, 2] * z + translation[2]
        for c in range(n_ctrl):
            dx = x - ctrl[c, 0]
            dy = y - ctrl[c, 1]
            dz = z - ctrl[c, 2]
            dist = np.sqrt(dx * dx + dy * dy + dz * dz)
            ax += dist * weights[c, 0]
            ay += dist * weights[c, 1]
            az += dist * weights[c, 2]
        out[i, 0] = ax
        out[i, 1] = ay
        out[i, 2] = az
    return out


@njit(cache=True)
def joint_hist(a, b, amin, amax, bmin, bmax, bins):
    hist = np.zeros((bins, bins), dtype=np.int64)
    wa = amax - amin
    wb = bmax - bmin
    for i in range(a.size):
        if wa > 0:
            ia = int((a[i] - amin) / wa * bins)
            if ia < 0:
                ia = 0
            elif ia > bins - 1:
                ia = bins - 1
        else:
            ia = 0
        if wb > 0:
            ib = int((b[i] - bmin) / wb * bins)
            if ib < 0:
                ib = 0
            elif ib > bins - 1:
                ib = bins - 1
        else:
            ib = 0
        hist[ia, ib] += 1
    return hist


@njit(cache=True, parallel=True)
def extract_patches(data, voxels, px, py, pz):
    nx, ny, nz = data.shape
    rx, ry, rz = px // 2, py // 2, pz // 2
    n = voxels.shape[0]
    out = np.zeros((n, px * py * pz))
    for i in prange(n):
        vx = voxels[i, 0]
        vy = voxels[i, 1]
        vz = voxels[i, 2]
        for iz in range(pz):
            gz = vz + iz - rz
            if gz < 0 or gz >= nz:
                continue
            for iy in range(py):
                gy = vy + iy - ry
                if gy < 0 or gy >= ny:
                    continue
                base = px * (iy + py * iz)
                for ix in range(px):
                    gx = vx + ix - rx
                    if gx < 0 or gx >= nx:
                        continue
                    out[i, base + ix] = data[gx, gy, gz]
    return out


@njit(cache=True, inline="always")
def _midpoint_threshold(lo, hi):
    thr = (lo + hi) / 2.0
    if thr >= hi:
        thr = lo
    return thr


@njit(cache=True)
def build_cls_tree(X, y, idx, n_classes, max_depth, features_per_split, seed):
    m = idx.shape[0]
    d = X.shape[1]
    cap = 2 * m + 1
    feature = np.full(cap, -2, dtype=np.int32)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)
    hist = np.zeros((m + 1, n_classes))
    samples = idx.astype(np.int64)
    useed = np.uint64(seed)
    counts = np.zeros(n_classes, dtype=np.int64)
    counts_l = np.zeros(n_classes, dtype=np.int64)
    stack_start = np.empty(cap, dtype=np.int64)
    stack_end = np.empty(cap, dtype=np.int64)
    stack_depth = np.empty(cap, dtype=np.int64)
    stack_node = np.empty(cap, dtype=np.int64)
    stack_start[0] = 0
    stack_end[0] = m
    stack_depth[0] = 0
    stack_node[0] = 0
    top = 1
    n_nodes = 1
    n_leaves = 0
    order_buf = np.empty(m, dtype=np.int64)
    scratch = np.empty(m, dtype=np.int64)
    while top > 0:
        top -= 1
        start = stack_start[top]
        end = stack_end[top]
        depth = stack_depth[top]
        node = stack_node[top]
        m_node = end - start
        counts[:] = 0
        for p in range(start, end):
            counts[y[samples[p]]] += 1
        max_count = 0
        for k in range(n_classes):
            if counts[k] > max_count:
                max_count = counts[k]
        if m_node == 1 or max_count == m_node or (max_depth > 0 and depth >= max_depth):
            feature[node] = -1
            left[node] = n_leaves
            for k in range(n_classes):
                hist[n_leaves, k] = counts[k] / m_node
            n_leaves += 1
            continue
        perm = _feature_permutation(d, _derive_seed(useed, node))
        best_imp = np.inf
        best_f = -1
        best_thr = 0.0
        examined = 0
        for fi in range(d):
            f = perm[fi]
            vals = np.empty(m_node)
            for p in range(m_node):
                vals[p] = X[samples[start + p], f]
            order = np.argsort(vals)
            lo_v = vals[order[0]]
            hi_v = vals[order[m_node - 1]]
            if lo_v == hi_v:
                continue
            examined += 1
            counts_l[:] = 0
            for p in range(m_node - 1):
                s = samples[start + order[p]]
                counts_l[y[s]] += 1
                v_here = vals[order[p]]
                v_next = vals[order[p + 1]]
                if v_here == v_next:
                    continue
                n_l = float(p + 1)
                n_r = float(m_node - p - 1)
                ssq_l = 0.0
                ssq_r = 0.0
                for k in range(n_classes):
                    cl = float(counts_l[k])
                    cr = float(counts[k] - counts_l[k])
                    ssq_l += cl * cl
                    ssq_r += cr * cr
                imp = (n_l - ssq_l / n_l + n_r - ssq_r / n_r) / m_node
                if imp < best_imp:
                    best_imp = imp
                    best_f = f
                    best_thr = _midpoint_threshold(v_here, v_next)
            if examined == features_per_split:
                break
        if best_f < 0:
            feature[node] = -1
            left[node] = n_leaves
            for k in range(n_classes):
                hist[n_leaves, k] = counts[k] / m_node
            n_leaves += 1
            continue
        n_go = 0
        n_stay = 0
        for p in range(start, end):
            s = samples[p]
            if X[s, best_f] <= best_thr:
                order_buf[n_go] = s
                n_go += 1
            else:
                scratch[n_stay] = s
                n_stay += 1
        for p in range(n_go):
            samples[start + p] = order_buf[p]
        for p in range(n_stay):
            samples[start + n_go + p] = scratch[p]
        mid = start + n_go
        left_id = n_nodes
        right_id = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = left_id
        right[node] = right_id
        stack_start[top] = mid
        stack_end[top] = end
        stack_depth[top] = depth + 1
        stack_node[top] = right_id
        top += 1
        stack_start[top] = start
        stack_end[top] = mid
        stack_depth[top] = depth + 1
        stack_node[top] = left_id
        top += 1
    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        hist[:n_leaves].copy(),
    )


@njit(cache=True)
def build_reg_tree(X, r, idx, max_depth):
    m = idx.shape[0]
    d = X.shape[1]
    cap = 2 * m + 1
    feature = np.full(cap, -2, dtype=np.int32)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int32)
    right = np.full(cap, -1, dtype=np.int32)
    values = np.zeros(m + 1)
    samples = idx.astype(np.int64)
    stack_start = np.empty(cap, dtype=np.int64)
    stack_end = np.empty(cap, dtype=np.int64)
    stack_depth = np.empty(cap, dtype=np.int64)
    stack_node = np.empty(cap, dtype=np.int64)
    stack_start[0] = 0
    stack_end[0] = m
    stack_depth[0] = 0
    stack_node[0] = 0
    top = 1
    n_nodes = 1
    n_leaves = 0
    order_buf = np.empty(m, dtype=np.int64)
    scratch = np.empty(m, dtype=np.int64)
    while top > 0:
        top -= 1
        start = stack_start[top]
        end = stack_end[top]
        depth = stack_depth[top]
        node = stack_node[top]
        m_node = end - start
        total = 0.0
        for p in range(start, end):
            total += r[samples[p]]
        mean = total / m_node
        constant = True
        r0 = r[samples[start]]
        for p in range(start + 1, end):
            if r[samples[p]] != r0:
                constant = False
                break
        if m_node == 1 or depth >= max_depth or constant:
            feature[node] = -1
            left[node] = n_leaves
            values[n_leaves] = mean
            n_leaves += 1
            continue
        best_sse = np.inf
        best_f = -1
        best_thr = 0.0
        for f in range(d):
            vals = np.empty(m_node)
            for p in range(m_node):
                vals[p] = X[samples[start + p], f]
            order = np.argsort(vals)
            lo_v = vals[order[0]]
            hi_v = vals[order[m_node - 1]]
            if lo_v == hi_v:
                continue
            tot1 = 0.0
            tot2 = 0.0
            for p in range(m_node):
                rv = r[samples[start + order[p]]]
                tot1 += rv
                tot2 += rv * rv
            s1 = 0.0
            s2 = 0.0
            for p in range(m_node - 1):
                rv = r[samples[start + order[p]]]
                s1 += rv
                s2 += rv * rv
                v_here = vals[order[p]]
                v_next = vals[order[p + 1]]
                if v_here == v_next:
                    continue
                n_l = float(p + 1)
                n_r = float(m_node - p - 1)
                sse = (s2 - s1 * s1 / n_l) + ((tot2 - s2) - (tot1 - s1) * (tot1 - s1) / n_r)
                if sse < best_sse:
                    best_sse = sse
                    best_f = f
                    best_thr = _midpoint_threshold(v_here, v_next)
        if best_f < 0:
            feature[node] = -1
            left[node] = n_leaves
            values[n_leaves] = mean
            n_leaves += 1
            continue
        n_go = 0
        n_stay = 0
        for p in range(start, end):
            s = samples[p]
            if X[s, best_f] <= best_thr:
                order_buf[n_go] = s
                n_go += 1
            else:
                scratch[n_stay] = s
                n_stay += 1
        for p in range(n_go):
            samples[start + p] = order_buf[p]
        for p in range(n_stay):
            samples[start + n_go + p] = scratch[p]
        mid = start + n_go
        left_id = n_nodes
        right_id = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = left_id
        right[node] = right_id
        stack_start[top] = mid
        stack_end[top] = end
        stack_depth[top] = depth + 1
        stack_node[top] = right_id
        top += 1
        stack_start[top] = start
        stack_end[top] = mid
        stack_depth[top] = depth + 1
        stack_node[top] = left_id
        top += 1
    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        values[:n_leaves].copy(),
    )


@njit(cache=True, inline="always")
def _leaf_row(Xq, feature, threshold, left, right, root, i):
    node = root
    while feature[node] >= 0:
        if Xq[i, feature[node]] <= threshold[node]:
            node = left[node]
        else:
            node = right[node]
    return left[node]


@njit(cache=True, parallel=True)
def forest_hist_scores(Xq, feature, threshold, left, right, roots, hist, n_classes):
    n = Xq.shape[0]
    n_trees = roots.shape[0]
    scores = np.zeros((n, n_classes))
    for i in prange(n):
        for t in range(n_trees):
            row = _leaf_row(Xq, feature, threshold, left, right, roots[t], i)
            for k in range(n_classes):
                scores[i, k] += hist[row, k]
    return scores


@njit(cache=True, parallel=True)
def bdt_scores(
    Xq, feature, threshold, left, right, roots, values, tree_class, shrinkage, init_scores
):
    n = Xq.shape[0]
    n_classes = init_scores.shape[0]
    n_trees = roots.shape[0]
    scores = np.empty((n, n_classes))
    for i in prange(n):
        for k in range(n_classes):
            scores[i, k] = init_scores[k]
        for t in range(n_trees):
            row = _leaf_row(Xq, feature, threshold, left, right, roots[t], i)
            scores[i, tree_class[t]] += shrinkage * values[row]
    return scores
