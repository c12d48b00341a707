"""Compiled inner loops of the rasterizer.

Pair lists are pixel-major: ``pair_gauss[start[p]:start[p + 1]]`` holds the
Gaussians touching pixel ``p`` in front-to-back order. Parallel kernels only
write disjoint per-pixel or per-pair slots; every reduction into per-Gaussian
buffers is a serial loop in fixed order, so results are independent of the
thread count.
"""

import importlib.util
import math
import os

import numba
import numpy as np
from numba import njit, prange

if "NUMBA_THREADING_LAYER" not in os.environ:
    # the bundled TBB is too old; prefer OpenMP and fall back to workqueue
    numba.config.THREADING_LAYER = (
        "omp" if importlib.util.find_spec("numba.np.ufunc.omppool") else "workqueue"
    )


def set_threads(n: int) -> int:
    """Set the worker count (capped at what numba was started with)."""
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n


@njit(cache=True)
def _quad(a, b, c, dx, dy):
    return a * dx * dx + 2.0 * b * dx * dy + c * dy * dy


@njit(cache=True)
def build_pairs(order, mean_u, mean_v, con_a, con_b, con_c, radius, width, height, max_q):
    n_pix = width * height
    counts = np.zeros(n_pix + 1, np.int64)
    for g in order:
        x0 = max(0, int(math.ceil(mean_u[g] - radius[g])))
        x1 = min(width - 1, int(math.floor(mean_u[g] + radius[g])))
        y0 = max(0, int(math.ceil(mean_v[g] - radius[g])))
        y1 = min(height - 1, int(math.floor(mean_v[g] + radius[g])))
        for py in range(y0, y1 + 1):
            dy = py - mean_v[g]
            for px in range(x0, x1 + 1):
                dx = px - mean_u[g]
                if _quad(con_a[g], con_b[g], con_c[g], dx, dy) <= max_q:
                    counts[py * width + px + 1] += 1
    start = np.cumsum(counts)
    fill = start[:-1].copy()
    pair_gauss = np.empty(start[-1], np.int64)
    for g in order:
        x0 = max(0, int(math.ceil(mean_u[g] - radius[g])))
        x1 = min(width - 1, int(math.floor(mean_u[g] + radius[g])))
        y0 = max(0, int(math.ceil(mean_v[g] - radius[g])))
        y1 = min(height - 1, int(math.floor(mean_v[g] + radius[g])))
        for py in range(y0, y1 + 1):
            dy = py - mean_v[g]
            for px in range(x0, x1 + 1):
                dx = px - mean_u[g]
                if _quad(con_a[g], con_b[g], con_c[g], dx, dy) <= max_q:
                    p = py * width + px
                    pair_gauss[fill[p]] = g
                    fill[p] += 1
    return start, pair_gauss


@njit(parallel=True, cache=True)
def composite_forward(start, pair_gauss, mean_u, mean_v, con_a, con_b, con_c, opacity, feats, width, t_min):
    n_pix = start.shape[0] - 1
    nf = feats.shape[1]
    out = np.zeros((n_pix, nf))
    n_used = np.zeros(n_pix, np.int64)
    trans = np.ones(n_pix)
    for p in prange(n_pix):
        py = p // width
        px = p - py * width
        t = 1.0
        k = start[p]
        end = start[p + 1]
        while k < end:
            if t < t_min:
                break
            g = pair_gauss[k]
            dx = px - mean_u[g]
            dy = py - mean_v[g]
            alpha = opacity[g] * math.exp(-0.5 * _quad(con_a[g], con_b[g], con_c[g], dx, dy))
            w = alpha * t
            for c in range(nf):
                out[p, c] += w * feats[g, c]
            t = t * (1.0 - alpha)
            k += 1
        n_used[p] = k - start[p]
        trans[p] = t
    return out, n_used, trans


@njit(parallel=True, cache=True)
def composite_backward(start, pair_gauss, n_used, mean_u, mean_v, con_a, con_b, con_c, opacity, feats,
                       grad_feats, grad_alpha, width):
    """Per-pair d(loss)/d(alpha) and blending weight.

    Uses the back-to-front suffix ``S_k = e_{k+1} a_{k+1} + (1 - a_{k+1}) S_{k+1}``
    so no division by ``1 - alpha`` is needed.
    """
    n_pix = start.shape[0] - 1
    nf = feats.shape[1]
    n_pairs = pair_gauss.shape[0]
    d_alpha = np.zeros(n_pairs)
    weight = np.zeros(n_pairs)
    t_buf = np.zeros(n_pairs)
    a_buf = np.zeros(n_pairs)
    for p in prange(n_pix):
        py = p // width
        px = p - py * width
        s0 = start[p]
        s1 = s0 + n_used[p]
        t = 1.0
        for k in range(s0, s1):
            g = pair_gauss[k]
            dx = px - mean_u[g]
            dy = py - mean_v[g]
            alpha = opacity[g] * math.exp(-0.5 * _quad(con_a[g], con_b[g], con_c[g], dx, dy))
            t_buf[k] = t
            a_buf[k] = alpha
            t = t * (1.0 - alpha)
        suffix = 0.0
        for k in range(s1 - 1, s0 - 1, -1):
            g = pair_gauss[k]
            e = grad_alpha[p]
            for c in range(nf):
                e += grad_feats[p, c] * feats[g, c]
            d_alpha[k] = t_buf[k] * (e - suffix)
            weight[k] = a_buf[k] * t_buf[k]
            suffix = e * a_buf[k] + (1.0 - a_buf[k]) * suffix
    return d_alpha, weight


@njit(cache=True)
def reduce_pairs(start, pair_gauss, n_used, mean_u, mean_v, con_a, con_b, con_c, opacity,
                 d_alpha, weight, grad_feats, width, n_gauss):
    n_pix = start.shape[0] - 1
    nf = grad_feats.shape[1]
    d_feat = np.zeros((n_gauss, nf))
    # columns: u, v, conic a, conic b, conic c, opacity
    d_geo = np.zeros((n_gauss, 6))
    for p in range(n_pix):
        py = p // width
        px = p - py * width
        for k in range(start[p], start[p] + n_used[p]):
            g = pair_gauss[k]
            w = weight[k]
            for c in range(nf):
                d_feat[g, c] += w * grad_feats[p, c]
            dx = px - mean_u[g]
            dy = py - mean_v[g]
            gval = math.exp(-0.5 * _quad(con_a[g], con_b[g], con_c[g], dx, dy))
            da = d_alpha[k]
            d_geo[g, 5] += gval * da
            dq = -0.5 * gval * opacity[g] * da
            d_geo[g, 0] -= dq * (2.0 * con_a[g] * dx + 2.0 * con_b[g] * dy)
            d_geo[g, 1] -= dq * (2.0 * con_b[g] * dx + 2.0 * con_c[g] * dy)
            d_geo[g, 2] += dq * dx * dx
            d_geo[g, 3] += dq * 2.0 * dx * dy
            d_geo[g, 4] += dq * dy * dy
    return d_feat, d_geo
