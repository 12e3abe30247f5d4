"""Numeric hot loops with a compiled and a NumPy implementation.

The raster and distance kernels evaluate the same floating-point expressions
in both implementations and agree bit for bit.  The mixture integral sums in a
different order and agrees to rounding.  ``tests/test_kernels.py`` checks both.  The public functions dispatch according to :data:`topo_nav._accel.USE_NUMBA`.
"""
from __future__ import annotations

import math

import numpy as np

from ._accel import USE_NUMBA, compile_loop

# --------------------------------------------------------------------------
# raster strokes


def _render_loop(segs, poses, size, res, half_stroke):
    n = poses.shape[0]
    out = np.zeros((n, size, size), dtype=np.uint8)
    half = size / 2.0
    r = half_stroke / res
    r2 = r * r
    for k in range(n):
        px = poses[k, 0]
        py = poses[k, 1]
        c = math.cos(poses[k, 2])
        s = math.sin(poses[k, 2])
        for m in range(segs.shape[0]):
            dx0 = segs[m, 0] - px
            dy0 = segs[m, 1] - py
            dx1 = segs[m, 2] - px
            dy1 = segs[m, 3] - py
            u0 = half + (dx0 * c + dy0 * s) / res
            v0 = half - (dy0 * c - dx0 * s) / res
            u1 = half + (dx1 * c + dy1 * s) / res
            v1 = half - (dy1 * c - dx1 * s) / res
            jlo = max(0, int(math.floor(min(u0, u1) - r)))
            jhi = min(size - 1, int(math.ceil(max(u0, u1) + r)))
            ilo = max(0, int(math.floor(min(v0, v1) - r)))
            ihi = min(size - 1, int(math.ceil(max(v0, v1) + r)))
            if jlo > jhi or ilo > ihi:
                continue
            bx = u1 - u0
            by = v1 - v0
            l2 = bx * bx + by * by
            for i in range(ilo, ihi + 1):
                for j in range(jlo, jhi + 1):
                    if out[k, i, j]:
                        continue
                    ax = j - u0
                    ay = i - v0
                    t = 0.0
                    if l2 > 0.0:
                        t = (ax * bx + ay * by) / l2
                        t = min(max(t, 0.0), 1.0)
                    qx = ax - t * bx
                    qy = ay - t * by
                    if qx * qx + qy * qy <= r2:
                        out[k, i, j] = 1
    return out


def _render_numpy(segs, poses, size, res, half_stroke):
    n = poses.shape[0]
    out = np.zeros((n, size, size), dtype=np.uint8)
    if segs.shape[0] == 0:
        return out
    half = size / 2.0
    r = half_stroke / res
    r2 = r * r
    jj, ii = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64))
    jj = jj.reshape(-1, 1)
    ii = ii.reshape(-1, 1)
    for k in range(n):
        px, py, a = poses[k]
        c = math.cos(a)
        s = math.sin(a)
        dx0 = segs[:, 0] - px
        dy0 = segs[:, 1] - py
        dx1 = segs[:, 2] - px
        dy1 = segs[:, 3] - py
        u0 = half + (dx0 * c + dy0 * s) / res
        v0 = half - (dy0 * c - dx0 * s) / res
        u1 = half + (dx1 * c + dy1 * s) / res
        v1 = half - (dy1 * c - dx1 * s) / res
        keep = ((np.maximum(u0, u1) + r >= 0) & (np.minimum(u0, u1) - r <= size - 1)
                & (np.maximum(v0, v1) + r >= 0) & (np.minimum(v0, v1) - r <= size - 1))
        if not keep.any():
            continue
        u0, v0, u1, v1 = u0[keep], v0[keep], u1[keep], v1[keep]
        bx = u1 - u0
        by = v1 - v0
        l2 = bx * bx + by * by
        ax = jj - u0
        ay = ii - v0
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(l2 > 0.0, (ax * bx + ay * by) / l2, 0.0)
        t = np.minimum(np.maximum(t, 0.0), 1.0)
        qx = ax - t * bx
        qy = ay - t * by
        hit = (qx * qx + qy * qy <= r2).any(axis=1)
        out[k] = hit.reshape(size, size)
    return out


_render_compiled = compile_loop(_render_loop)


def render_segments(segs: np.ndarray, poses: np.ndarray, size: int, res: float, half_stroke: float) -> np.ndarray:
    """Binary stroke rasters for each pose, ``(N, size, size)`` uint8.

    A pixel is set when its centre lies within ``half_stroke`` metres of any
    segment.  Pixel ``(i, j)`` has its centre at continuous image coordinate
    ``(u, v) = (j, i)``; the pose sits at ``(size / 2, size / 2)`` with its
    heading pointing to row 0.
    """
    segs = np.ascontiguousarray(segs, dtype=np.float64).reshape(-1, 4)
    poses = np.ascontiguousarray(poses, dtype=np.float64).reshape(-1, 3)
    if USE_NUMBA:
        return _render_compiled(segs, poses, int(size), float(res), float(half_stroke))
    return _render_numpy(segs, poses, int(size), float(res), float(half_stroke))


# --------------------------------------------------------------------------
# point to segment distances


def _point_segment_loop(points, segs):
    n = points.shape[0]
    m = segs.shape[0]
    dist = np.empty((n, m))
    frac = np.empty((n, m))
    for a in range(n):
        for b in range(m):
            bx = segs[b, 2] - segs[b, 0]
            by = segs[b, 3] - segs[b, 1]
            ax = points[a, 0] - segs[b, 0]
            ay = points[a, 1] - segs[b, 1]
            l2 = bx * bx + by * by
            t = 0.0
            if l2 > 0.0:
                t = (ax * bx + ay * by) / l2
                t = min(max(t, 0.0), 1.0)
            qx = ax - t * bx
            qy = ay - t * by
            dist[a, b] = math.sqrt(qx * qx + qy * qy)
            frac[a, b] = t
    return dist, frac


def _point_segment_numpy(points, segs):
    bx = segs[:, 2] - segs[:, 0]
    by = segs[:, 3] - segs[:, 1]
    ax = points[:, 0:1] - segs[:, 0]
    ay = points[:, 1:2] - segs[:, 1]
    l2 = bx * bx + by * by
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(l2 > 0.0, (ax * bx + ay * by) / l2, 0.0)
    t = np.minimum(np.maximum(t, 0.0), 1.0)
    qx = ax - t * bx
    qy = ay - t * by
    return np.sqrt(qx * qx + qy * qy), t


_point_segment_compiled = compile_loop(_point_segment_loop)


def point_segment_distance(points: np.ndarray, segs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Distances ``(N, M)`` from points to segments and the clamped projection fraction."""
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 2)
    segs = np.ascontiguousarray(segs, dtype=np.float64).reshape(-1, 4)
    if USE_NUMBA:
        return _point_segment_compiled(points, segs)
    return _point_segment_numpy(points, segs)


# --------------------------------------------------------------------------
# mixture densities on a fixed grid

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _mixture_grid_loop(phi, mu, sigma, grid, weights):
    n, k = phi.shape
    out = np.zeros(n)
    for a in range(n):
        acc = 0.0
        for g in range(grid.shape[0]):
            dens = 0.0
            for c in range(k):
                z = (grid[g] - mu[a, c]) / sigma[a, c]
                dens += phi[a, c] * _INV_SQRT_2PI / sigma[a, c] * math.exp(-0.5 * z * z)
            acc += weights[g] * dens
        out[a] = acc
    return out


def _mixture_grid_numpy(phi, mu, sigma, grid, weights):
    z = (grid[None, :, None] - mu[:, None, :]) / sigma[:, None, :]
    comp = phi[:, None, :] * _INV_SQRT_2PI / sigma[:, None, :] * np.exp(-0.5 * z * z)
    dens = comp.sum(axis=2)
    return dens @ weights


_mixture_grid_compiled = compile_loop(_mixture_grid_loop)


def mixture_grid_integral(phi, mu, sigma, grid, weights) -> np.ndarray:
    """``sum_g weights[g] * GMM_n(grid[g])`` for each of ``N`` mixtures."""
    phi = np.ascontiguousarray(phi, dtype=np.float64)
    mu = np.ascontiguousarray(mu, dtype=np.float64)
    sigma = np.ascontiguousarray(sigma, dtype=np.float64)
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if USE_NUMBA:
        return _mixture_grid_compiled(phi, mu, sigma, grid, weights)
    return _mixture_grid_numpy(phi, mu, sigma, grid, weights)
