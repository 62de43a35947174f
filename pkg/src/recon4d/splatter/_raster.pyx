# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled front-to-back alpha compositing of projected 2D Gaussians.

Gaussians arrive already sorted front to back. Each one is binned into the
16x16 pixel tiles overlapped by its square footprint ``[m - r, m + r]``, and a
pixel only evaluates Gaussians whose footprint contains its center. All
arithmetic is double precision regardless of the input dtype.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, floor

cnp.import_array()

cdef int TILE = 16
cdef double T_STOP = 1e-4
cdef double ALPHA_MAX = 0.99
cdef double ALPHA_MIN = 1.0 / 255.0


cdef inline bint _covers(double mx, double my, double r, double px, double py) nogil:
    return px >= mx - r and px <= mx + r and py >= my - r and py <= my + r


def _bin(double[:, ::1] means, double[::1] radius, int width, int height):
    """Tile lists as CSR arrays (offsets, indices), preserving input order."""
    cdef int n = means.shape[0]
    cdef int tw = (width + TILE - 1) // TILE
    cdef int th = (height + TILE - 1) // TILE
    cdef cnp.int64_t[::1] counts = np.zeros(tw * th + 1, dtype=np.int64)
    cdef cnp.int32_t[:, ::1] rect = np.zeros((n, 4), dtype=np.int32)
    cdef int i, tx, ty, x0, x1, y0, y1
    cdef double r
    for i in range(n):
        r = radius[i]
        x0 = <int>floor((means[i, 0] - r) / TILE)
        x1 = <int>floor((means[i, 0] + r) / TILE)
        y0 = <int>floor((means[i, 1] - r) / TILE)
        y1 = <int>floor((means[i, 1] + r) / TILE)
        if x1 < 0 or y1 < 0 or x0 >= tw or y0 >= th or r <= 0:
            rect[i, 0] = 1
            rect[i, 1] = 0
            continue
        x0 = max(x0, 0)
        y0 = max(y0, 0)
        x1 = min(x1, tw - 1)
        y1 = min(y1, th - 1)
        rect[i, 0] = x0
        rect[i, 1] = x1
        rect[i, 2] = y0
        rect[i, 3] = y1
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                counts[ty * tw + tx + 1] += 1
    for i in range(tw * th):
        counts[i + 1] += counts[i]
    cdef cnp.int64_t[::1] fill = np.array(counts[:tw * th], dtype=np.int64)
    cdef cnp.int32_t[::1] idx = np.empty(counts[tw * th], dtype=np.int32)
    for i in range(n):
        if rect[i, 0] > rect[i, 1]:
            continue
        for ty in range(rect[i, 2], rect[i, 3] + 1):
            for tx in range(rect[i, 0], rect[i, 1] + 1):
                idx[fill[ty * tw + tx]] = i
                fill[ty * tw + tx] += 1
    return np.asarray(counts), np.asarray(idx)


def forward(double[:, ::1] means, double[:, ::1] conic, double[::1] opacity,
            double[:, ::1] color, double[::1] depth, double[::1] radius,
            int width, int height):
    """Composite; returns (rgb, depth, alpha, last) where ``last`` is the
    exclusive end position of contributing entries in the pixel's tile list."""
    offsets_np, idx_np = _bin(means, radius, width, height)
    cdef cnp.int64_t[::1] offsets = offsets_np
    cdef cnp.int32_t[::1] idx = idx_np
    rgb_np = np.zeros((height, width, 3))
    dep_np = np.zeros((height, width))
    alp_np = np.zeros((height, width))
    last_np = np.zeros((height, width), dtype=np.int64)
    cdef double[:, :, ::1] rgb = rgb_np
    cdef double[:, ::1] dep = dep_np
    cdef double[:, ::1] alp = alp_np
    cdef cnp.int64_t[:, ::1] last = last_np
    cdef int tw = (width + TILE - 1) // TILE
    cdef int u, v, g
    cdef cnp.int64_t k, k_end
    cdef double px, py, dx, dy, power, a, T, Tn, cr, cg, cb, cd
    with nogil:
        for v in range(height):
            for u in range(width):
                px = u + 0.5
                py = v + 0.5
                T = 1.0
                cr = cg = cb = cd = 0.0
                k = offsets[(v // TILE) * tw + u // TILE]
                k_end = offsets[(v // TILE) * tw + u // TILE + 1]
                last[v, u] = k
                while k < k_end:
                    g = idx[k]
                    k = k + 1
                    if not _covers(means[g, 0], means[g, 1], radius[g], px, py):
                        continue
                    dx = px - means[g, 0]
                    dy = py - means[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy)
                    if power > 0.0:
                        continue
                    a = opacity[g] * exp(power)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    if a < ALPHA_MIN:
                        continue
                    Tn = T * (1.0 - a)
                    if Tn < T_STOP:
                        break
                    cr = cr + color[g, 0] * a * T
                    cg = cg + color[g, 1] * a * T
                    cb = cb + color[g, 2] * a * T
                    cd = cd + depth[g] * a * T
                    T = Tn
                    last[v, u] = k
                rgb[v, u, 0] = cr
                rgb[v, u, 1] = cg
                rgb[v, u, 2] = cb
                dep[v, u] = cd
                alp[v, u] = 1.0 - T
    return rgb_np, dep_np, alp_np, last_np, offsets_np, idx_np


def backward(double[:, ::1] means, double[:, ::1] conic, double[::1] opacity,
             double[:, ::1] color, double[::1] depth, double[::1] radius,
             int width, int height,
             double[:, ::1] alpha_out, cnp.int64_t[:, ::1] last,
             cnp.int64_t[::1] offsets, cnp.int32_t[::1] idx,
             double[:, :, ::1] g_rgb, double[:, ::1] g_dep, double[:, ::1] g_alp):
    """Gradients w.r.t. (means, conic, opacity, color, depth)."""
    cdef int n = means.shape[0]
    gm_np = np.zeros((n, 2))
    gc_np = np.zeros((n, 3))
    go_np = np.zeros(n)
    gcol_np = np.zeros((n, 3))
    gd_np = np.zeros(n)
    cdef double[:, ::1] gm = gm_np
    cdef double[:, ::1] gc = gc_np
    cdef double[::1] go = go_np
    cdef double[:, ::1] gcol = gcol_np
    cdef double[::1] gd = gd_np
    cdef int tw = (width + TILE - 1) // TILE
    cdef int u, v, g
    cdef cnp.int64_t k, k_start
    cdef double px, py, dx, dy, power, e, a, T, Tfin, sr, sg, sb, sd
    cdef double gr, ggr, gb, gdd, ga_fin, dl_da, dl_dp
    with nogil:
        for v in range(height):
            for u in range(width):
                px = u + 0.5
                py = v + 0.5
                gr = g_rgb[v, u, 0]
                ggr = g_rgb[v, u, 1]
                gb = g_rgb[v, u, 2]
                gdd = g_dep[v, u]
                ga_fin = g_alp[v, u]
                Tfin = 1.0 - alpha_out[v, u]
                T = Tfin
                # accumulated colour/depth of everything behind the current entry
                sr = sg = sb = sd = 0.0
                k_start = offsets[(v // TILE) * tw + u // TILE]
                k = last[v, u]
                while k > k_start:
                    k = k - 1
                    g = idx[k]
                    if not _covers(means[g, 0], means[g, 1], radius[g], px, py):
                        continue
                    dx = px - means[g, 0]
                    dy = py - means[g, 1]
                    power = -0.5 * (conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy)
                    if power > 0.0:
                        continue
                    e = exp(power)
                    a = opacity[g] * e
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    if a < ALPHA_MIN:
                        continue
                    T = T / (1.0 - a)
                    # T is now the transmittance in front of g
                    gcol[g, 0] += gr * a * T
                    gcol[g, 1] += ggr * a * T
                    gcol[g, 2] += gb * a * T
                    gd[g] += gdd * a * T
                    dl_da = T * (gr * color[g, 0] + ggr * color[g, 1] + gb * color[g, 2] + gdd * depth[g])
                    dl_da = dl_da - (gr * sr + ggr * sg + gb * sb + gdd * sd) / (1.0 - a)
                    dl_da = dl_da + ga_fin * Tfin / (1.0 - a)
                    sr = sr + color[g, 0] * a * T
                    sg = sg + color[g, 1] * a * T
                    sb = sb + color[g, 2] * a * T
                    sd = sd + depth[g] * a * T
                    if opacity[g] * e > ALPHA_MAX:
                        continue
                    go[g] += dl_da * e
                    dl_dp = dl_da * a
                    gc[g, 0] += -0.5 * dx * dx * dl_dp
                    gc[g, 1] += -dx * dy * dl_dp
                    gc[g, 2] += -0.5 * dy * dy * dl_dp
                    gm[g, 0] += (conic[g, 0] * dx + conic[g, 1] * dy) * dl_dp
                    gm[g, 1] += (conic[g, 1] * dx + conic[g, 2] * dy) * dl_dp
    return gm_np, gc_np, go_np, gcol_np, gd_np
