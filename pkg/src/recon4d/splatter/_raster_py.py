"""Pure-numpy compositing with the same contract as the compiled kernel.

Pixels are processed in chunks against every Gaussian at once, so memory is
bounded by ``chunk_pairs`` pixel-Gaussian pairs. Slower than the compiled
path, but it needs nothing beyond numpy.
"""
from __future__ import annotations

import numpy as np

T_STOP = 1e-4
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0


def _pixel_chunks(width: int, height: int, n: int, chunk_pairs: int):
    total = width * height
    step = max(1, chunk_pairs // max(n, 1))
    for lo in range(0, total, step):
        pix = np.arange(lo, min(total, lo + step))
        yield pix, pix % width + 0.5, pix // width + 0.5


def _alphas(means, conic, opacity, radius, px, py):
    dx = px[:, None] - means[None, :, 0]
    dy = py[:, None] - means[None, :, 1]
    r = radius[None, :]
    covers = (np.abs(dx) <= r) & (np.abs(dy) <= r) & (r > 0)
    power = -0.5 * (conic[:, 0] * dx * dx + 2.0 * conic[:, 1] * dx * dy + conic[:, 2] * dy * dy)
    e = np.exp(np.minimum(power, 0.0))
    raw = opacity[None, :] * e
    a = np.minimum(raw, ALPHA_MAX)
    valid = covers & (power <= 0.0) & (a >= ALPHA_MIN)
    a = np.where(valid, a, 0.0)
    t_incl = np.cumprod(1.0 - a, axis=1)
    keep = valid & (t_incl >= T_STOP)
    a = np.where(keep, a, 0.0)
    t_incl = np.cumprod(1.0 - a, axis=1)
    t_excl = np.empty_like(t_incl)
    t_excl[:, 0] = 1.0
    t_excl[:, 1:] = t_incl[:, :-1]
    return dx, dy, e, a, keep, keep & (raw <= ALPHA_MAX), t_excl


def forward(means, conic, opacity, color, depth, radius, width, height, chunk_pairs=2_000_000):
    n = len(means)
    rgb = np.zeros((height * width, 3))
    dep = np.zeros(height * width)
    alp = np.zeros(height * width)
    if n:
        for pix, px, py in _pixel_chunks(width, height, n, chunk_pairs):
            _, _, _, a, _, _, t_excl = _alphas(means, conic, opacity, radius, px, py)
            w = a * t_excl
            rgb[pix] = w @ color
            dep[pix] = w @ depth
            alp[pix] = 1.0 - t_excl[:, -1] * (1.0 - a[:, -1])
    return rgb.reshape(height, width, 3), dep.reshape(height, width), alp.reshape(height, width), None, None, None


def backward(means, conic, opacity, color, depth, radius, width, height,
             alpha_out, last, offsets, idx, g_rgb, g_dep, g_alp, chunk_pairs=2_000_000):
    n = len(means)
    gm = np.zeros((n, 2))
    gc = np.zeros((n, 3))
    go = np.zeros(n)
    gcol = np.zeros((n, 3))
    gd = np.zeros(n)
    if n == 0:
        return gm, gc, go, gcol, gd
    g_rgb = g_rgb.reshape(-1, 3)
    g_dep = g_dep.reshape(-1)
    g_alp = g_alp.reshape(-1)
    t_fin_all = 1.0 - alpha_out.reshape(-1)
    for pix, px, py in _pixel_chunks(width, height, n, chunk_pairs):
        dx, dy, e, a, keep, free, t_excl = _alphas(means, conic, opacity, radius, px, py)
        w = a * t_excl
        gcol += w.T @ g_rgb[pix]
        gd += w.T @ g_dep[pix]
        # per-pair scalar "value" seen by the loss: g . color + g_depth * depth
        val = g_rgb[pix] @ color.T + g_dep[pix][:, None] * depth[None, :]
        contrib = val * w
        behind = np.cumsum(contrib[:, ::-1], axis=1)[:, ::-1] - contrib
        inv = 1.0 / (1.0 - a)
        dl_da = t_excl * val - behind * inv + (g_alp[pix] * t_fin_all[pix])[:, None] * inv
        dl_da = np.where(free, dl_da, 0.0)
        go += (dl_da * e).sum(axis=0)
        dl_dp = dl_da * a
        gc[:, 0] += (-0.5 * dx * dx * dl_dp).sum(axis=0)
        gc[:, 1] += (-dx * dy * dl_dp).sum(axis=0)
        gc[:, 2] += (-0.5 * dy * dy * dl_dp).sum(axis=0)
        gm[:, 0] += ((conic[:, 0] * dx + conic[:, 1] * dy) * dl_dp).sum(axis=0)
        gm[:, 1] += ((conic[:, 1] * dx + conic[:, 2] * dy) * dl_dp).sum(axis=0)
    return gm, gc, go, gcol, gd
