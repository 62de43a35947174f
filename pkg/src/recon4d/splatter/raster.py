"""Differentiable compositing op with a compiled kernel and a numpy fallback.

The backend is chosen at import: the compiled ``_raster`` extension when it
was built, otherwise :mod:`._raster_py`. Set ``RECON4D_RASTER=numpy`` to force
the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from ..numerics import Tensor
from . import _raster_py

try:
    from . import _raster as _raster_c
except ImportError:  # extension not built
    _raster_c = None

BACKENDS = {"numpy": _raster_py}
if _raster_c is not None:
    BACKENDS["cython"] = _raster_c

_requested = os.environ.get("RECON4D_RASTER", "").strip().lower()
BACKEND = _requested if _requested in BACKENDS else ("cython" if _raster_c is not None else "numpy")


def set_backend(name: str) -> None:
    global BACKEND
    if name not in BACKENDS:
        raise ValueError(f"unknown raster backend {name!r}; available: {sorted(BACKENDS)}")
    BACKEND = name


def _f64(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def composite(means, conic, opacity, color, depth, radius, width: int, height: int, backend: str | None = None):
    """Plain-array compositing; returns (rgb, depth, alpha)."""
    mod = BACKENDS[backend or BACKEND]
    rgb, dep, alp, *_ = mod.forward(_f64(means).reshape(-1, 2), _f64(conic).reshape(-1, 3), _f64(opacity).reshape(-1),
                                    _f64(color).reshape(-1, 3), _f64(depth).reshape(-1), _f64(radius).reshape(-1),
                                    int(width), int(height))
    return rgb, dep, alp


def rasterize(means: Tensor, conic: Tensor, opacity: Tensor, color: Tensor, depth: Tensor,
              radius: np.ndarray, width: int, height: int, backend: str | None = None) -> Tensor:
    """Composite sorted 2D Gaussians; returns an (H, W, 5) tensor [r, g, b, depth, alpha].

    ``radius`` bounds each footprint and carries no gradient. Inputs must
    already be ordered front to back.
    """
    mod = BACKENDS[backend or BACKEND]
    dtype = means.dtype
    args = (_f64(means.data).reshape(-1, 2), _f64(conic.data).reshape(-1, 3), _f64(opacity.data).reshape(-1),
            _f64(color.data).reshape(-1, 3), _f64(depth.data).reshape(-1), _f64(radius).reshape(-1))
    rgb, dep, alp, last, offsets, idx = mod.forward(*args, int(width), int(height))
    out = np.concatenate([rgb, dep[..., None], alp[..., None]], axis=-1).astype(dtype)

    def bw(g):
        g = _f64(g)
        grads = mod.backward(*args, int(width), int(height), alp, last, offsets, idx,
                             np.ascontiguousarray(g[..., :3]), np.ascontiguousarray(g[..., 3]),
                             np.ascontiguousarray(g[..., 4]))
        return tuple(x.astype(dtype).reshape(t.shape) for x, t in zip(grads, (means, conic, opacity, color, depth)))

    return Tensor._make(out, (means, conic, opacity, color, depth), bw)


__all__ = ["BACKEND", "BACKENDS", "composite", "rasterize", "set_backend"]
