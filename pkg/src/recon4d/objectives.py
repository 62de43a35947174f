"""Training losses and image/depth metrics."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import numerics as nx
from .dynamics import assignment_loss, lifespan_loss
from .errors import ContractError
from .numerics import Tensor

PSNR_CAP = 99.0
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PERCEPTUAL_CHANNELS = (16, 32, 64)
PERCEPTUAL_SEED = 0


@dataclass
class LossWeights:
    rgb: float = 1.0
    perceptual: float = 0.05
    depth: float = 1.0
    lifespan: float = 0.0001
    sky_depth: float = 0.01
    sky_opacity: float = 0.1
    obj: float = 1.0
    perceptual_start_iter: int = 5000

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ContractError(f"loss weight {f.name} must be >= 0")

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


TERMS = ("rgb", "perceptual", "depth", "lifespan", "sky_depth", "sky_opacity", "obj")


@dataclass
class LossTerm:
    raw: Tensor
    weight: float

    @property
    def weighted(self) -> Tensor:
        return self.raw * self.weight


@dataclass
class LossResult:
    total: Tensor
    terms: dict = field(default_factory=dict)

    def breakdown(self) -> dict:
        """term -> (raw value, weight, weighted value) as floats."""
        return {k: (float(v.raw.item()), v.weight, float(v.raw.item()) * v.weight) for k, v in self.terms.items()}


# -- perceptual proxy ---------------------------------------------------------------
class _ConvStack:
    """Fixed random 3x3 stride-2 convolutions with ReLU; never trained."""

    def __init__(self, channels=PERCEPTUAL_CHANNELS, seed: int = PERCEPTUAL_SEED):
        rng = np.random.default_rng(seed)
        self.weights = []
        c_in = 3
        for c_out in channels:
            self.weights.append(rng.normal(0, math.sqrt(2.0 / (9 * c_in)), size=(9 * c_in, c_out)))
            c_in = c_out
        self._gather: dict = {}

    def _index(self, h: int, w: int) -> tuple[np.ndarray, int, int]:
        key = (h, w)
        if key not in self._gather:
            ho, wo = (h + 1) // 2, (w + 1) // 2
            oy, ox = np.meshgrid(np.arange(ho) * 2, np.arange(wo) * 2, indexing="ij")
            idx = np.empty((ho * wo, 9), dtype=np.int64)
            k = 0
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    y, x = oy + dy, ox + dx
                    inside = (y >= 0) & (y < h) & (x >= 0) & (x < w)
                    idx[:, k] = np.where(inside, y * w + x, h * w).reshape(-1)
                    k += 1
            self._gather[key] = (idx, ho, wo)
        return self._gather[key]

    def features(self, img) -> list:
        x = nx.as_tensor(img)
        h, w, c = x.shape
        feats = []
        for wt in self.weights:
            idx, ho, wo = self._index(h, w)
            flat = nx.concat([nx.reshape(x, (h * w, c)), nx.Tensor(np.zeros((1, c), dtype=x.dtype))], axis=0)
            cols = nx.reshape(flat[idx], (ho * wo, 9 * c))
            y = nx.relu(nx.matmul(cols, nx.Tensor(wt.astype(x.dtype))))
            h, w, c = ho, wo, wt.shape[1]
            x = nx.reshape(y, (h, w, c))
            norm = nx.sqrt(nx.reduce_sum(nx.square(y), axis=1, keepdims=True) + 1e-10)
            feats.append(y / nx.broadcast_to(norm, y.shape))
        return feats


_STACK: list = []


def _stack() -> _ConvStack:
    if not _STACK:
        _STACK.append(_ConvStack())
    return _STACK[0]


def perceptual_proxy(a, b) -> Tensor:
    """Mean squared distance of unit-normalised random conv features (three stages)."""
    a, b = nx.as_tensor(a), nx.as_tensor(b)
    if a.shape != b.shape:
        raise ContractError(f"perceptual_proxy shapes differ: {a.shape} vs {b.shape}")
    st = _stack()
    total = None
    for fa, fb in zip(st.features(a), st.features(b)):
        term = nx.reduce_mean(nx.reduce_sum(nx.square(fa - fb), axis=1))
        total = term if total is None else total + term
    return total / float(len(st.weights))


# -- per-view and total loss --------------------------------------------------------------
def _sample(depth: Tensor, sparse: np.ndarray) -> tuple[Tensor, np.ndarray]:
    sparse = np.asarray(sparse, dtype=np.float64).reshape(-1, 3)
    u = sparse[:, 0].astype(np.int64)
    v = sparse[:, 1].astype(np.int64)
    return depth[v, u], sparse[:, 2]


def view_terms(render, image: np.ndarray, sparse_depth: np.ndarray | None, sky_mask: np.ndarray | None,
               far: float, weights: LossWeights, iteration: int) -> dict:
    """Unweighted per-view terms that are active under ``weights`` at ``iteration``."""
    if sky_mask is None:
        raise ContractError("sky mask is required for the sky losses")
    img = np.asarray(image, dtype=render.rgb.dtype)
    if img.shape != render.rgb.shape:
        raise ContractError(f"rendered {render.rgb.shape} vs target {img.shape}")
    out = {}
    if weights.rgb > 0:
        out["rgb"] = nx.reduce_mean(nx.square(render.rgb - img))
    if weights.perceptual > 0 and iteration >= weights.perceptual_start_iter:
        out["perceptual"] = perceptual_proxy(render.rgb, img)
    if weights.depth > 0:
        if sparse_depth is not None and len(sparse_depth):
            pred, gt = _sample(render.depth, sparse_depth)
            out["depth"] = nx.reduce_mean(nx.abs_(pred - gt.astype(pred.dtype)))
        else:
            out["depth"] = nx.Tensor(np.zeros((), dtype=render.rgb.dtype))
    mask = np.asarray(sky_mask, dtype=bool)
    n_sky = int(mask.sum())
    if weights.sky_opacity > 0:
        out["sky_opacity"] = (nx.reduce_sum(nx.abs_(render.alpha[mask])) / float(n_sky) if n_sky
                              else nx.Tensor(np.zeros((), dtype=render.rgb.dtype)))
    if weights.sky_depth > 0:
        if n_sky:
            rel = (render.depth[mask] - float(far)) / float(far)
            out["sky_depth"] = nx.reduce_mean(nx.square(rel))
        else:
            out["sky_depth"] = nx.Tensor(np.zeros((), dtype=render.rgb.dtype))
    return out


def total_loss(views: Sequence[dict], betas=None, assign=None, labels=None, iteration: int = 0,
               weights: LossWeights | None = None, assign_log=None) -> LossResult:
    """Weighted sum of the averaged per-view terms plus the lifespan and assignment terms.

    ``views`` are outputs of :func:`view_terms`. ``betas`` feed the lifespan
    term; ``assign``/``labels`` the assignment cross-entropy (``assign_log``,
    the matching log-weights, is preferred when given).
    """
    weights = weights or LossWeights()
    acc: dict = {}
    for v in views:
        for k, val in v.items():
            acc.setdefault(k, []).append(val)
    terms = {}
    for k in TERMS:
        w = getattr(weights, k)
        if w <= 0:
            continue
        if k in acc:
            vals = acc[k]
            raw = vals[0]
            for x in vals[1:]:
                raw = raw + x
            terms[k] = LossTerm(raw / float(len(vals)) if len(vals) > 1 else raw, w)
        elif k == "lifespan" and betas is not None and nx.as_tensor(betas).size:
            terms[k] = LossTerm(lifespan_loss(betas), w)
        elif k == "obj" and (assign is not None or assign_log is not None) and labels is not None and len(labels):
            terms[k] = LossTerm(assignment_loss(assign, labels, log_weights=assign_log), w)
    total = None
    for t in terms.values():
        total = t.weighted if total is None else total + t.weighted
    if total is None:
        total = nx.Tensor(np.zeros((), dtype=nx.get_default_dtype()))
    return LossResult(total, terms)


# -- metrics ----------------------------------------------------------------------------
def psnr(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    if mask is not None:
        m = np.asarray(mask, bool)
        if not m.any():
            return float("nan")
        pred, gt = pred[m], gt[m]
    mse = float(np.mean((pred - gt) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gauss_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    k = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return k / k.sum()


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    n = len(k)
    h, w = x.shape
    tmp = sum(k[i] * x[i:h - n + 1 + i, :] for i in range(n))
    return sum(k[i] * tmp[:, i:w - n + 1 + i] for i in range(n))


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean SSIM over channels with an 11x11 Gaussian window (sigma 1.5), data range 1."""
    pred = np.asarray(pred, np.float64)
    gt = np.asarray(gt, np.float64)
    if pred.shape != gt.shape:
        raise ContractError(f"ssim shapes differ: {pred.shape} vs {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    k = _gauss_kernel()
    if min(pred.shape[:2]) < len(k):
        raise ContractError("images must be at least 11x11 for ssim")
    vals = []
    for c in range(pred.shape[2]):
        x, y = pred[..., c], gt[..., c]
        mx, my = _filter_valid(x, k), _filter_valid(y, k)
        sxx = _filter_valid(x * x, k) - mx * mx
        syy = _filter_valid(y * y, k) - my * my
        sxy = _filter_valid(x * y, k) - mx * my
        num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
        den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def depth_rmse(pred_depth: np.ndarray, sparse_depth: np.ndarray) -> float | None:
    """RMSE at the sparse samples; None when there are no valid samples."""
    sparse = np.asarray(sparse_depth, np.float64).reshape(-1, 3)
    if len(sparse) == 0:
        return None
    u = sparse[:, 0].astype(np.int64)
    v = sparse[:, 1].astype(np.int64)
    err = np.asarray(pred_depth, np.float64)[v, u] - sparse[:, 2]
    return float(np.sqrt(np.mean(err ** 2)))


@dataclass
class MetricRow:
    frame_index: int
    camera: int
    psnr: float
    ssim: float
    d_rmse: float | None
    dyn_psnr: float | None = None


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)

    def add(self, row: MetricRow) -> None:
        self.rows.append(row)

    def aggregate(self) -> dict:
        def mean(vals):
            vals = [v for v in vals if v is not None and not (isinstance(v, float) and math.isnan(v))]
            return float(np.mean(vals)) if vals else None
        return {"psnr": mean([r.psnr for r in self.rows]), "ssim": mean([r.ssim for r in self.rows]),
                "d_rmse": mean([r.d_rmse for r in self.rows]), "dyn_psnr": mean([r.dyn_psnr for r in self.rows]),
                "count": len(self.rows)}

    def dynamic_psnr(self) -> float | None:
        """PSNR pooled over dynamic-mask pixels is tracked per row; this averages rows that have one."""
        return self.aggregate()["dyn_psnr"]

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["frame_index", "camera", "psnr", "ssim", "d_rmse"])
            for r in self.rows:
                wr.writerow([r.frame_index, r.camera, f"{r.psnr:.6f}", f"{r.ssim:.6f}",
                             "" if r.d_rmse is None else f"{r.d_rmse:.6f}"])
