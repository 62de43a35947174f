"""Optimization loop, checkpoints, reconstruction helpers, and evaluation."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from . import numerics as nx
from .dynamics import assignment_targets
from .errors import ContractError, DivergenceError, FormatError
from .geometry import CameraPose, Intrinsics
from .objectives import TERMS, LossResult, LossWeights, MetricReport, MetricRow, depth_rmse, psnr, ssim, \
    total_loss, view_terms
from .splatter import GaussianDecoder, GaussianSet, assignment_map, at_time, decode_gaussians, lifespan_map, render
from .splatter.render import RenderOutput
from .update_net import SequenceResult, UpdateNet, UpdateNetConfig, run_sequence

FULL_WARMUP = 5000
FULL_PERCEPTUAL_START = 5000
FULL_PHASE_ITERS = 100_000


# -- model container ---------------------------------------------------------------------
class ReconModel(nx.Module):
    """Update network plus Gaussian decoder; parameters are named ``update_net/...`` and ``decoder/...``."""

    def __init__(self, config: UpdateNetConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self._config = config
        self.update_net = UpdateNet(config, rng)
        self.decoder = GaussianDecoder(config.dim, config.gaussians_per_token, config.n_sky, rng,
                                       patch=config.patch)

    @property
    def config(self) -> UpdateNetConfig:
        return self._config

    def check_frames(self, frames: Sequence) -> None:
        cfg = self._config
        for fr in frames:
            if fr.num_cameras != cfg.num_cameras:
                raise ContractError(f"frame {fr.index} has {fr.num_cameras} cameras, model expects {cfg.num_cameras}")
            for K in fr.intrinsics:
                if K.width % cfg.patch or K.height % cfg.patch:
                    raise ContractError(f"image {K.height}x{K.width} not divisible by patch {cfg.patch}")


@dataclass
class Reconstruction:
    """Token store and auxiliary state after running over the context frames."""

    result: SequenceResult
    references: dict
    fx: float
    tracks: list

    @property
    def store(self):
        return self.result.store

    @property
    def aux(self):
        return self.result.aux


def reconstruct(model: ReconModel, frames: Sequence, tracks: Sequence = (), filtered: bool = True,
                unroll_window: int | None = None) -> Reconstruction:
    model.check_frames(frames)
    res = run_sequence(frames, None, model.update_net, tracks=list(tracks), filtered=filtered,
                       unroll_window=unroll_window)
    refs = {fr.index: fr.poses[0] for fr in frames}
    return Reconstruction(res, refs, float(frames[0].intrinsics[0].fx), list(tracks))


def decode(model: ReconModel, recon: Reconstruction, use_boxes: bool = True) -> GaussianSet:
    return decode_gaussians(recon.store, model.update_net, model.decoder, recon.references, recon.fx,
                            recon.tracks, use_boxes=use_boxes)


def render_view(model: ReconModel, recon: Reconstruction, gs_t: GaussianSet, pose: CameraPose, K: Intrinsics,
                camera: int, backend: str | None = None) -> RenderOutput:
    """Render Gaussians already moved to the view time, with sky and the camera's colour transform."""
    sky_w = model.decoder.sky.weights(recon.aux.sky)
    cam = min(camera, recon.aux.affine.shape[0] - 1)
    affine = model.decoder.affine(recon.aux.affine[cam])
    return render(gs_t, pose, K, sky_w, affine, backend)


# -- configuration -----------------------------------------------------------------------------
@dataclass
class TrainConfig:
    iterations: int = 2000
    lr: float = 1e-4
    warmup_iters: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    schedule: str = "constant"
    unroll_window: int | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    views_per_iter: int = 3
    grad_accum: int = 1
    grad_clip: float | None = None
    sequence_frames: int | None = None
    use_lifespan: bool = True
    use_boxes: bool = True

    def __post_init__(self):
        if self.warmup_iters is None:
            self.warmup_iters = min(FULL_WARMUP, self.iterations // 10)
        self.validate()

    def validate(self) -> None:
        if self.iterations < 0:
            raise ContractError("iterations must be >= 0")
        if self.warmup_iters < 0 or self.warmup_iters > max(self.iterations, 0):
            raise ContractError(f"warmup_iters {self.warmup_iters} must lie in [0, iterations]")
        if self.unroll_window is not None and self.unroll_window < 1:
            raise ContractError("unroll_window must be >= 1")
        if self.views_per_iter < 1 or self.grad_accum < 1:
            raise ContractError("views_per_iter and grad_accum must be >= 1")
        if self.schedule not in ("constant", "cosine"):
            raise ContractError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, step: int) -> float:
        """Learning rate for optimizer step ``step`` (1-based): linear warmup, then constant or cosine."""
        if self.warmup_iters and step < self.warmup_iters:
            return self.lr * step / self.warmup_iters
        if self.schedule == "cosine" and self.iterations > self.warmup_iters:
            frac = (step - self.warmup_iters) / (self.iterations - self.warmup_iters)
            return self.lr * (0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * min(1.0, frac))))
        return self.lr

    def as_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["weights"] = self.weights.as_dict()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


def desk_train_config(iterations: int = 2000, **overrides) -> TrainConfig:
    """Short-budget schedule: warmup and perceptual start scaled to the run length."""
    start = int(round(FULL_PERCEPTUAL_START * iterations / FULL_PHASE_ITERS))
    base = dict(iterations=iterations, lr=1e-3, schedule="cosine", grad_clip=1.0,
                weights=LossWeights(perceptual_start_iter=start))
    base.update(overrides)
    return TrainConfig(**base)


# -- optimizer --------------------------------------------------------------------------------
class AdamW:
    """Adam with decoupled weight decay over a fixed name -> Tensor mapping."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state(self) -> dict:
        out = {}
        for k in self.params:
            out[f"optim/m/{k}"] = self.m[k]
            out[f"optim/v/{k}"] = self.v[k]
        out["optim/t"] = np.array([float(self.t)])
        return out

    def load(self, state: dict) -> None:
        for k in self.params:
            self.m[k] = np.array(state[f"optim/m/{k}"], dtype=self.params[k].dtype)
            self.v[k] = np.array(state[f"optim/v/{k}"], dtype=self.params[k].dtype)
        self.t = int(state["optim/t"][0])


def clip_gradients(params: Sequence, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params if p.grad is not None))
    if total > max_norm > 0:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * s
    return total


# -- checkpoints -------------------------------------------------------------------------------
def _rng_words(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    words = []
    for v in (st["state"]["state"], st["state"]["inc"]):
        words += [(v >> (32 * i)) & 0xFFFFFFFF for i in range(4)]
    words += [st["has_uint32"], st["uinteger"]]
    return np.array(words, dtype=np.float64)


def _rng_from_words(words: np.ndarray) -> np.random.Generator:
    w = [int(x) for x in np.asarray(words, dtype=np.float64)]
    state = sum(w[i] << (32 * i) for i in range(4))
    inc = sum(w[4 + i] << (32 * i) for i in range(4))
    rng = np.random.default_rng()
    rng.bit_generator.state = {"bit_generator": "PCG64", "state": {"state": state, "inc": inc},
                               "has_uint32": w[8], "uinteger": w[9]}
    return rng


def _text_tensor(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def _tensor_text(a: np.ndarray) -> str:
    return bytes(np.asarray(a).astype(np.uint8)).decode("utf-8")


@dataclass
class TrainState:
    iteration: int
    model: ReconModel
    optimizer: AdamW
    rng: np.random.Generator
    config: TrainConfig


def save_checkpoint(path: str | os.PathLike, state: TrainState) -> None:
    tensors = {k: p.data for k, p in state.model.named_parameters()}
    tensors.update(state.optimizer.state())
    tensors["state/iteration"] = np.array([float(state.iteration)])
    tensors["state/rng"] = _rng_words(state.rng)
    tensors["meta/model"] = _text_tensor(json.dumps(state.model.config.as_dict(), sort_keys=True))
    tensors["meta/train"] = _text_tensor(json.dumps(state.config.as_dict(), sort_keys=True))
    tensors["meta/dtype"] = _text_tensor(np.dtype(state.model.update_net.stream_embed.dtype).name)
    nx.save_tensors(path, tensors)


def load_model(path: str | os.PathLike, overrides: dict | None = None) -> tuple[ReconModel, dict]:
    """Rebuild the model stored in a checkpoint; returns it with the raw tensor table."""
    tensors = nx.load_tensors(path)
    if "meta/model" not in tensors:
        raise FormatError(f"{path}: checkpoint has no model configuration")
    cfg = UpdateNetConfig(**{**json.loads(_tensor_text(tensors["meta/model"])), **(overrides or {})})
    dtype = np.dtype(_tensor_text(tensors["meta/dtype"])) if "meta/dtype" in tensors else nx.get_default_dtype()
    with nx.precision(dtype):
        model = ReconModel(cfg)
        model.load_state_dict({k: v for k, v in tensors.items() if "/" in k and not k.startswith(("optim/", "state/",
                                                                                                  "meta/"))})
    return model, tensors


def load_checkpoint(path: str | os.PathLike) -> TrainState:
    model, tensors = load_model(path)
    tcfg = TrainConfig.from_dict(json.loads(_tensor_text(tensors["meta/train"])))
    opt = AdamW(dict(model.named_parameters()), tcfg.beta1, tcfg.beta2, tcfg.eps, tcfg.weight_decay)
    opt.load(tensors)
    return TrainState(int(tensors["state/iteration"][0]), model, opt, _rng_from_words(tensors["state/rng"]), tcfg)


# -- one training step ---------------------------------------------------------------------------
def sequence_views(frames: Sequence) -> list[tuple[int, int]]:
    return [(i, c) for i, fr in enumerate(frames) for c in range(fr.num_cameras)]


def iteration_loss(model: ReconModel, context: Sequence, frames: Sequence, tracks: Sequence,
                   views: Sequence[tuple[int, int]], iteration: int, config: TrainConfig) -> LossResult:
    """Reconstruct from ``context``, render the chosen (frame, camera) views, and combine the losses."""
    recon = reconstruct(model, context, tracks, unroll_window=config.unroll_window)
    gs = decode(model, recon, use_boxes=config.use_boxes)
    moved: dict = {}
    per_view = []
    for fi, cam in views:
        fr = frames[fi]
        if fr.timestamp not in moved:
            moved[fr.timestamp] = at_time(gs, tracks, fr.timestamp, config.use_lifespan)
        out = render_view(model, recon, moved[fr.timestamp], fr.poses[cam], fr.intrinsics[cam], cam)
        sky = fr.require_sky_masks()[cam]
        per_view.append(view_terms(out, fr.images[cam], fr.sparse_depth[cam], sky, fr.intrinsics[cam].far,
                                   config.weights, iteration))
    labels = None
    if tracks and config.use_boxes and config.weights.obj > 0:
        tok = assignment_targets(recon.store.positions.data, tracks, recon.store.birth_time)
        labels = np.repeat(tok, model.decoder.gaussians_per_token)
    return total_loss(per_view, betas=gs.beta, assign=gs.weights, labels=labels, iteration=iteration,
                      weights=config.weights, assign_log=gs.log_weights)


@dataclass
class TrainResult:
    state: TrainState
    history: list
    checkpoints: list


LOSS_COLUMNS = ["iter", "total", *TERMS, "lr", "grad_norm"]


def _dump_divergence(out_dir: Path | None, iteration: int, loss: LossResult) -> str:
    info = {"iteration": iteration, "terms": {k: v[0] for k, v in loss.breakdown().items()},
            "total": float(loss.total.item())}
    text = json.dumps(info, indent=1, sort_keys=True, default=float)
    if out_dir is not None:
        (out_dir / "divergence.json").write_text(text)
    return text


def train(dataset, configs: TrainConfig | Sequence[TrainConfig], net_config: UpdateNetConfig | None = None,
          out_dir: str | os.PathLike | None = None, resume: str | os.PathLike | None = None,
          log: Callable[[dict], None] | None = None, model_seed: int | None = None) -> TrainResult:
    """Train on ``dataset``; a list of configs runs as consecutive curriculum phases.

    Each phase may restrict the sequence to its first ``sequence_frames``
    frames. Checkpoints are written to ``out_dir`` at iteration 0, every
    ``checkpoint_every`` iterations and at the end of each phase.
    """
    phases = [configs] if isinstance(configs, TrainConfig) else list(configs)
    if not phases:
        raise ContractError("at least one training phase is required")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        state = load_checkpoint(resume)
    else:
        cfg = net_config or UpdateNetConfig.preset("desk")
        model = ReconModel(cfg, phases[0].seed if model_seed is None else model_seed)
        opt = AdamW(dict(model.named_parameters()), phases[0].beta1, phases[0].beta2, phases[0].eps,
                    phases[0].weight_decay)
        state = TrainState(0, model, opt, np.random.default_rng(phases[0].seed + 1), phases[0])
    model = state.model
    model.check_frames(dataset.frames)
    history: list = []
    ckpts: list = []
    params = model.parameters()
    loss_csv = None
    if out is not None:
        new_file = not (out / "loss.csv").exists() or resume is None
        loss_csv = open(out / "loss.csv", "w" if new_file else "a", newline="")
        writer = csv.writer(loss_csv)
        if new_file:
            writer.writerow(LOSS_COLUMNS)

    def checkpoint():
        if out is not None:
            p = out / f"ckpt_{state.iteration:08d}.ufo"
            save_checkpoint(p, state)
            ckpts.append(str(p))

    try:
        if resume is None:
            checkpoint()
        done = state.iteration
        for phase in phases:
            start = sum(p.iterations for p in phases[:phases.index(phase)])
            if done >= start + phase.iterations:
                continue
            state.config = phase
            opt = state.optimizer
            opt.beta1, opt.beta2, opt.eps, opt.weight_decay = phase.beta1, phase.beta2, phase.eps, phase.weight_decay
            n = phase.sequence_frames or len(dataset.frames)
            frames = dataset.frames[:n]
            context = [dataset.frames[i] for i in dataset.context if i < n]
            if not context:
                raise ContractError("phase has no context frames")
            tracks = dataset.tracks
            views_all = sequence_views(frames)
            while state.iteration < start + phase.iterations:
                local = state.iteration - start
                model.zero_grad()
                loss = None
                totals = []
                for _ in range(phase.grad_accum):
                    pick = state.rng.choice(len(views_all), size=min(phase.views_per_iter, len(views_all)),
                                            replace=False)
                    views = [views_all[k] for k in sorted(pick)]
                    loss = iteration_loss(model, context, frames, tracks, views, local, phase)
                    value = float(loss.total.item())
                    if not math.isfinite(value):
                        text = _dump_divergence(out, state.iteration, loss)
                        raise DivergenceError(f"non-finite loss at iteration {state.iteration}: {text}")
                    (loss.total * (1.0 / phase.grad_accum)).backward()
                    totals.append(value)
                gnorm = clip_gradients(params, phase.grad_clip) if phase.grad_clip else float("nan")
                lr = phase.lr_at(local + 1)
                opt.step(lr)
                state.iteration += 1
                row = {"iter": state.iteration, "total": float(np.mean(totals)), "lr": lr, "grad_norm": gnorm}
                row.update({k: v[0] for k, v in loss.breakdown().items()})
                history.append(row)
                if loss_csv is not None:
                    csv.writer(loss_csv).writerow([row.get(c, "") for c in LOSS_COLUMNS])
                    loss_csv.flush()
                if log is not None:
                    log(row)
                if phase.checkpoint_every and state.iteration % phase.checkpoint_every == 0:
                    checkpoint()
                if phase.eval_every and out is not None and state.iteration % phase.eval_every == 0:
                    evaluate(model, dataset, out / f"eval_{state.iteration:08d}", maps=False)
            done = state.iteration
            if not ckpts or not ckpts[-1].endswith(f"{state.iteration:08d}.ufo"):
                checkpoint()
    finally:
        if loss_csv is not None:
            loss_csv.close()
    return TrainResult(state, history, ckpts)


# -- evaluation ------------------------------------------------------------------------------
def _save_map(path: Path, values: np.ndarray, vmax: float | None = None) -> None:
    v = np.asarray(values, np.float64)
    top = vmax if vmax is not None else max(float(v.max()), 1e-9)
    Image.fromarray(np.clip(v / top * 255.0, 0, 255).astype(np.uint8)).save(path)


def evaluate(model: ReconModel, dataset, out_dir: str | os.PathLike | None = None, split: str = "targets",
             use_boxes: bool = True, use_lifespan: bool = True, maps: bool = True,
             backend: str | None = None) -> MetricReport:
    """Reconstruct from the context frames and score renders of the chosen split.

    Writes ``metrics.csv`` and, if ``maps``, lifespan and assignment images for
    camera 0 of every scored frame.
    """
    model.check_frames(dataset.frames)
    splits = {"targets": dataset.targets, "context": dataset.context, "all": list(range(len(dataset.frames)))}
    if split not in splits:
        raise ContractError(f"unknown split {split!r}")
    idx = splits[split]
    for i in idx:
        dataset.frames[i].require_sky_masks()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    report = MetricReport()
    with nx.no_grad():
        recon = reconstruct(model, dataset.context_frames(), dataset.tracks)
        gs = decode(model, recon, use_boxes=use_boxes)
        for i in idx:
            fr = dataset.frames[i]
            gst = at_time(gs, dataset.tracks, fr.timestamp, use_lifespan)
            for cam in range(fr.num_cameras):
                o = render_view(model, recon, gst, fr.poses[cam], fr.intrinsics[cam], cam, backend)
                rgb = np.clip(o.rgb.data.astype(np.float64), 0.0, 1.0)
                dyn = None
                if fr.dynamic_masks is not None and np.any(fr.dynamic_masks[cam]):
                    dyn = psnr(rgb, fr.images[cam], fr.dynamic_masks[cam])
                report.add(MetricRow(fr.index, cam, psnr(rgb, fr.images[cam]), ssim(rgb, fr.images[cam]),
                                     depth_rmse(o.depth.data, fr.sparse_depth[cam]), dyn))
            if out is not None and maps:
                pose, K = fr.poses[0], fr.intrinsics[0]
                _save_map(out / f"lifespan_{fr.index:05d}.png", lifespan_map(gst, pose, K, backend))
                _save_map(out / f"assignment_{fr.index:05d}.png", assignment_map(gst, pose, K, backend), 1.0)
    if out is not None:
        report.write_csv(out / "metrics.csv")
    return report


def dynamic_psnr(model: ReconModel, dataset, split: str = "targets", use_boxes: bool = True,
                 use_lifespan: bool = True) -> float:
    """PSNR pooled over all dynamic-mask pixels of the split."""
    splits = {"targets": dataset.targets, "context": dataset.context}
    se, count = 0.0, 0
    with nx.no_grad():
        recon = reconstruct(model, dataset.context_frames(), dataset.tracks)
        gs = decode(model, recon, use_boxes=use_boxes)
        for i in splits[split]:
            fr = dataset.frames[i]
            if fr.dynamic_masks is None:
                continue
            gst = at_time(gs, dataset.tracks, fr.timestamp, use_lifespan)
            for cam in range(fr.num_cameras):
                m = np.asarray(fr.dynamic_masks[cam], bool)
                if not m.any():
                    continue
                o = render_view(model, recon, gst, fr.poses[cam], fr.intrinsics[cam], cam)
                rgb = np.clip(o.rgb.data.astype(np.float64), 0.0, 1.0)
                se += float(np.sum((rgb[m] - fr.images[cam][m]) ** 2))
                count += int(m.sum()) * 3
    if count == 0:
        return float("nan")
    return psnr(np.zeros(1), np.full(1, math.sqrt(se / count)))


__all__ = ["AdamW", "ReconModel", "Reconstruction", "TrainConfig", "TrainResult", "TrainState", "decode",
           "desk_train_config", "dynamic_psnr", "evaluate", "iteration_loss", "load_checkpoint", "load_model",
           "reconstruct", "render_view", "save_checkpoint", "train"]
