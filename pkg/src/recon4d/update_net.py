"""The recurrent update transformer and the per-frame reconstruction loop.

One step reads the image tokens of the current frame, the visible scene
tokens, the box tokens and the auxiliary tokens as a single sequence, and
produces refined scene tokens, one new token per image patch, and the next
auxiliary state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .encoders import (MAX_BOXES, N_SKY, AuxInit, AuxTokens, BoxEncoder, ImageEncoder, ImageTokenBatch,
                       SceneEncoder)
from .errors import ContractError
from .geometry import CameraPose
from .numerics import Tensor
from .tokenstore import DEFAULT_BUDGET, SceneToken, SceneTokenStore, merge_tensors, select_visible_rows

STREAMS = ("image", "scene", "box", "sky", "affine")


@dataclass
class UpdateNetConfig:
    layers: int = 12
    dim: int = 768
    heads: int = 12
    patch: int = 8
    budget: int = DEFAULT_BUDGET
    gaussians_per_token: int = 1
    num_cameras: int = 3
    n_sky: int = N_SKY
    max_boxes: int = MAX_BOXES
    mlp_ratio: int = 4
    max_delta: float = 2.0
    init_distance: float = 12.0
    use_boxes: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.dim % self.heads:
            raise ContractError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if min(self.layers, self.dim, self.heads, self.patch, self.gaussians_per_token, self.num_cameras) < 1:
            raise ContractError("layer, width, head, patch, camera and gaussian counts must be positive")
        if self.budget < 0:
            raise ContractError("budget must be >= 0")

    @classmethod
    def preset(cls, name: str, **overrides) -> "UpdateNetConfig":
        base = PRESETS.get(name)
        if base is None:
            raise ContractError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return replace(base, **overrides)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


PRESETS = {
    "full": UpdateNetConfig(),
    "desk": UpdateNetConfig(layers=4, dim=128, heads=4, budget=512),
    "tiny": UpdateNetConfig(layers=1, dim=16, heads=2, budget=64),
}


class Attention(nx.Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator, out_gain: float = 1.0):
        self.heads = heads
        self.qkv = nx.Linear(dim, 3 * dim, rng)
        self.out = nx.Linear(dim, dim, rng, gain=out_gain)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        n, d = x.shape
        h = self.heads
        qkv = nx.transpose(nx.reshape(self.qkv(x), (n, 3, h, d // h)), (1, 2, 0, 3))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scale = 1.0 / math.sqrt(d // h)
        if not nx.is_grad_enabled() and mask is None:
            ctx = nx.Tensor(nx.attention_chunked(q.data, k.data, v.data, scale))
        else:
            ctx = nx.scaled_dot_product_attention(q, k, v, mask=mask, scale=scale)
        ctx = nx.reshape(nx.transpose(ctx, (1, 0, 2)), (n, d))
        return self.out(ctx)


class Block(nx.Module):
    """Pre-norm transformer block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator, depth: int):
        gain = 1.0 / math.sqrt(2 * depth)
        self.norm1 = nx.LayerNorm(dim)
        self.attn = Attention(dim, heads, rng, out_gain=gain)
        self.norm2 = nx.LayerNorm(dim)
        self.mlp = nx.MLP(dim, mlp_ratio * dim, dim, rng, out_gain=gain)

    def __call__(self, x: Tensor, mask=None) -> Tensor:
        x = x + self.attn(self.norm1(x), mask)
        return x + self.mlp(self.norm2(x))


@dataclass
class UpdateOutput:
    """Outputs in the local frame of the step.

    Row ``k`` of ``refined_positions``/``refined_features`` belongs to the
    ``k``-th visible token.
    """

    refined_positions: Tensor
    refined_features: Tensor
    new_positions: Tensor
    new_features: Tensor
    aux: AuxTokens
    new_distance: Tensor | None = None

    def refined_tokens(self, ids: Sequence[int], birth_time, birth_frame) -> list[SceneToken]:
        return [SceneToken(int(i), self.refined_positions.data[k].copy(), self.refined_features.data[k].copy(),
                           float(birth_time[k]), int(birth_frame[k])) for k, i in enumerate(ids)]

    def new_tokens(self, ids: Sequence[int], birth_time: float, birth_frame: int) -> list[SceneToken]:
        return [SceneToken(int(i), self.new_positions.data[k].copy(), self.new_features.data[k].copy(),
                           float(birth_time), int(birth_frame)) for k, i in enumerate(ids)]


class UpdateNet(nx.Module):
    def __init__(self, config: UpdateNetConfig, rng: np.random.Generator | int = 0):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        config.validate()
        self._config = config
        d = config.dim
        self.image_enc = ImageEncoder(d, config.patch, config.num_cameras, rng)
        self.box_enc = BoxEncoder(d, rng)
        self.scene_enc = SceneEncoder(d, rng)
        self.aux_init = AuxInit(d, config.num_cameras, rng, config.n_sky)
        self.stream_embed = nx.parameter(rng.normal(0, 0.02, size=(len(STREAMS), d)))
        self.blocks = [Block(d, config.heads, config.mlp_ratio, rng, config.layers) for _ in range(config.layers)]
        self.norm = nx.LayerNorm(d)
        # scene-token heads start at zero so an untrained step leaves tokens untouched
        self.scene_feat_head = nx.Linear(d, d, rng, init="zeros")
        self.scene_delta_head = nx.Linear(d, 3, rng, init="zeros")
        self.new_feat_head = nx.Linear(d, d, rng)
        self.new_dist_head = nx.Linear(d, 1, rng, gain=0.1)
        self.new_dist_head.bias.data[:] = math.log(math.expm1(config.init_distance))

    @property
    def config(self) -> UpdateNetConfig:
        return self._config

    def initial_aux(self) -> AuxTokens:
        return self.aux_init()

    def _stream(self, x: Tensor, k: int) -> Tensor:
        return x + self.stream_embed[k]

    def transform(self, seq: Tensor, mask=None) -> Tensor:
        for blk in self.blocks:
            seq = blk(seq, mask)
        return self.norm(seq)


def update_step(net: UpdateNet, img: ImageTokenBatch, scene_encoded: Tensor, scene_features: Tensor,
                scene_positions: Tensor, boxes: Tensor | None, aux: AuxTokens, mask=None) -> UpdateOutput:
    """One application of the update transformer (all inputs in local coordinates).

    ``scene_encoded`` is the transformer input for the visible tokens;
    ``scene_features``/``scene_positions`` are their raw stored values, which
    the heads refine residually.
    """
    cfg = net.config
    d = cfg.dim
    parts = [net._stream(img.tokens, 0)]
    n_img = img.tokens.shape[0]
    n_scene = scene_encoded.shape[0]
    for x in (scene_encoded, scene_features):
        if x.shape[0] and x.shape[-1] != d:
            raise ContractError(f"scene tokens have dim {x.shape[-1]}, network expects {d}")
    if img.tokens.shape[-1] != d:
        raise ContractError(f"image tokens have dim {img.tokens.shape[-1]}, network expects {d}")
    if n_scene:
        parts.append(net._stream(scene_encoded, 1))
    n_box = 0 if boxes is None else boxes.shape[0]
    if n_box:
        parts.append(net._stream(boxes, 2))
    parts.append(net._stream(aux.sky, 3))
    parts.append(net._stream(aux.affine, 4))
    seq = nx.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != (seq.shape[0], seq.shape[0]):
            raise ContractError(f"mask shape {mask.shape} does not match sequence length {seq.shape[0]}")
    h = net.transform(seq, mask)

    h_img = h[:n_img]
    off = n_img
    if n_scene:
        h_scene = h[off:off + n_scene]
        refined_feat = scene_features + net.scene_feat_head(h_scene)
        delta = nx.tanh(net.scene_delta_head(h_scene)) * cfg.max_delta
        refined_pos = scene_positions + delta
    else:
        refined_feat = nx.Tensor(np.zeros((0, d), dtype=h.dtype))
        refined_pos = nx.Tensor(np.zeros((0, 3), dtype=h.dtype))
    off += n_scene + n_box
    n_sky = aux.sky.shape[0]
    aux_out = AuxTokens(h[off:off + n_sky], h[off + n_sky:off + n_sky + aux.affine.shape[0]])

    new_feat = net.new_feat_head(h_img)
    dist = nx.softplus(net.new_dist_head(h_img)) + 0.5
    new_pos = nx.Tensor(img.ray_origins.astype(h.dtype)) + nx.broadcast_to(dist, (n_img, 3)) * img.ray_dirs.astype(h.dtype)
    return UpdateOutput(refined_pos, refined_feat, new_pos, new_feat, aux_out, dist)


# -- local frame helpers (differentiable) ---------------------------------------------------
def tensor_to_local(positions: Tensor, pose: CameraPose) -> Tensor:
    m = pose.camera_from_world().astype(positions.dtype)
    return nx.matmul(positions, nx.Tensor(m[:3, :3].T.copy())) + m[:3, 3]


def tensor_to_world(positions: Tensor, pose: CameraPose) -> Tensor:
    m = pose.world_from_camera.astype(positions.dtype)
    return nx.matmul(positions, nx.Tensor(m[:3, :3].T.copy())) + m[:3, 3]


@dataclass
class StepRecord:
    frame_index: int
    visible_ids: np.ndarray
    new_ids: np.ndarray
    num_tokens: int
    new_distance: np.ndarray | None = None


@dataclass
class SequenceResult:
    store: SceneTokenStore
    aux: AuxTokens
    steps: list = field(default_factory=list)


def encode_boxes_for(net: UpdateNet, tracks, t: float, reference: CameraPose):
    if not net.config.use_boxes or not tracks:
        return [], None
    return net.box_enc(tracks, t, reference, net.config.max_boxes)


def run_sequence(frames: Sequence, store: SceneTokenStore | None, net: UpdateNet, aux: AuxTokens | None = None,
                 tracks: Sequence = (), filtered: bool = True, unroll_window: int | None = None,
                 mask_fn=None) -> SequenceResult:
    """Recurrent reconstruction over time-ordered frames.

    Per frame: select visible tokens, move them into the frame's local
    coordinates, run one update, move results back to world coordinates and
    merge. ``filtered=False`` passes every stored token (quadratic baseline).
    ``unroll_window`` cuts the gradient history every that many frames.
    """
    cfg = net.config
    if store is None:
        store = SceneTokenStore(cfg.dim)
    if store.dim != cfg.dim:
        raise ContractError(f"store dim {store.dim} != network dim {cfg.dim}")
    if aux is None:
        aux = net.initial_aux()
    times = [f.timestamp for f in frames]
    if any(b < a for a, b in zip(times, times[1:])):
        raise ContractError("frames must be time-ordered")
    if unroll_window is not None and unroll_window < 1:
        raise ContractError("unroll_window must be >= 1")
    result = SequenceResult(store, aux)
    for step, frame in enumerate(frames):
        if frame.num_cameras > cfg.num_cameras:
            raise ContractError(f"frame has {frame.num_cameras} cameras, network configured for {cfg.num_cameras}")
        if unroll_window is not None and step and step % unroll_window == 0:
            store.detach()
            aux = aux.detach()
        ref = frame.poses[0]
        if filtered:
            rows = select_visible_rows(store, frame.poses, frame.intrinsics, cfg.budget)
        else:
            rows = np.arange(len(store))
        vis_ids = store.ids[rows]
        if len(rows):
            pos_local = tensor_to_local(store.positions[rows], ref)
            feats = store.features[rows]
        else:
            pos_local = nx.Tensor(np.zeros((0, 3), dtype=nx.get_default_dtype()))
            feats = nx.Tensor(np.zeros((0, cfg.dim), dtype=nx.get_default_dtype()))
        enc = net.scene_enc(feats, pos_local, store.birth_time[rows])
        img = net.image_enc.encode_frame(frame, ref)
        _, box_emb = encode_boxes_for(net, tracks, frame.timestamp, ref)
        mask = mask_fn(img, len(rows), 0 if box_emb is None else box_emb.shape[0]) if mask_fn else None
        out = update_step(net, img, enc, feats, pos_local, box_emb, aux, mask)
        new_ids = store.allocate_ids(img.num_patches)
        merge_tensors(store, vis_ids, tensor_to_world(out.refined_positions, ref), out.refined_features,
                      new_ids, tensor_to_world(out.new_positions, ref), out.new_features,
                      frame.timestamp, frame.index)
        aux = out.aux
        result.steps.append(StepRecord(frame.index, vis_ids.copy(), new_ids, len(store),
                                       out.new_distance.data.reshape(-1).copy()))
    result.aux = aux
    return result
