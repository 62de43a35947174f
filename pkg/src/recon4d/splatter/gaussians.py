"""Gaussian primitives: decoding from scene tokens and moving them in time."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .. import numerics as nx
from ..dynamics import AssignmentHead, lifespan_opacity, move_points, object_poses, rotate_quats
from ..encoders import box_coordinates, select_boxes
from ..errors import ContractError
from ..geometry import CameraPose, invert_rigid
from ..numerics import Tensor
from ..update_net import tensor_to_local

BETA_MIN = 0.05
RAW_WIDTH = 15
SKY_LEVELS = 4
SKY_HIDDEN = 16


@dataclass
class GaussianPrimitive:
    """One decoded Gaussian (plain arrays, for inspection and tests)."""

    mu: np.ndarray
    log_scale: np.ndarray
    rot: np.ndarray
    opacity_logit: float
    color: np.ndarray
    beta: float
    t0: float
    assign: np.ndarray
    source_token: int

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def base_opacity(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.opacity_logit)))


@dataclass
class GaussianSet:
    """A batch of Gaussians as tensors.

    ``opacity`` is the effective opacity used for rendering; it equals the
    base opacity until :func:`at_time` applies the lifespan envelope.
    ``uid`` gives a stable order for depth ties.
    """

    mu: Tensor
    log_scale: Tensor
    quat: Tensor
    opacity_logit: Tensor
    color: Tensor
    beta: Tensor
    t0: np.ndarray
    weights: Tensor
    source_token: np.ndarray
    uid: np.ndarray
    opacity: Tensor | None = None
    log_weights: Tensor | None = None

    def __len__(self) -> int:
        return self.mu.shape[0]

    def effective_opacity(self) -> Tensor:
        return self.opacity if self.opacity is not None else nx.sigmoid(self.opacity_logit)

    def subset(self, rows: np.ndarray) -> "GaussianSet":
        rows = np.asarray(rows, dtype=np.int64)
        pick = lambda x: x[rows] if x is not None else None  # noqa: E731
        return GaussianSet(pick(self.mu), pick(self.log_scale), pick(self.quat), pick(self.opacity_logit),
                           pick(self.color), pick(self.beta), self.t0[rows], pick(self.weights),
                           self.source_token[rows], self.uid[rows], pick(self.opacity), pick(self.log_weights))

    def primitives(self) -> list[GaussianPrimitive]:
        q = self.quat.data / np.linalg.norm(self.quat.data, axis=1, keepdims=True)
        return [GaussianPrimitive(self.mu.data[i].copy(), self.log_scale.data[i].copy(), q[i].copy(),
                                  float(self.opacity_logit.data[i]), self.color.data[i].copy(), float(self.beta.data[i]),
                                  float(self.t0[i]), self.weights.data[i].copy(), int(self.source_token[i]))
                for i in range(len(self))]

    @classmethod
    def from_arrays(cls, mu, log_scale, quat, opacity_logit, color, beta=None, t0=None, weights=None,
                    requires_grad: bool = False) -> "GaussianSet":
        """Build a set directly from parameters (tests, tools)."""
        n = len(np.asarray(mu))
        mk = lambda x: nx.Tensor(np.asarray(x, dtype=nx.get_default_dtype()), requires_grad=requires_grad)  # noqa: E731
        beta = np.full(n, 1e6) if beta is None else beta
        weights = np.ones((n, 1)) if weights is None else weights
        return cls(mk(mu), mk(log_scale), mk(quat), mk(opacity_logit), mk(color), mk(beta),
                   np.zeros(n) if t0 is None else np.asarray(t0, np.float64), mk(weights),
                   np.arange(n), np.arange(n))


def at_time(gs: GaussianSet, tracks: Sequence, t: float, use_lifespan: bool = True) -> GaussianSet:
    """Move every Gaussian from its birth time to ``t`` and apply the lifespan envelope."""
    n = len(gs)
    m = len(tracks)
    if gs.weights.shape[1] != m + 1:
        raise ContractError(f"assignment has {gs.weights.shape[1]} slots for {m} tracks (+ static)")
    mu, quat = gs.mu, gs.quat
    if m and n:
        uniq, inv = np.unique(gs.t0, return_inverse=True)
        per_time = np.stack([object_poses(tracks, float(u)) for u in uniq])
        poses_t0 = per_time[inv]
        mu, lin = move_points(gs.mu, gs.weights, poses_t0, object_poses(tracks, t))
        quat = rotate_quats(gs.quat, lin)
    base = nx.sigmoid(gs.opacity_logit)
    opacity = lifespan_opacity(base, gs.t0, gs.beta, t) if use_lifespan else base
    return replace(gs, mu=mu, quat=quat, opacity=opacity)


# -- decoder --------------------------------------------------------------------------------
class SkyDecoder(nx.Module):
    """Linear map from the flattened sky tokens to the weights of a small MLP."""

    def __init__(self, dim: int, n_sky: int, rng: np.random.Generator, hidden: int = SKY_HIDDEN):
        self.hidden = hidden
        f = 3 * 2 * SKY_LEVELS
        self._sizes = (f * hidden, hidden, hidden * 3, 3)
        total = sum(self._sizes)
        self.proj = nx.Linear(n_sky * dim, total, rng, gain=0.1)
        # bias carries a sensible random MLP so the untrained sky is smooth but not flat
        b = np.concatenate([rng.normal(0, 1 / math.sqrt(f), f * hidden), np.zeros(hidden),
                            rng.normal(0, 1 / math.sqrt(hidden), hidden * 3), np.full(3, 0.5)])
        self.proj.bias.data[:] = b

    def weights(self, sky_tokens: Tensor):
        flat = nx.reshape(sky_tokens, (1, -1))
        v = nx.reshape(self.proj(flat), (-1,))
        out, off = [], 0
        for s in self._sizes:
            out.append(v[off:off + s])
            off += s
        f = 3 * 2 * SKY_LEVELS
        w1, b1, w2, b2 = out
        return nx.reshape(w1, (f, self.hidden)), b1, nx.reshape(w2, (self.hidden, 3)), b2


def sky_features(directions: np.ndarray) -> np.ndarray:
    freqs = math.pi * 2.0 ** np.arange(SKY_LEVELS)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    ang = (d[:, :, None] * freqs).reshape(len(d), -1)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(nx.get_default_dtype())


def sky_color(directions: np.ndarray, weights) -> Tensor:
    """RGB in [0, 1] for unit ``directions`` (..., 3) under decoded MLP ``weights``."""
    w1, b1, w2, b2 = weights
    shape = np.shape(directions)[:-1]
    h = nx.gelu(nx.matmul(nx.Tensor(sky_features(directions)), w1) + b1)
    return nx.reshape(nx.sigmoid(nx.matmul(h, w2) + b2), shape + (3,))


class AffineDecoder(nx.Module):
    """Per-camera color correction A c + b; zero-initialised so A = I, b = 0."""

    def __init__(self, dim: int, rng: np.random.Generator):
        self.proj = nx.Linear(dim, 12, rng, init="zeros")

    def __call__(self, affine_token: Tensor):
        v = self.proj(nx.reshape(affine_token, (1, -1)))
        a = nx.reshape(v[0, :9], (3, 3)) + np.eye(3, dtype=v.dtype)
        return a, v[0, 9:]


class GaussianDecoder(nx.Module):
    """Token -> Gaussians head, assignment head, and the sky/affine decoders."""

    def __init__(self, dim: int, gaussians_per_token: int, n_sky: int, rng: np.random.Generator,
                 key_dim: int = 32, patch: int = 8):
        self._g = int(gaussians_per_token)
        self._patch = patch
        self.mlp = nx.MLP(dim, dim, self._g * RAW_WIDTH, rng, out_gain=0.1)
        bias = np.zeros((self._g, RAW_WIDTH))
        bias[:, 3:6] = math.log(0.5)
        bias[:, 6] = 1.0
        bias[:, 10] = 0.0
        bias[:, 14] = math.log(math.expm1(2.0 - BETA_MIN))
        # spread sibling Gaussians over the patch footprint
        if self._g > 1:
            ang = 2 * math.pi * np.arange(self._g) / self._g
            bias[:, 0] = 0.35 * np.cos(ang)
            bias[:, 1] = 0.35 * np.sin(ang)
        self.mlp.fc2.bias.data[:] = bias.reshape(-1)
        self.assign = AssignmentHead(dim, key_dim, rng)
        self.sky = SkyDecoder(dim, n_sky, rng)
        self.affine = AffineDecoder(dim, rng)

    @property
    def gaussians_per_token(self) -> int:
        return self._g


def footprints(positions: np.ndarray, centers: np.ndarray, patch: int, fx: float) -> np.ndarray:
    """Approximate metric size of one patch at each token's distance from its birth camera."""
    dist = np.linalg.norm(np.asarray(positions, np.float64) - centers, axis=1)
    return np.maximum(dist, 0.5) * patch / fx


def footprint_tensor(positions: Tensor, centers: np.ndarray, patch: int, fx: float) -> Tensor:
    """:func:`footprints` kept differentiable in the token positions."""
    d = nx.sqrt(nx.reduce_sum(nx.square(positions - np.asarray(centers, positions.dtype)), axis=1))
    return nx.clip(d, 0.5, None) * (patch / fx)


def assignment_weights(decoder: GaussianDecoder, net, store, rows: np.ndarray, tracks: Sequence,
                       references: Mapping[int, CameraPose], use_boxes: bool = True) -> Tensor:
    """Soft assignment per token, keyed by box tokens at the token's birth frame.

    Tracks that are not among the kept boxes of that frame get zero weight.
    """
    return nx.exp(assignment_log_weights(decoder, net, store, rows, tracks, references, use_boxes))


def assignment_log_weights(decoder: GaussianDecoder, net, store, rows: np.ndarray, tracks: Sequence,
                           references: Mapping[int, CameraPose], use_boxes: bool = True) -> Tensor:
    """Log of :func:`assignment_weights`, computed as a log-softmax."""
    m = len(tracks)
    n = len(rows)
    dtype = nx.get_default_dtype()
    if m == 0 or not use_boxes:
        w = np.full((n, m + 1), nx.NEG_INF, dtype=dtype)
        w[:, m] = 0.0
        return nx.Tensor(w)
    frames = store.birth_frame[rows]
    parts, order = [], []
    for f in np.unique(frames):
        sel = np.flatnonzero(frames == f)
        ref = references[int(f)]
        t = float(store.birth_time[rows[sel[0]]])
        local = tensor_to_local(store.positions[rows[sel]], ref)
        query_in = net.scene_enc(store.features[rows[sel]], local, store.birth_time[rows[sel]])
        keep = select_boxes(tracks, t, ref.center, net.config.max_boxes)
        to_local = invert_rigid(ref.world_from_camera)
        coords = np.stack([box_coordinates(to_local @ tracks[k].pose_at(t), tracks[k].size) for k in keep])
        emb = net.box_enc.embed(coords)
        logits_kept = decoder.assign.logits(query_in, emb)  # (n_sel, len(keep) + 1)
        # scatter kept columns into the full track order; missing tracks get -inf
        cols = np.array(keep + [m])
        full = np.full((len(sel), m + 1), nx.NEG_INF, dtype=dtype)
        scatter = np.zeros((len(keep) + 1, m + 1), dtype=dtype)
        scatter[np.arange(len(cols)), cols] = 1.0
        full[:, cols] = 0.0
        logits = nx.matmul(logits_kept, nx.Tensor(scatter)) + full
        parts.append(nx.log_softmax(logits, axis=-1))
        order.append(sel)
    w = nx.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    order = np.concatenate(order)
    inv = np.empty_like(order)
    inv[order] = np.arange(len(order))
    return w[inv] if not np.array_equal(order, np.arange(n)) else w


def decode_gaussians(store, net, decoder: GaussianDecoder, references: Mapping[int, CameraPose],
                     fx: float, tracks: Sequence = (), rows: np.ndarray | None = None, use_boxes: bool = True,
                     t: float | None = None, use_lifespan: bool = True) -> GaussianSet:
    """Decode stored tokens into Gaussians (optionally moved to render time ``t``).

    ``references`` maps a birth frame index to that frame's front camera pose,
    which defines the local frame used for assignment; together with the
    focal length ``fx`` it sets each token's footprint scale.
    """
    if rows is None:
        rows = np.arange(len(store))
    rows = np.asarray(rows, dtype=np.int64)
    g = decoder.gaussians_per_token
    n = len(rows)
    if n == 0:
        empty = lambda w: nx.Tensor(np.zeros((0, w), dtype=nx.get_default_dtype()))  # noqa: E731
        gs = GaussianSet(empty(3), empty(3), empty(4), nx.Tensor(np.zeros(0, nx.get_default_dtype())), empty(3),
                         nx.Tensor(np.ones(0, nx.get_default_dtype())), np.zeros(0), empty(len(tracks) + 1),
                         np.zeros(0, np.int64), np.zeros(0, np.int64))
        return at_time(gs, tracks, t, use_lifespan) if t is not None else gs
    try:
        centers = np.stack([references[int(f)].center for f in store.birth_frame[rows]])
    except KeyError as exc:
        raise ContractError(f"no reference pose for birth frame {exc.args[0]}") from None
    positions = store.positions[rows]
    feats = store.features[rows]
    raw = nx.reshape(decoder.mlp(feats), (n * g, RAW_WIDTH))
    per_gaussian = lambda x: nx.reshape(nx.broadcast_to(nx.reshape(x, (n, 1, 3)), (n, g, 3)), (n * g, 3))  # noqa: E731
    foot = footprint_tensor(positions, centers, decoder._patch, fx)
    foot_g = per_gaussian(nx.broadcast_to(nx.reshape(foot, (n, 1)), (n, 3)))
    mu = per_gaussian(positions) + raw[:, 0:3] * foot_g
    log_scale = raw[:, 3:6] + nx.log(foot_g)
    quat = raw[:, 6:10]
    opacity_logit = raw[:, 10]
    color = nx.sigmoid(raw[:, 11:14])
    beta = nx.softplus(raw[:, 14]) + BETA_MIN
    log_w = assignment_log_weights(decoder, net, store, rows, tracks, references, use_boxes)
    if g > 1:
        log_w = nx.reshape(nx.broadcast_to(nx.reshape(log_w, (n, 1, -1)), (n, g, log_w.shape[1])), (n * g, -1))
    weights = nx.exp(log_w)
    tok = np.repeat(store.ids[rows], g)
    uid = tok * g + np.tile(np.arange(g), n)
    gs = GaussianSet(mu, log_scale, quat, opacity_logit, color, beta, np.repeat(store.birth_time[rows], g),
                     weights, tok, uid, log_weights=log_w)
    return at_time(gs, tracks, t, use_lifespan) if t is not None else gs


__all__ = ["BETA_MIN", "AffineDecoder", "GaussianDecoder", "GaussianPrimitive", "GaussianSet", "SkyDecoder",
           "assignment_log_weights", "assignment_weights", "at_time", "decode_gaussians", "footprints", "sky_color", "sky_features"]
