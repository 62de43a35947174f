"""Dynamic objects: tracks, soft object assignment, blended motion, lifespans.

Assignment weights carry one column per tracked object followed by a final
"static" column whose transform is the identity.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ContractError, SingularError
from .geometry import canonical_quat, matrix_to_quat, nearest_rotation, quat_to_matrix, slerp
from .numerics import Tensor


@dataclass
class ObjectTrack:
    """Keyed rigid poses (object-to-world) of one box-shaped object."""

    object_id: int
    times: np.ndarray
    poses: np.ndarray
    size: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.poses = np.asarray(self.poses, dtype=np.float64).reshape(-1, 4, 4)
        self.size = np.asarray(self.size, dtype=np.float64)
        if len(self.times) != len(self.poses) or len(self.times) == 0:
            raise ContractError("track needs one pose per key time")
        if np.any(np.diff(self.times) <= 0):
            raise ContractError("track key times must be strictly increasing")
        if np.any(self.size <= 0):
            raise ContractError("box size must be strictly positive")
        self._quats = matrix_to_quat(self.poses[:, :3, :3]).reshape(-1, 4)

    def pose_at(self, t: float) -> np.ndarray:
        """Pose at ``t``: linear translation + slerp between keys, clamped at the ends."""
        ts = self.times
        if t <= ts[0]:
            return self.poses[0].copy()
        if t >= ts[-1]:
            return self.poses[-1].copy()
        k = int(np.searchsorted(ts, t, side="right")) - 1
        u = (t - ts[k]) / (ts[k + 1] - ts[k])
        if u == 0.0:
            return self.poses[k].copy()
        out = np.eye(4)
        out[:3, :3] = quat_to_matrix(slerp(self._quats[k], self._quats[k + 1], u))
        out[:3, 3] = (1 - u) * self.poses[k][:3, 3] + u * self.poses[k + 1][:3, 3]
        return out

    def corners(self, t: float) -> np.ndarray:
        """The 8 box corners in world coordinates at time ``t``."""
        half = self.size / 2
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
        m = self.pose_at(t)
        return (signs * half) @ m[:3, :3].T + m[:3, 3]

    def contains(self, points: np.ndarray, t: float) -> np.ndarray:
        m = self.pose_at(t)
        local = (np.asarray(points, dtype=np.float64) - m[:3, 3]) @ m[:3, :3]
        return np.all(np.abs(local) <= self.size / 2, axis=-1)


def object_poses(tracks: Sequence[ObjectTrack], t: float) -> np.ndarray:
    """(M+1, 4, 4) object poses at ``t`` with the static identity appended."""
    mats = [tr.pose_at(t) for tr in tracks] + [np.eye(4)]
    return np.stack(mats)


# -- soft assignment -----------------------------------------------------------------
class AssignmentHead(nx.Module):
    """Query/key MLPs plus the learned key of the static slot."""

    def __init__(self, dim: int, key_dim: int, rng: np.random.Generator):
        self.query = nx.MLP(dim, dim, key_dim, rng)
        self.key = nx.MLP(dim, dim, key_dim, rng)
        self.static_key = nx.parameter(rng.normal(0, 1.0 / np.sqrt(key_dim), size=key_dim))

    def logits(self, scene: Tensor, boxes: Tensor | None) -> Tensor:
        q = self.query(scene)
        static = nx.reshape(self.static_key, (-1, 1))
        if boxes is None or boxes.shape[0] == 0:
            keys_t = static
        else:
            keys_t = nx.concat([nx.transpose(self.key(boxes)), static], axis=1)
        return nx.matmul(q, keys_t)


def soft_assign(scene_tokens: Tensor, box_tokens: Tensor | None, head: AssignmentHead) -> Tensor:
    """(N, M+1) softmax over object keys and the static slot (last column)."""
    return nx.softmax(head.logits(scene_tokens, box_tokens), axis=-1)


def blended_transform(weights, poses: np.ndarray) -> Tensor:
    """Σ_i A_i T_i as a literal weighted sum of 4x4 matrices, one per row of ``weights``.

    ``poses`` is (M+1, 4, 4) with the identity last, or (N, M+1, 4, 4) for
    per-row pose sets.
    """
    w = nx.as_tensor(weights)
    poses = np.asarray(poses, dtype=w.dtype)
    if poses.ndim == 3:
        if w.shape[-1] != len(poses):
            raise ContractError(f"{w.shape[-1]} weights for {len(poses)} poses")
        out = nx.matmul(w, nx.Tensor(poses.reshape(len(poses), 16)))
    else:
        out = nx.matmul(nx.reshape(w, (w.shape[0], 1, w.shape[1])), nx.Tensor(poses.reshape(len(poses), -1, 16)))
    return nx.reshape(out, (w.shape[0], 4, 4))


def move_points(mu: Tensor, weights, poses_t0: np.ndarray, poses_t1: np.ndarray) -> tuple[Tensor, Tensor]:
    """Apply M = T_{t1} T_{t0}^{-1} to centers; returns moved centers and M's linear parts.

    ``poses_t0`` may be per-row (N, M+1, 4, 4) since Gaussians are born at
    different times.
    """
    t0 = blended_transform(weights, poses_t0)
    t1 = blended_transform(weights, poses_t1)
    det = np.linalg.det(t0.data[:, :3, :3])
    if np.any(np.abs(det) < 1e-9):
        raise SingularError("blended transform at t0 is singular")
    m = nx.matmul(t1, nx.inv(t0))
    lin = m[:, :3, :3]
    trans = m[:, :3, 3]
    mu_col = nx.reshape(mu, (mu.shape[0], 3, 1))
    moved = nx.reshape(nx.matmul(lin, mu_col), (mu.shape[0], 3)) + trans
    return moved, lin


def _left_matrix(q: np.ndarray) -> np.ndarray:
    """(N, 4, 4) matrices L with q ⊗ p = L p."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack([np.stack([w, -x, -y, -z], -1), np.stack([x, w, -z, y], -1),
                     np.stack([y, z, w, -x], -1), np.stack([z, -y, x, w], -1)], axis=1)


def _skew(v: np.ndarray) -> np.ndarray:
    o = np.zeros(v.shape[:-1] + (3, 3))
    o[..., 0, 1], o[..., 0, 2], o[..., 1, 2] = -v[..., 2], v[..., 1], -v[..., 0]
    return o - np.swapaxes(o, -1, -2)


def rotation_quats(linear) -> Tensor:
    """Differentiable quaternion of the closest rotation to each (N, 3, 3) matrix.

    With M = R S and a right perturbation R → R exp([ω]×), the skew part of
    RᵀdM equals [ω]× S + S [ω]×, solved in the eigenbasis of S.
    """
    lin = nx.as_tensor(linear)
    m = lin.data.astype(np.float64)
    q = nearest_rotation(m).reshape(-1, 4)
    r = quat_to_matrix(q).reshape(-1, 3, 3)

    def bw(g):
        # dL/dω from dq = q ⊗ (0, ω/2)
        b = 0.5 * np.einsum("nji,nj->ni", _left_matrix(q), g.astype(np.float64))[:, 1:]
        bmat = 0.5 * _skew(b)
        sym = np.swapaxes(r, -1, -2) @ m
        s, v = np.linalg.eigh(0.5 * (sym + np.swapaxes(sym, -1, -2)))
        denom = s[:, :, None] + s[:, None, :]
        if np.any(np.abs(denom) < 1e-12):
            raise SingularError("closest-rotation gradient is undefined for this matrix")
        c = (np.swapaxes(v, -1, -2) @ bmat @ v) / denom
        e = v @ c @ np.swapaxes(v, -1, -2)
        return ((r @ (e - np.swapaxes(e, -1, -2))).astype(lin.dtype),)

    return Tensor._make(q.astype(lin.dtype), (lin,), bw)


def rotate_quats(quat: Tensor, linear) -> Tensor:
    """Left-compose ``quat`` with the closest rotation of each linear part."""
    qr = rotation_quats(linear)
    a = [qr[:, k] for k in range(4)]
    b = [quat[:, k] for k in range(4)]
    return nx.stack([a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                     a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                     a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                     a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]], axis=1)


@dataclass
class MovedGaussian:
    mu: np.ndarray
    quat: np.ndarray


def move_gaussian(mu, quat, weights, tracks: Sequence[ObjectTrack], t0: float, t1: float) -> MovedGaussian:
    """Move one Gaussian (center, rotation) from its birth time to ``t1``."""
    w = np.asarray(weights, dtype=np.float64).reshape(1, -1)
    p0, p1 = object_poses(tracks, t0), object_poses(tracks, t1)
    with nx.no_grad():
        moved, lin = move_points(nx.Tensor(np.asarray(mu, np.float64).reshape(1, 3)), w, p0, p1)
        q = rotate_quats(nx.Tensor(np.asarray(quat, np.float64).reshape(1, 4)), lin)
    return MovedGaussian(moved.data[0], canonical_quat(q.data[0]))


# -- lifespan ------------------------------------------------------------------------
def lifespan_opacity(base_opacity, t0, beta, t):
    """σ(t) = σ · exp(-(t - t0)² / (2β²)); works on floats, arrays, or Tensors."""
    if isinstance(base_opacity, Tensor) or isinstance(beta, Tensor):
        dt = nx.as_tensor(np.asarray(t - np.asarray(t0), dtype=nx.as_tensor(beta).dtype))
        beta = nx.as_tensor(beta)
        env = nx.exp(nx.neg(nx.square(dt) / (nx.square(beta) * 2.0)))
        return nx.as_tensor(base_opacity) * env
    return base_opacity * np.exp(-((t - t0) ** 2) / (2.0 * np.asarray(beta) ** 2))


def lifespan_loss(betas) -> Tensor:
    """Mean reciprocal lifespan."""
    betas = nx.as_tensor(betas)
    if betas.size == 0:
        raise ContractError("lifespan_loss of an empty set")
    if np.any(betas.data <= 0):
        raise ContractError("lifespans must be strictly positive")
    return nx.reduce_mean(1.0 / betas)


# -- assignment supervision ------------------------------------------------------------
def assignment_targets(positions: np.ndarray, tracks: Sequence[ObjectTrack], times) -> np.ndarray:
    """Target slot per token: first containing box by ascending object id, else static.

    ``times`` is a scalar or one time per token (tokens are labelled at the
    time their position refers to).
    """
    positions = np.asarray(positions, dtype=np.float64)
    n, m = len(positions), len(tracks)
    times = np.broadcast_to(np.asarray(times, dtype=np.float64), (n,))
    labels = np.full(n, m, dtype=np.int64)
    order = sorted(range(m), key=lambda i: tracks[i].object_id)
    for t in np.unique(times):
        sel = np.flatnonzero(times == t)
        todo = np.ones(len(sel), dtype=bool)
        for i in order:
            inside = tracks[i].contains(positions[sel], float(t)) & todo
            labels[sel[inside]] = i
            todo &= ~inside
    return labels


def assignment_loss(weights, labels: np.ndarray, eps: float = 1e-12, log_weights=None) -> Tensor:
    """Mean cross-entropy of assignment rows against hard target slots.

    Pass ``log_weights`` (a log-softmax) when available: the gradient then
    reaches the logits even for rows whose target weight has underflowed.
    Rows whose target slot was masked out (log-weight at ``NEG_INF``) add zero.
    """
    labels = np.asarray(labels, dtype=np.int64)
    src = nx.as_tensor(weights if log_weights is None else log_weights)
    if len(labels) == 0:
        return nx.Tensor(np.zeros((), dtype=src.dtype))
    picked = src[np.arange(len(labels)), labels]
    if log_weights is None:
        return nx.neg(nx.reduce_mean(nx.log(nx.clip(picked, eps, None))))
    valid = (picked.data > 0.5 * nx.NEG_INF).astype(src.dtype)
    return nx.neg(nx.reduce_mean(picked * valid))
