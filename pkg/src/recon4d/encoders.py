"""Input tokenisation for the update transformer.

All geometry handed to the transformer is expressed in a *local* frame, the
front camera of the current frame (camera convention: +z forward, +x right,
+y down). Callers pass that frame as ``reference``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ContractError
from .geometry import CameraPose, invert_rigid, pixel_rays
from .numerics import Tensor

FOURIER_LEVELS = 6
BOX_WAVELENGTHS = (32.0, 1.0)
MAX_BOXES = 32
N_SKY = 4


# -- fixed encodings -------------------------------------------------------------------
def fourier_frequencies(levels: int = FOURIER_LEVELS, longest: float = BOX_WAVELENGTHS[0],
                        shortest: float = BOX_WAVELENGTHS[1]) -> np.ndarray:
    """Angular frequencies for wavelengths spaced geometrically from ``longest`` to ``shortest``."""
    if levels == 1:
        return np.array([2 * math.pi / longest])
    return 2 * math.pi / np.geomspace(longest, shortest, levels)


def fourier_features(x, freqs: np.ndarray) -> Tensor:
    """[sin(f x) for all coords and f, then cos(...)]: (..., C) -> (..., 2·C·L)."""
    x = nx.as_tensor(x)
    c = x.shape[-1]
    lead = x.shape[:-1]
    f = np.asarray(freqs, dtype=x.dtype)
    scaled = nx.matmul(nx.reshape(x, lead + (c, 1)), nx.Tensor(f.reshape(1, -1)))
    scaled = nx.reshape(scaled, lead + (c * len(f),))
    return nx.concat([nx.sin(scaled), nx.cos(scaled)], axis=-1)


def sinusoid(values, dim: int, min_period: float = 0.2, max_period: float = 200.0) -> np.ndarray:
    """Sinusoidal encoding of scalars with periods from ``min_period`` to ``max_period``."""
    v = np.asarray(values, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    periods = np.geomspace(min_period, max_period, half) if half > 1 else np.array([min_period])
    ang = v * (2 * math.pi / periods)
    out = np.zeros((len(v), dim))
    out[:, :half] = np.sin(ang)
    out[:, half:2 * half] = np.cos(ang)
    return out.astype(nx.get_default_dtype())


def patch_position_encoding(rows: int, cols: int, dim: int) -> np.ndarray:
    """2D sinusoid: first half of the channels encode the row, second half the column."""
    half = dim // 2
    r = sinusoid(np.repeat(np.arange(rows), cols), half, min_period=2.0, max_period=4.0 * max(rows, cols, 2))
    c = sinusoid(np.tile(np.arange(cols), rows), dim - half, min_period=2.0, max_period=4.0 * max(rows, cols, 2))
    return np.concatenate([r, c], axis=1)


# -- image tokens ------------------------------------------------------------------------
@dataclass
class ImageTokenBatch:
    tokens: Tensor
    ray_dirs: np.ndarray
    ray_moments: np.ndarray
    ray_origins: np.ndarray
    camera_index: np.ndarray
    frame_time: float
    patch_grid: tuple

    @property
    def num_patches(self) -> int:
        return self.tokens.shape[0]


def pixel_channels(image: np.ndarray, pose_local: np.ndarray, K) -> np.ndarray:
    """Per-pixel 9 channels: RGB then Plücker direction and moment."""
    d, m = pixel_rays(pose_local, K)
    return np.concatenate([np.asarray(image, dtype=np.float64), d, m], axis=-1)


def patchify(x: np.ndarray, p: int) -> np.ndarray:
    h, w, c = x.shape
    if h % p or w % p:
        raise ContractError(f"image {h}x{w} is not divisible by patch size {p}")
    x = x.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4)
    return x.reshape((h // p) * (w // p), p * p * c)


def local_pose(pose: CameraPose, reference: CameraPose | None) -> np.ndarray:
    if reference is None:
        return pose.world_from_camera
    return invert_rigid(reference.world_from_camera) @ pose.world_from_camera


class ImageEncoder(nx.Module):
    def __init__(self, dim: int, patch: int, num_cameras: int, rng: np.random.Generator):
        self.patch = int(patch)
        self.dim = int(dim)
        self.proj = nx.Linear(patch * patch * 9, dim, rng)
        self.camera_embed = nx.parameter(rng.normal(0, 0.02, size=(num_cameras, dim)))

    def __call__(self, frame, cam: int, reference: CameraPose | None = None) -> ImageTokenBatch:
        K = frame.intrinsics[cam]
        p = self.patch
        if K.height % p or K.width % p:
            raise ContractError(f"image {K.height}x{K.width} is not divisible by patch size {p}")
        if cam >= self.camera_embed.shape[0]:
            raise ContractError(f"camera index {cam} exceeds configured camera count")
        pose_l = local_pose(frame.poses[cam], reference)
        chans = pixel_channels(frame.images[cam], pose_l, K)
        patches = patchify(chans, p).astype(nx.get_default_dtype())
        rows, cols = K.height // p, K.width // p
        x = self.proj(nx.Tensor(patches))
        x = x + (sinusoid([frame.timestamp], self.dim)[0] + patch_position_encoding(rows, cols, self.dim))
        x = x + nx.embedding_lookup(self.camera_embed, np.full(rows * cols, cam))
        # central ray of each patch
        vs, us = np.meshgrid(np.arange(rows) * p + (p - 1) / 2.0, np.arange(cols) * p + (p - 1) / 2.0, indexing="ij")
        d, m = pixel_rays(pose_l, K, us.reshape(-1), vs.reshape(-1))
        origins = np.broadcast_to(pose_l[:3, 3], d.shape).copy()
        return ImageTokenBatch(x, d, m, origins, np.full(rows * cols, cam), float(frame.timestamp), (rows, cols))

    def encode_frame(self, frame, reference: CameraPose | None = None) -> ImageTokenBatch:
        """All cameras of a frame, concatenated in camera order."""
        parts = [self(frame, c, reference) for c in range(frame.num_cameras)]
        return ImageTokenBatch(nx.concat([b.tokens for b in parts], axis=0),
                               np.concatenate([b.ray_dirs for b in parts]),
                               np.concatenate([b.ray_moments for b in parts]),
                               np.concatenate([b.ray_origins for b in parts]),
                               np.concatenate([b.camera_index for b in parts]),
                               float(frame.timestamp), parts[0].patch_grid)


# -- box tokens ----------------------------------------------------------------------------
@dataclass
class BoxToken:
    object_id: int
    embedding: Tensor
    pose_at_t: np.ndarray
    size: np.ndarray


_CORNER_SIGNS = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)


def box_coordinates(pose: np.ndarray, size: np.ndarray) -> np.ndarray:
    """Center followed by the 8 corners, flattened to 27 values."""
    pose = np.asarray(pose, dtype=np.float64)
    corners = (_CORNER_SIGNS * (np.asarray(size) / 2)) @ pose[:3, :3].T + pose[:3, 3]
    return np.concatenate([pose[:3, 3][None], corners]).reshape(-1)


def box_salience(pose: np.ndarray, size: np.ndarray, ego: np.ndarray) -> float:
    """Volume over distance to the ego camera (stand-in for sensor point counts)."""
    dist = float(np.linalg.norm(np.asarray(pose)[:3, 3] - ego))
    return float(np.prod(size)) / max(dist, 1e-3)


def select_boxes(tracks: Sequence, t: float, ego: np.ndarray, limit: int = MAX_BOXES) -> list:
    """Indices of the kept tracks: top ``limit`` by salience, ties by ascending object id."""
    scored = []
    for k, tr in enumerate(tracks):
        scored.append((-box_salience(tr.pose_at(t), tr.size, ego), int(tr.object_id), k))
    scored.sort()
    return [k for _, _, k in scored[:max(limit, 0)]]


class BoxEncoder(nx.Module):
    def __init__(self, dim: int, rng: np.random.Generator, levels: int = FOURIER_LEVELS):
        self._freqs = fourier_frequencies(levels)
        self.mlp = nx.MLP(27 * 2 * levels, dim, dim, rng)

    def embed(self, coords: np.ndarray) -> Tensor:
        return self.mlp(fourier_features(nx.Tensor(np.asarray(coords, dtype=nx.get_default_dtype())), self._freqs))

    def __call__(self, tracks: Sequence, t: float, reference: CameraPose | None = None,
                 limit: int = MAX_BOXES) -> tuple[list[BoxToken], Tensor | None]:
        if not tracks or limit <= 0:
            return [], None
        ego = reference.center if reference is not None else np.zeros(3)
        keep = select_boxes(tracks, t, ego, limit)
        to_local = invert_rigid(reference.world_from_camera) if reference is not None else np.eye(4)
        poses = [to_local @ tracks[k].pose_at(t) for k in keep]
        coords = np.stack([box_coordinates(p, tracks[k].size) for p, k in zip(poses, keep)])
        emb = self.embed(coords)
        out = [BoxToken(int(tracks[k].object_id), emb[i], poses[i], tracks[k].size.copy()) for i, k in enumerate(keep)]
        return out, emb


# -- scene tokens ---------------------------------------------------------------------------
class SceneEncoder(nx.Module):
    """feature + MLP(Fourier(local position)) + sinusoid(birth time)."""

    def __init__(self, dim: int, rng: np.random.Generator, levels: int = FOURIER_LEVELS):
        self.dim = int(dim)
        self._freqs = fourier_frequencies(levels)
        self.pos_mlp = nx.MLP(3 * 2 * levels, dim, dim, rng)

    def position_encoding(self, local_positions) -> Tensor:
        return self.pos_mlp(fourier_features(local_positions, self._freqs))

    def __call__(self, features, local_positions, birth_times) -> Tensor:
        features = nx.as_tensor(features)
        if features.shape[0] == 0:
            return nx.Tensor(np.zeros((0, self.dim), dtype=nx.get_default_dtype()))
        if features.shape[-1] != self.dim:
            raise ContractError(f"scene feature dim {features.shape[-1]} != {self.dim}")
        return features + self.position_encoding(local_positions) + sinusoid(birth_times, self.dim)


# -- auxiliary tokens ---------------------------------------------------------------------------
@dataclass
class AuxTokens:
    sky: Tensor
    affine: Tensor

    def detach(self) -> "AuxTokens":
        return AuxTokens(self.sky.detach(), self.affine.detach())


class AuxInit(nx.Module):
    """Learned initial sky tokens and one affine token per camera."""

    def __init__(self, dim: int, num_cameras: int, rng: np.random.Generator, n_sky: int = N_SKY):
        self.sky = nx.parameter(rng.normal(0, 0.02, size=(n_sky, dim)))
        self.affine = nx.parameter(rng.normal(0, 0.02, size=(num_cameras, dim)))

    def __call__(self) -> AuxTokens:
        return AuxTokens(self.sky, self.affine)
