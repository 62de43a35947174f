"""Cameras, rays, rigid transforms and quaternions.

Conventions: camera frame is +z forward, +x right, +y down; pixel (0, 0) is
the top-left pixel and its center sits at (0.5, 0.5). Quaternions are stored
(w, x, y, z) with w >= 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, SingularError

DEFAULT_NEAR = 0.1
DEFAULT_FAR = 200.0


@dataclass
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = DEFAULT_NEAR
    far: float = DEFAULT_FAR

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ContractError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise ContractError("need 0 < near < far")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float, **kw) -> "Intrinsics":
        fx = 0.5 * width / np.tan(np.radians(hfov_deg) / 2)
        return cls(fx, fx, width / 2.0, height / 2.0, width, height, **kw)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass
class CameraPose:
    world_from_camera: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        m = np.asarray(self.world_from_camera, dtype=np.float64)
        if m.shape != (4, 4):
            raise ContractError(f"pose must be 4x4, got {m.shape}")
        check_rigid(m)
        self.world_from_camera = m

    @property
    def center(self) -> np.ndarray:
        return self.world_from_camera[:3, 3]

    @property
    def rotation(self) -> np.ndarray:
        return self.world_from_camera[:3, :3]

    def camera_from_world(self) -> np.ndarray:
        return invert_rigid(self.world_from_camera)


@dataclass
class PluckerRay:
    direction: np.ndarray
    moment: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.direction, self.moment])


@dataclass
class RigidTransform:
    matrix: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        check_rigid(self.matrix)

    def inverse(self) -> "RigidTransform":
        return RigidTransform(invert_rigid(self.matrix))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.matrix @ other.matrix)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return transform_points(self.matrix, points)


# -- rigid helpers -----------------------------------------------------------------
def check_rigid(m: np.ndarray, tol: float = 1e-5) -> None:
    r = m[:3, :3]
    if not np.allclose(r @ r.T, np.eye(3), atol=tol) or np.linalg.det(r) < 0:
        raise ContractError("rotation block is not orthonormal")
    if not np.allclose(m[3], [0, 0, 0, 1], atol=tol):
        raise ContractError("last row of a rigid transform must be (0, 0, 0, 1)")


def make_transform(rotation: np.ndarray, translation) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = rotation
    m[:3, 3] = translation
    return m


def invert_rigid(m: np.ndarray) -> np.ndarray:
    r, t = m[..., :3, :3], m[..., :3, 3]
    out = np.zeros_like(m)
    rt = np.swapaxes(r, -1, -2)
    out[..., :3, :3] = rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", rt, t)
    out[..., 3, 3] = 1.0
    return out


def transform_points(m: np.ndarray, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points @ m[:3, :3].T + m[:3, 3]


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


# -- quaternions -------------------------------------------------------------------
def canonical_quat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0, -q, q)


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return m.reshape(q.shape[:-1] + (3, 3))


def matrix_to_quat(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to canonical quaternion (Shepperd's branch selection)."""
    r = np.asarray(r, dtype=np.float64)
    batch = r.shape[:-2]
    r = r.reshape(-1, 3, 3)
    out = np.empty((len(r), 4))
    for n, m in enumerate(r):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
        out[n] = q
    return canonical_quat(out).reshape(batch + (4,))


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def slerp(q0: np.ndarray, q1: np.ndarray, u: float) -> np.ndarray:
    q0, q1 = canonical_quat(q0), canonical_quat(q1)
    dot = float(np.dot(q0, q1))
    if dot < 0:
        q1, dot = -q1, -dot
    if dot > 0.9995:
        return canonical_quat(q0 + u * (q1 - q0))
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    s = np.sin(theta)
    return canonical_quat((np.sin((1 - u) * theta) * q0 + np.sin(u * theta) * q1) / s)


def nearest_rotation(m: np.ndarray) -> np.ndarray:
    """Quaternion of the rotation closest to ``m`` in Frobenius norm.

    Works on one 3x3 matrix or a batch (..., 3, 3). The closest rotation
    maximises trace(Rᵀ M); written in quaternion form that trace is a
    quadratic form whose top eigenvector is the answer, which always lands on
    the det = +1 branch.
    """
    m = np.asarray(m, dtype=np.float64)
    single = m.ndim == 2
    mb = m.reshape(-1, 3, 3)
    scale = np.abs(mb).max(axis=(1, 2))
    sv = np.linalg.svd(mb, compute_uv=False)
    if np.any(sv[:, -1] <= 1e-9 * np.maximum(scale, 1e-300)) or np.any(scale == 0):
        raise SingularError("nearest_rotation: rank-deficient input")
    a = mb / scale[:, None, None]
    sxx, sxy, sxz = a[:, 0, 0], a[:, 0, 1], a[:, 0, 2]
    syx, syy, syz = a[:, 1, 0], a[:, 1, 1], a[:, 1, 2]
    szx, szy, szz = a[:, 2, 0], a[:, 2, 1], a[:, 2, 2]
    # trace(R(q)^T M) = q^T N q for this symmetric N
    n = np.empty((len(a), 4, 4))
    n[:, 0, 0] = sxx + syy + szz
    n[:, 0, 1] = n[:, 1, 0] = szy - syz
    n[:, 0, 2] = n[:, 2, 0] = sxz - szx
    n[:, 0, 3] = n[:, 3, 0] = syx - sxy
    n[:, 1, 1] = sxx - syy - szz
    n[:, 1, 2] = n[:, 2, 1] = sxy + syx
    n[:, 1, 3] = n[:, 3, 1] = szx + sxz
    n[:, 2, 2] = -sxx + syy - szz
    n[:, 2, 3] = n[:, 3, 2] = syz + szy
    n[:, 3, 3] = -sxx - syy + szz
    _, vecs = np.linalg.eigh(n)
    q = canonical_quat(vecs[:, :, -1])
    return q[0] if single else q.reshape(m.shape[:-2] + (4,))


# -- rays and frusta ---------------------------------------------------------------
def pixel_ray(pose: CameraPose, K: Intrinsics, u: int, v: int) -> PluckerRay:
    if not (0 <= u < K.width and 0 <= v < K.height):
        raise ContractError(f"pixel ({u}, {v}) outside {K.width}x{K.height} image")
    d_cam = np.array([(u + 0.5 - K.cx) / K.fx, (v + 0.5 - K.cy) / K.fy, 1.0])
    d = pose.rotation @ d_cam
    d /= np.linalg.norm(d)
    o = pose.center
    return PluckerRay(d, np.cross(o, d))


def pixel_rays(pose: CameraPose | np.ndarray, K: Intrinsics, us=None, vs=None) -> tuple[np.ndarray, np.ndarray]:
    """Directions and moments for every pixel center (H, W, 3) or given pixels.

    ``pose`` may be a CameraPose or a raw 4x4 world_from_camera matrix (used
    when rays are expressed in a local frame).
    """
    m = pose.world_from_camera if isinstance(pose, CameraPose) else np.asarray(pose, dtype=np.float64)
    if us is None:
        vs, us = np.meshgrid(np.arange(K.height), np.arange(K.width), indexing="ij")
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    d_cam = np.stack([(us + 0.5 - K.cx) / K.fx, (vs + 0.5 - K.cy) / K.fy, np.ones_like(us)], axis=-1)
    d = d_cam @ m[:3, :3].T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(m[:3, 3], d.shape)
    return d, np.cross(o, d)


def project(points: np.ndarray, pose: CameraPose, K: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates (continuous, pixel-center convention) and camera depths."""
    pc = transform_points(pose.camera_from_world(), points)
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([K.fx * pc[..., 0] / z + K.cx, K.fy * pc[..., 1] / z + K.cy], axis=-1)
    return uv, z


def in_frustum(p, pose: CameraPose, K: Intrinsics) -> bool:
    return bool(in_frustum_mask(np.asarray(p, dtype=np.float64)[None], pose, K)[0])


def in_frustum_mask(points: np.ndarray, pose: CameraPose, K: Intrinsics,
                    camera_from_world: np.ndarray | None = None) -> np.ndarray:
    cfw = pose.camera_from_world() if camera_from_world is None else camera_from_world
    pc = np.asarray(points, dtype=np.float64) @ cfw[:3, :3].T + cfw[:3, 3]
    z = pc[:, 2]
    ok = (z >= K.near) & (z <= K.far)
    zs = np.where(ok, z, 1.0)
    u = K.fx * pc[:, 0] / zs + K.cx
    v = K.fy * pc[:, 1] / zs + K.cy
    return ok & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)


# -- local coordinate frames -------------------------------------------------------
def to_local(positions: np.ndarray, pose: CameraPose) -> np.ndarray:
    return transform_points(pose.camera_from_world(), positions)


def to_world(positions: np.ndarray, pose: CameraPose) -> np.ndarray:
    return transform_points(pose.world_from_camera, positions)
