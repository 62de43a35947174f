"""EWA projection of 3D Gaussians and image formation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import numerics as nx
from ..geometry import CameraPose, Intrinsics, pixel_rays
from ..numerics import Tensor
from .gaussians import GaussianSet, sky_color
from .raster import rasterize

COV_EPS = 0.3
FRUSTUM_SLACK = 1.3


@dataclass
class RenderOutput:
    rgb: Tensor
    depth: Tensor
    alpha: Tensor

    def numpy(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.rgb.data, self.depth.data, self.alpha.data


@dataclass
class Projected:
    means: Tensor
    conic: Tensor
    depth: Tensor
    radius: np.ndarray
    rows: np.ndarray


def quat_to_rotmat(q: Tensor) -> Tensor:
    """(N, 4) quaternions (normalised here) to (N, 3, 3) rotation matrices."""
    n = q.shape[0]
    norm = nx.sqrt(nx.reduce_sum(nx.square(q), axis=1, keepdims=True))
    q = q / nx.broadcast_to(norm, (n, 4))
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    rows = [1.0 - 2.0 * (yy + zz), 2.0 * (xy - wz), 2.0 * (xz + wy),
            2.0 * (xy + wz), 1.0 - 2.0 * (xx + zz), 2.0 * (yz - wx),
            2.0 * (xz - wy), 2.0 * (yz + wx), 1.0 - 2.0 * (xx + yy)]
    return nx.reshape(nx.stack(rows, axis=1), (n, 3, 3))


def project_gaussians(gs: GaussianSet, pose: CameraPose, K: Intrinsics) -> Projected:
    """Camera-space covariance R diag(s²) Rᵀ pushed through the perspective Jacobian.

    Gaussians outside the depth range or whose footprint misses the image
    are dropped; ``rows`` indexes the survivors in ``gs``.
    """
    cfw = pose.camera_from_world()
    dtype = gs.mu.dtype
    with nx.no_grad():
        pc_np = gs.mu.data @ cfw[:3, :3].T.astype(dtype) + cfw[:3, 3].astype(dtype)
    z_np = pc_np[:, 2] if len(pc_np) else np.zeros(0)
    rows = np.flatnonzero((z_np > K.near) & (z_np < K.far))
    if len(rows) < len(gs):
        gs = gs.subset(rows)
    n = len(rows)
    w_rot = cfw[:3, :3].astype(dtype)
    pc = nx.matmul(gs.mu, nx.Tensor(w_rot.T.copy())) + cfw[:3, 3].astype(dtype)
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    inv_z = 1.0 / z
    # the Jacobian is evaluated with the view direction clamped to a slightly enlarged frustum
    pad_x = (FRUSTUM_SLACK - 1.0) * K.width / (2.0 * K.fx)
    pad_y = (FRUSTUM_SLACK - 1.0) * K.height / (2.0 * K.fy)
    tx = nx.clip(x * inv_z, -K.cx / K.fx - pad_x, (K.width - K.cx) / K.fx + pad_x)
    ty = nx.clip(y * inv_z, -K.cy / K.fy - pad_y, (K.height - K.cy) / K.fy + pad_y)
    u = x * inv_z * K.fx + K.cx
    v = y * inv_z * K.fy + K.cy
    means = nx.stack([u, v], axis=1)

    rot = nx.matmul(nx.Tensor(w_rot), quat_to_rotmat(gs.quat))
    s = nx.exp(gs.log_scale)
    m = rot * nx.broadcast_to(nx.reshape(s, (n, 1, 3)), (n, 3, 3))
    cov = nx.matmul(m, nx.swapaxes(m, 1, 2))
    zero = z * 0.0
    j = nx.reshape(nx.stack([K.fx * inv_z, zero, -K.fx * tx * inv_z,
                             zero, K.fy * inv_z, -K.fy * ty * inv_z], axis=1), (n, 2, 3))
    cov2 = nx.matmul(nx.matmul(j, cov), nx.swapaxes(j, 1, 2))
    a = cov2[:, 0, 0] + COV_EPS
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + COV_EPS
    det = a * c - b * b
    conic = nx.stack([c / det, nx.neg(b) / det, a / det], axis=1)

    ad, bd, cd = a.data.astype(np.float64), b.data.astype(np.float64), c.data.astype(np.float64)
    mid = 0.5 * (ad + cd)
    lam = mid + np.sqrt(np.maximum(0.1, mid * mid - (ad * cd - bd * bd)))
    radius = np.ceil(3.0 * np.sqrt(lam))
    md = means.data
    on_image = ((md[:, 0] + radius > 0) & (md[:, 0] - radius < K.width)
                & (md[:, 1] + radius > 0) & (md[:, 1] - radius < K.height))
    if not np.all(on_image):
        keep = np.flatnonzero(on_image)
        return Projected(means[keep], conic[keep], z[keep], radius[keep], rows[keep])
    return Projected(means, conic, z, radius, rows)


def render(gs: GaussianSet, pose: CameraPose, K: Intrinsics, sky_weights=None, affine=None,
           backend: str | None = None) -> RenderOutput:
    """Render ``gs`` (already moved to the render time) from one camera.

    ``sky_weights`` are decoded sky-MLP weights (or None for a black
    background); ``affine`` is an (A, b) colour transform applied last.
    """
    dtype = gs.mu.dtype if len(gs) else nx.get_default_dtype()
    h, w = K.height, K.width
    proj = project_gaussians(gs, pose, K) if len(gs) else None
    if proj is not None and len(proj.rows):
        opacity = gs.effective_opacity()[proj.rows]
        color = gs.color[proj.rows]
        order = np.lexsort((gs.uid[proj.rows], proj.depth.data))
        if not np.array_equal(order, np.arange(len(order))):
            proj = Projected(proj.means[order], proj.conic[order], proj.depth[order], proj.radius[order],
                             proj.rows[order])
            opacity, color = opacity[order], color[order]
        img = rasterize(proj.means, proj.conic, opacity, color, proj.depth, proj.radius, w, h, backend)
        comp, dep, alpha = img[..., 0:3], img[..., 3], img[..., 4]
    else:
        comp = nx.Tensor(np.zeros((h, w, 3), dtype=dtype))
        dep = nx.Tensor(np.zeros((h, w), dtype=dtype))
        alpha = nx.Tensor(np.zeros((h, w), dtype=dtype))
    trans = 1.0 - alpha
    if sky_weights is not None:
        dirs, _ = pixel_rays(pose, K)
        sky = sky_color(dirs, sky_weights)
        rgb = comp + nx.broadcast_to(nx.reshape(trans, (h, w, 1)), (h, w, 3)) * sky
    else:
        rgb = comp
    if affine is not None:
        a_mat, b_vec = affine
        rgb = nx.reshape(nx.matmul(nx.reshape(rgb, (h * w, 3)), nx.transpose(a_mat)) + b_vec, (h, w, 3))
    depth = dep + trans * float(K.far)
    return RenderOutput(rgb, depth, alpha)


def lifespan_map(gs: GaussianSet, pose: CameraPose, K: Intrinsics, backend: str | None = None) -> np.ndarray:
    """Alpha-composited lifespan β per pixel (diagnostic image, seconds)."""
    return _feature_map(gs, pose, K, gs.beta.data.reshape(-1, 1), backend)[..., 0]


def assignment_map(gs: GaussianSet, pose: CameraPose, K: Intrinsics, backend: str | None = None) -> np.ndarray:
    """Alpha-composited probability of being dynamic (1 - static weight) per pixel."""
    dyn = 1.0 - gs.weights.data[:, -1:]
    return _feature_map(gs, pose, K, dyn, backend)[..., 0]


def _feature_map(gs: GaussianSet, pose, K, values: np.ndarray, backend) -> np.ndarray:
    with nx.no_grad():
        if len(gs) == 0:
            return np.zeros((K.height, K.width, 3))
        vals = np.repeat(np.asarray(values, np.float64)[:, :1], 3, axis=1)
        colored = GaussianSet(gs.mu, gs.log_scale, gs.quat, gs.opacity_logit, nx.Tensor(vals.astype(gs.mu.dtype)),
                              gs.beta, gs.t0, gs.weights, gs.source_token, gs.uid, gs.opacity)
        out = render(colored, pose, K, None, None, backend)
        alpha = np.maximum(out.alpha.data, 1e-6)[..., None]
        return out.rgb.data / alpha


__all__ = ["COV_EPS", "Projected", "RenderOutput", "assignment_map", "lifespan_map", "project_gaussians",
           "quat_to_rotmat", "render"]
