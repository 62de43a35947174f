"""Procedural dynamic driving scenes with analytic ground truth.

Scenes are built from a ground plane, static textured boxes lining a road, and
box-shaped actors that follow keyed trajectories. Images are produced by
exact ray casting against that geometry, so supervision never depends on the
learned renderer.

World frame: x forward along the road, y left, z up. Ground is z = 0.

Dataset layout on disk (all binary files little-endian)::

    spec.txt                  key=value manifest (schema_version, cameras, split)
    tracks.bin                u32 count; per object: u32 id, 3 f32 size,
                              u32 keys, keys x (f32 time, 16 f32 pose rows)
    frame_00000/cam_0.png     8-bit RGB
    frame_00000/cam_0.pose    16 f32 values as text (world_from_camera rows)
    frame_00000/depth.bin     u32 cameras; per camera: u32 n, n x (u16 u, u16 v, f32 depth)
    frame_00000/sky_0.mask    u16 H, u16 W, bit-packed row-major mask
    frame_00000/dyn_0.mask    same layout; pixels showing a moving actor
"""
from __future__ import annotations

import os
import shutil
import struct
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .dynamics import ObjectTrack
from .errors import ContractError, FormatError
from .geometry import CameraPose, Intrinsics, make_transform, rot_x, rot_z

SCHEMA_VERSION = 1
CONTEXT_STRIDE = 5
TRAJECTORIES = ("constant", "turning", "stop_and_go")


@dataclass
class SceneSpec:
    seed: int = 0
    duration: float = 2.0
    frame_rate: float = 10.0
    ego_path: str = "straight"
    ego_speed: float = 6.0
    ego_yaw_rate: float = 0.08
    num_static: int = 14
    static_extent: float = 60.0
    num_actors: int = 2
    actor_trajectories: str = "constant,turning"
    actor_flash: bool = True
    num_cameras: int = 3
    camera_yaw_deg: float = 45.0
    hfov_deg: float = 60.0
    width: int = 96
    height: int = 64
    depth_samples: int = 512
    camera_height: float = 1.6
    camera_pitch_deg: float = 4.0
    texture_cell: float = 2.0
    texture_amp: float = 0.12

    @property
    def num_frames(self) -> int:
        return int(round(self.duration * self.frame_rate))

    def context_indices(self) -> list[int]:
        return list(range(0, self.num_frames, CONTEXT_STRIDE))

    def target_indices(self) -> list[int]:
        ctx = set(self.context_indices())
        return [i for i in range(self.num_frames) if i not in ctx]

    # -- key=value manifest ----------------------------------------------------------
    def to_lines(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name}={int(v) if isinstance(v, bool) else v}")
        return out

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "SceneSpec":
        spec = cls()
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            default = getattr(spec, f.name)
            if isinstance(default, bool):
                val = raw.strip().lower() in ("1", "true", "yes")
            else:
                val = type(default)(raw)
            setattr(spec, f.name, val)
        spec.validate()
        return spec

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "SceneSpec":
        return cls.from_mapping(read_kv(path))

    def validate(self) -> None:
        if self.duration <= 0 or self.frame_rate <= 0:
            raise ContractError("duration and frame_rate must be positive")
        if self.num_cameras not in (1, 2, 3):
            raise ContractError("between one and three cameras are supported")
        if self.ego_path not in ("straight", "arc"):
            raise ContractError(f"unknown ego_path {self.ego_path!r}")
        for kind in self.trajectory_list():
            if kind not in TRAJECTORIES:
                raise ContractError(f"unknown actor trajectory {kind!r}")

    def trajectory_list(self) -> list[str]:
        kinds = [k.strip() for k in self.actor_trajectories.split(",") if k.strip()] or ["constant"]
        return [kinds[i % len(kinds)] for i in range(self.num_actors)]


def read_kv(path: str | os.PathLike) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"no such file: {p}")
    kv = {}
    for ln, line in enumerate(p.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{p}:{ln}: expected key=value")
        k, v = line.split("=", 1)
        kv[k.strip()] = v.strip()
    return kv


@dataclass
class Box:
    """An oriented box primitive for the ray caster."""

    pose: np.ndarray
    size: np.ndarray
    color: np.ndarray
    seed: int
    actor: int = -1


@dataclass
class FrameObservation:
    index: int
    timestamp: float
    images: list
    poses: list
    intrinsics: list
    sparse_depth: list
    sky_masks: list | None
    boxes: list
    dynamic_masks: list | None = None
    source: str = ""
    missing: list = field(default_factory=list)

    @property
    def num_cameras(self) -> int:
        return len(self.images)

    def require_sky_masks(self) -> list:
        if self.sky_masks is None:
            name = self.missing[0] if self.missing else f"frame_{self.index:05d}/sky_*.mask"
            raise ContractError(f"sky mask missing: {name}")
        return self.sky_masks


@dataclass
class Dataset:
    spec: SceneSpec
    frames: list
    tracks: list
    context: list
    targets: list
    root: str = ""

    def context_frames(self) -> list:
        return [self.frames[i] for i in self.context]

    def target_frames(self) -> list:
        return [self.frames[i] for i in self.targets]


# -- procedural content ------------------------------------------------------------
def _hash(ix, iy, seed) -> np.ndarray:
    h = (np.asarray(ix, np.int64) * 374761393 + np.asarray(iy, np.int64) * 668265263 + seed * 2147483647) & 0xFFFFFFFF
    h = (h ^ (h >> 13)) * 1274126177 & 0xFFFFFFFF
    h = h ^ (h >> 16)
    return (h & 0xFFFF) / 65535.0


def value_noise(s: np.ndarray, t: np.ndarray, seed: int) -> np.ndarray:
    """Smooth lattice noise in [0, 1] at unit cell size."""
    i0, j0 = np.floor(s), np.floor(t)
    fs, ft = s - i0, t - j0
    fs = fs * fs * (3 - 2 * fs)
    ft = ft * ft * (3 - 2 * ft)
    a = _hash(i0, j0, seed)
    b = _hash(i0 + 1, j0, seed)
    c = _hash(i0, j0 + 1, seed)
    d = _hash(i0 + 1, j0 + 1, seed)
    return (a * (1 - fs) + b * fs) * (1 - ft) + (c * (1 - fs) + d * fs) * ft


SUN = np.array([0.4, 0.3, 0.866])
SUN = SUN / np.linalg.norm(SUN)


def sky_color(directions: np.ndarray) -> np.ndarray:
    elev = np.clip(directions[..., 2], -0.2, 1.0)
    u = np.clip(elev / 0.6, 0.0, 1.0)[..., None]
    horizon = np.array([0.85, 0.88, 0.92])
    zenith = np.array([0.35, 0.55, 0.85])
    return horizon * (1 - u) + zenith * u


class Scene:
    """Static layout plus actor trajectories for one spec."""

    def __init__(self, spec: SceneSpec):
        spec.validate()
        self.spec = spec
        rng = np.random.default_rng(spec.seed)
        length = spec.ego_speed * spec.duration
        self.statics: list[Box] = []
        palette = np.array([[0.75, 0.55, 0.45], [0.55, 0.6, 0.7], [0.8, 0.78, 0.65],
                            [0.5, 0.65, 0.5], [0.7, 0.5, 0.6], [0.6, 0.6, 0.6]])
        for k in range(spec.num_static):
            side = 1 if k % 2 == 0 else -1
            x = rng.uniform(-5, length + spec.static_extent)
            y = side * rng.uniform(7.5, 13.0)
            size = np.array([rng.uniform(4, 10), rng.uniform(3, 6), rng.uniform(3, 9)])
            yaw = rng.uniform(-0.15, 0.15)
            pose = make_transform(rot_z(yaw), [x, y, size[2] / 2])
            self.statics.append(Box(pose, size, palette[rng.integers(len(palette))], seed=1000 + k))
        self.actor_kinds = spec.trajectory_list()
        self.actor_params = []
        actor_colors = np.array([[0.85, 0.15, 0.1], [0.1, 0.3, 0.85], [0.9, 0.75, 0.1], [0.1, 0.7, 0.3]])
        for a, kind in enumerate(self.actor_kinds):
            lane = 1.8 if a % 2 == 0 else -1.8
            x0 = rng.uniform(10, 20) + 6 * a
            speed = rng.uniform(3.0, 6.0) * (1 if lane < 0 else -0.6)
            self.actor_params.append(dict(kind=kind, lane=lane, x0=x0, speed=speed,
                                          color=actor_colors[a % len(actor_colors)],
                                          size=np.array([4.4, 1.9, 1.5], np.float32).astype(np.float64)))
        self.ground_seed = 77 + spec.seed

    # -- trajectories --------------------------------------------------------------------
    def ego_pose(self, t: float) -> np.ndarray:
        s = self.spec
        if s.ego_path == "straight":
            return make_transform(np.eye(3), [s.ego_speed * t, 0.0, 0.0])
        w = s.ego_yaw_rate
        r = s.ego_speed / w
        yaw = w * t
        return make_transform(rot_z(yaw), [r * np.sin(yaw), r * (1 - np.cos(yaw)), 0.0])

    def camera_poses(self, t: float) -> list[CameraPose]:
        s = self.spec
        yaws = [0.0, np.radians(s.camera_yaw_deg), -np.radians(s.camera_yaw_deg)][:s.num_cameras]
        ego = self.ego_pose(t)
        # camera axes in the ego frame: x right, y down, z forward
        base = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
        pitch = rot_x(np.radians(s.camera_pitch_deg))
        out = []
        for yaw in yaws:
            r = rot_z(yaw) @ base @ pitch
            m = ego @ make_transform(r, [0.0, 0.0, s.camera_height])
            out.append(CameraPose(_f32_rigid(m), t))
        return out

    def intrinsics(self) -> Intrinsics:
        s = self.spec
        return Intrinsics.from_fov(s.width, s.height, s.hfov_deg)

    def actor_pose(self, a: int, t: float) -> np.ndarray:
        p = self.actor_params[a]
        kind, v = p["kind"], p["speed"]
        if kind == "constant":
            x, y, yaw = p["x0"] + v * t, p["lane"], 0.0 if v >= 0 else np.pi
        elif kind == "stop_and_go":
            # speed oscillates between 0 and 2|v|
            period = 2.0
            dist = abs(v) * (t - period / (2 * np.pi) * np.sin(2 * np.pi * t / period))
            x, y, yaw = p["x0"] + np.sign(v) * dist, p["lane"], 0.0 if v >= 0 else np.pi
        else:
            w = 0.35
            r = abs(v) / w
            ang = w * t
            x = p["x0"] + r * np.sin(ang)
            y = p["lane"] + r * (1 - np.cos(ang)) * np.sign(p["lane"])
            yaw = ang * np.sign(p["lane"])
        return make_transform(rot_z(yaw), [x, y, p["size"][2] / 2])

    def actor_color(self, a: int, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Body color and the color of the roof beacon (which blinks when flash is on)."""
        body = self.actor_params[a]["color"]
        if not self.spec.actor_flash:
            return body, body
        on = 0.5 + 0.5 * np.cos(2 * np.pi * t / 0.8 + a)
        beacon = np.array([1.0, 0.95, 0.6]) * on + np.array([0.15, 0.15, 0.2]) * (1 - on)
        return body, beacon

    def tracks(self, times: np.ndarray) -> list[ObjectTrack]:
        out = []
        for a, p in enumerate(self.actor_params):
            poses = np.stack([_f32_rigid(self.actor_pose(a, float(t))) for t in times])
            out.append(ObjectTrack(a, np.asarray(times, np.float32).astype(np.float64), poses, p["size"]))
        return out

    # -- ray casting --------------------------------------------------------------------
    def boxes_at(self, t: float) -> list[Box]:
        boxes = list(self.statics)
        for a, p in enumerate(self.actor_params):
            boxes.append(Box(self.actor_pose(a, t), p["size"], p["color"], seed=500 + a, actor=a))
        return boxes

    def cast(self, origins: np.ndarray, dirs: np.ndarray, t: float, far: float):
        """Return (hit distance along ray, rgb, actor id or -1, hit flag) per ray."""
        n = len(dirs)
        best = np.full(n, np.inf)
        rgb = np.zeros((n, 3))
        actor = np.full(n, -1)
        # ground
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = -origins[:, 2] / dirs[:, 2]
        ok = (dirs[:, 2] < -1e-9) & (tg > 0)
        best[ok] = tg[ok]
        kind = np.where(ok, 0, -1)
        for bi, box in enumerate(self.boxes_at(t)):
            m = box.pose
            o_l = (origins - m[:3, 3]) @ m[:3, :3]
            d_l = dirs @ m[:3, :3]
            half = box.size / 2
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / d_l
                t1 = (-half - o_l) * inv
                t2 = (half - o_l) * inv
            tmin = np.nanmax(np.minimum(t1, t2), axis=1)
            tmax = np.nanmin(np.maximum(t1, t2), axis=1)
            hit = (tmax >= tmin) & (tmin > 1e-6) & (tmin < best)
            best[hit] = tmin[hit]
            kind[hit] = bi + 1
        hitmask = np.isfinite(best) & (best < far)
        pts = origins + dirs * np.where(hitmask, best, 0.0)[:, None]
        boxes = self.boxes_at(t)
        s = self.spec
        g = hitmask & (kind == 0)
        if np.any(g):
            x, y = pts[g, 0], pts[g, 1]
            base = np.where(np.abs(y) < 4.0, 0.38, 0.58)
            tex = value_noise(x / s.texture_cell, y / s.texture_cell, self.ground_seed) - 0.5
            shade = 0.55 + 0.45 * SUN[2]
            rgb[g] = np.clip((base + s.texture_amp * tex * 2)[:, None] * shade * np.array([1.0, 1.0, 1.02]), 0, 1)
        for bi, box in enumerate(boxes):
            sel = hitmask & (kind == bi + 1)
            if not np.any(sel):
                continue
            m = box.pose
            local = (pts[sel] - m[:3, 3]) @ m[:3, :3]
            rel = local / (box.size / 2)
            axis = np.argmax(np.abs(rel), axis=1)
            normal_l = np.zeros_like(local)
            normal_l[np.arange(len(local)), axis] = np.sign(rel[np.arange(len(local)), axis])
            normal = normal_l @ m[:3, :3].T
            # texture coordinates: the two in-face axes
            a1 = np.where(axis == 0, local[:, 1], local[:, 0])
            a2 = np.where(axis == 2, local[:, 1], local[:, 2])
            tex = value_noise(a1 / s.texture_cell + 10 * axis, a2 / s.texture_cell, box.seed) - 0.5
            color = np.broadcast_to(box.color, (len(local), 3)).copy()
            if box.actor >= 0:
                body, beacon = self.actor_color(box.actor, t)
                color[:] = body
                roof = (axis == 2) & (rel[:, 2] > 0)
                color[roof] = beacon
                actor[sel] = box.actor
            shade = 0.55 + 0.45 * np.clip(normal @ SUN, 0, 1)
            rgb[sel] = np.clip(color * (1 + s.texture_amp * 2 * tex)[:, None] * shade[:, None], 0, 1)
        rgb[~hitmask] = sky_color(dirs[~hitmask])
        return np.where(hitmask, best, np.inf), rgb, actor, hitmask

    def render_frame(self, index: int) -> FrameObservation:
        s = self.spec
        t = index / s.frame_rate
        K = self.intrinsics()
        poses = self.camera_poses(t)
        rng = np.random.default_rng([s.seed, index, 7])
        images, depth, sky, dyn = [], [], [], []
        per_cam = [s.depth_samples // s.num_cameras + (1 if c < s.depth_samples % s.num_cameras else 0)
                   for c in range(s.num_cameras)]
        for c, pose in enumerate(poses):
            vs, us = np.meshgrid(np.arange(K.height), np.arange(K.width), indexing="ij")
            d_cam = np.stack([(us + 0.5 - K.cx) / K.fx, (vs + 0.5 - K.cy) / K.fy, np.ones_like(us, dtype=float)], -1)
            d_cam = d_cam.reshape(-1, 3)
            dirs = d_cam @ pose.rotation.T
            norm = np.linalg.norm(dirs, axis=1, keepdims=True)
            dirs_u = dirs / norm
            origins = np.broadcast_to(pose.center, dirs.shape).copy()
            dist, rgb, actor, hit = self.cast(origins, dirs_u, t, K.far)
            img = np.round(rgb.reshape(K.height, K.width, 3) * 255).astype(np.uint8).astype(np.float32) / 255.0
            images.append(img)
            sky.append(~hit.reshape(K.height, K.width))
            dyn.append((actor >= 0).reshape(K.height, K.width))
            zdepth = dist / norm[:, 0]  # d_cam has unit z, so ray distance / |d_cam| is camera z
            valid = np.flatnonzero(hit & (zdepth > K.near) & (zdepth < K.far))
            pick = rng.choice(valid, size=min(per_cam[c], len(valid)), replace=False) if len(valid) else valid
            pick = np.sort(pick)
            u, v = pick % K.width, pick // K.width
            depth.append(np.stack([u, v, zdepth[pick].astype(np.float32)], axis=1).astype(np.float64))
        return FrameObservation(index, float(np.float32(t)), images, poses, [K] * len(poses),
                                [_quantize_depth(d) for d in depth], sky, [], dyn)


def _f32_rigid(m: np.ndarray) -> np.ndarray:
    return np.asarray(m, dtype=np.float32).astype(np.float64)


def _quantize_depth(d: np.ndarray) -> np.ndarray:
    out = d.copy()
    out[:, 2] = out[:, 2].astype(np.float32)
    return out


def frame_boxes(tracks: list[ObjectTrack], t: float) -> list:
    return [(tr.object_id, tr.pose_at(t), tr.size.copy()) for tr in tracks]


def build(spec: SceneSpec) -> Dataset:
    """Generate a dataset in memory; the output depends only on ``spec``."""
    scene = Scene(spec)
    times = np.arange(spec.num_frames) / spec.frame_rate
    tracks = scene.tracks(times)
    frames = []
    for i in range(spec.num_frames):
        fr = scene.render_frame(i)
        fr.boxes = frame_boxes(tracks, fr.timestamp)
        frames.append(fr)
    return Dataset(spec, frames, tracks, spec.context_indices(), spec.target_indices())


# -- on-disk format --------------------------------------------------------------------
def _write_mask(path: Path, mask: np.ndarray) -> None:
    h, w = mask.shape
    path.write_bytes(struct.pack("<HH", h, w) + np.packbits(mask.astype(bool).reshape(-1)).tobytes())


def _read_mask(path: Path, frame_name: str) -> np.ndarray:
    buf = path.read_bytes()
    if len(buf) < 4:
        raise FormatError(f"{frame_name}/{path.name}: truncated mask")
    h, w = struct.unpack_from("<HH", buf)
    nbytes = (h * w + 7) // 8
    if len(buf) != 4 + nbytes:
        raise FormatError(f"{frame_name}/{path.name}: truncated mask")
    bits = np.unpackbits(np.frombuffer(buf, np.uint8, offset=4), count=h * w)
    return bits.reshape(h, w).astype(bool)


def write_tracks(path: Path, tracks: list[ObjectTrack]) -> None:
    chunks = [struct.pack("<I", len(tracks))]
    for tr in tracks:
        chunks.append(struct.pack("<I3fI", tr.object_id, *tr.size, len(tr.times)))
        for t, pose in zip(tr.times, tr.poses):
            chunks.append(struct.pack("<f", t) + np.asarray(pose, "<f4").tobytes())
    path.write_bytes(b"".join(chunks))


def read_tracks(path: Path) -> list[ObjectTrack]:
    buf = path.read_bytes()
    try:
        (n,) = struct.unpack_from("<I", buf)
        off, out = 4, []
        for _ in range(n):
            oid, sx, sy, sz, keys = struct.unpack_from("<I3fI", buf, off)
            off += 20
            times, poses = [], []
            for _ in range(keys):
                (t,) = struct.unpack_from("<f", buf, off)
                pose = np.frombuffer(buf, "<f4", 16, off + 4)
                if len(pose) != 16:
                    raise FormatError(f"{path.name}: truncated pose")
                times.append(np.float32(t))
                poses.append(pose.astype(np.float64).reshape(4, 4))
                off += 68
            out.append(ObjectTrack(oid, np.array(times, np.float64), np.stack(poses) if poses else np.zeros((0, 4, 4)),
                                   np.array([sx, sy, sz], np.float32).astype(np.float64)))
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path.name}: truncated or corrupt track file ({exc})") from None
    if off != len(buf):
        raise FormatError(f"{path.name}: trailing bytes")
    return out


def _pose_text(m: np.ndarray) -> str:
    return " ".join(repr(float(np.float32(x))) for x in np.asarray(m).reshape(-1)) + "\n"


def generate(spec: SceneSpec, out_dir: str | os.PathLike) -> Dataset:
    """Render ``spec`` and write it under ``out_dir`` (replacing earlier contents)."""
    return write(build(spec), out_dir)


def write(data: Dataset, out_dir: str | os.PathLike) -> Dataset:
    """Write an in-memory dataset under ``out_dir`` (replacing earlier contents)."""
    spec = data.spec
    root = Path(out_dir)
    try:
        if root.exists():
            shutil.rmtree(root)
        root.mkdir(parents=True)
    except OSError as exc:
        raise OSError(f"cannot write dataset to {root}: {exc}") from exc
    K = Scene(spec).intrinsics()
    lines = [f"schema_version={SCHEMA_VERSION}"] + spec.to_lines()
    lines += [f"num_frames={spec.num_frames}",
              "context=" + ",".join(map(str, data.context)),
              "targets=" + ",".join(map(str, data.targets))]
    for c in range(spec.num_cameras):
        lines += [f"cam{c}.{k}={float(getattr(K, k))!r}" for k in ("fx", "fy", "cx", "cy")]
        lines += [f"cam{c}.width={K.width}", f"cam{c}.height={K.height}",
                  f"cam{c}.near={float(K.near)!r}", f"cam{c}.far={float(K.far)!r}"]
    (root / "spec.txt").write_text("\n".join(lines) + "\n")
    write_tracks(root / "tracks.bin", data.tracks)
    for fr in data.frames:
        fdir = root / f"frame_{fr.index:05d}"
        fdir.mkdir()
        depth_chunks = [struct.pack("<I", fr.num_cameras)]
        for c in range(fr.num_cameras):
            Image.fromarray(np.round(fr.images[c] * 255).astype(np.uint8)).save(fdir / f"cam_{c}.png", optimize=False)
            (fdir / f"cam_{c}.pose").write_text(_pose_text(fr.poses[c].world_from_camera))
            _write_mask(fdir / f"sky_{c}.mask", fr.sky_masks[c])
            _write_mask(fdir / f"dyn_{c}.mask", fr.dynamic_masks[c])
            d = fr.sparse_depth[c]
            rec = np.zeros(len(d), dtype=[("u", "<u2"), ("v", "<u2"), ("d", "<f4")])
            rec["u"], rec["v"], rec["d"] = d[:, 0], d[:, 1], d[:, 2]
            depth_chunks.append(struct.pack("<I", len(d)) + rec.tobytes())
        (fdir / "depth.bin").write_bytes(b"".join(depth_chunks))
    data.root = str(root)
    return data


def load(path: str | os.PathLike) -> Dataset:
    root = Path(path)
    kv = read_kv(root / "spec.txt")
    version = int(kv.get("schema_version", -1))
    if version != SCHEMA_VERSION:
        raise FormatError(f"{root}/spec.txt: schema_version {version} != {SCHEMA_VERSION}")
    spec = SceneSpec.from_mapping(kv)
    n = int(kv["num_frames"])
    context = [int(x) for x in kv["context"].split(",") if x]
    targets = [int(x) for x in kv.get("targets", "").split(",") if x]
    cams = []
    for c in range(spec.num_cameras):
        g = lambda k: kv[f"cam{c}.{k}"]  # noqa: E731
        cams.append(Intrinsics(float(g("fx")), float(g("fy")), float(g("cx")), float(g("cy")),
                               int(g("width")), int(g("height")), float(g("near")), float(g("far"))))
    tracks = read_tracks(root / "tracks.bin") if (root / "tracks.bin").exists() else []
    frames = []
    for i in range(n):
        name = f"frame_{i:05d}"
        fdir = root / name
        if not fdir.is_dir():
            raise FormatError(f"{name}: frame directory missing")
        t = float(np.float32(i / spec.frame_rate))
        images, poses, sky, dyn, missing = [], [], [], [], []
        for c in range(spec.num_cameras):
            try:
                with Image.open(fdir / f"cam_{c}.png") as im:
                    im.verify()
                with Image.open(fdir / f"cam_{c}.png") as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            except (OSError, SyntaxError) as exc:
                raise FormatError(f"{name}/cam_{c}.png: unreadable image ({exc})") from None
            if arr.shape != (cams[c].height, cams[c].width, 3):
                raise FormatError(f"{name}/cam_{c}.png: size {arr.shape} does not match intrinsics")
            images.append(arr)
            vals = (fdir / f"cam_{c}.pose").read_text().split()
            if len(vals) != 16:
                raise FormatError(f"{name}/cam_{c}.pose: expected 16 values, got {len(vals)}")
            poses.append(CameraPose(np.array([float(v) for v in vals]).reshape(4, 4), t))
            sp = fdir / f"sky_{c}.mask"
            if sp.exists():
                sky.append(_read_mask(sp, name))
            else:
                missing.append(f"{name}/sky_{c}.mask")
            dp = fdir / f"dyn_{c}.mask"
            dyn.append(_read_mask(dp, name) if dp.exists() else None)
        depth = _read_depth(fdir / "depth.bin", name, spec.num_cameras)
        frames.append(FrameObservation(i, t, images, poses, cams, depth, None if missing else sky,
                                       frame_boxes(tracks, t), None if any(d is None for d in dyn) else dyn,
                                       source=str(fdir), missing=missing))
    return Dataset(spec, frames, tracks, context, targets, root=str(root))


def _read_depth(path: Path, frame_name: str, ncam: int) -> list:
    if not path.exists():
        raise FormatError(f"{frame_name}/depth.bin: missing")
    buf = path.read_bytes()
    rec = np.dtype([("u", "<u2"), ("v", "<u2"), ("d", "<f4")])
    try:
        (count,) = struct.unpack_from("<I", buf)
        if count != ncam:
            raise FormatError(f"{frame_name}/depth.bin: {count} cameras, expected {ncam}")
        off, out = 4, []
        for _ in range(count):
            (k,) = struct.unpack_from("<I", buf, off)
            off += 4
            if off + k * rec.itemsize > len(buf):
                raise FormatError(f"{frame_name}/depth.bin: truncated")
            r = np.frombuffer(buf, rec, k, off)
            off += k * rec.itemsize
            out.append(np.stack([r["u"], r["v"], r["d"]], axis=1).astype(np.float64))
    except struct.error:
        raise FormatError(f"{frame_name}/depth.bin: truncated") from None
    if off != len(buf):
        raise FormatError(f"{frame_name}/depth.bin: trailing bytes")
    return out
