import hashlib
import os
import shutil
from pathlib import Path

import numpy as np
import pytest

from recon4d import synthdata
from recon4d.errors import ContractError, FormatError
from recon4d.synthdata import Scene, SceneSpec, load, read_tracks

from conftest import TINY_SPEC


def tree_digest(root: Path) -> dict:
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = Path(dirpath) / f
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def test_split_counts():
    spec = SceneSpec(duration=2.0)
    assert spec.num_frames == 20
    assert spec.context_indices() == [0, 5, 10, 15]
    assert len(spec.target_indices()) == 16
    with pytest.raises(ContractError):
        SceneSpec(ego_path="zigzag").validate()
    with pytest.raises(ContractError):
        SceneSpec(actor_trajectories="teleport").validate()


def test_determinism_and_seed(tmp_path, tiny_dataset_dir):
    synthdata.generate(SceneSpec(**TINY_SPEC), tmp_path / "again")
    assert tree_digest(tmp_path / "again") == tree_digest(tiny_dataset_dir)
    synthdata.generate(SceneSpec(**dict(TINY_SPEC, seed=4)), tmp_path / "other")
    assert tree_digest(tmp_path / "other") != tree_digest(tiny_dataset_dir)


def test_round_trip(tiny_dataset, tiny_dataset_dir):
    back = load(tiny_dataset_dir)
    assert back.spec == tiny_dataset.spec
    assert back.context == tiny_dataset.context and back.targets == tiny_dataset.targets
    for a, b in zip(tiny_dataset.frames, back.frames):
        assert a.index == b.index and a.timestamp == b.timestamp
        for c in range(a.num_cameras):
            assert a.images[c].tobytes() == b.images[c].tobytes()
            assert a.poses[c].world_from_camera.tobytes() == b.poses[c].world_from_camera.tobytes()
            assert a.intrinsics[c] == b.intrinsics[c]
            np.testing.assert_array_equal(a.sparse_depth[c], b.sparse_depth[c])
            np.testing.assert_array_equal(a.sky_masks[c], b.sky_masks[c])
            np.testing.assert_array_equal(a.dynamic_masks[c], b.dynamic_masks[c])
        for (ia, pa, sa), (ib, pb, sb) in zip(a.boxes, b.boxes):
            assert ia == ib
            np.testing.assert_array_equal(pa, pb)
            np.testing.assert_array_equal(sa, sb)


def test_box_poses_match_trajectories(tiny_dataset_dir):
    data = load(tiny_dataset_dir)
    scene = Scene(data.spec)
    tracks = read_tracks(tiny_dataset_dir / "tracks.bin")
    for fr in data.frames:
        assert len(fr.boxes) == data.spec.num_actors
        for (oid, pose, _), tr in zip(fr.boxes, tracks):
            np.testing.assert_allclose(pose, tr.pose_at(fr.timestamp), atol=1e-6)
            np.testing.assert_allclose(pose, scene.actor_pose(oid, fr.timestamp), atol=1e-5)


@pytest.mark.parametrize("victim", ["depth.bin", "cam_1.png", "sky_0.mask"])
def test_truncated_frame_file(tmp_path, tiny_dataset_dir, victim):
    root = tmp_path / "d"
    shutil.copytree(tiny_dataset_dir, root)
    p = root / "frame_00003" / victim
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(FormatError, match="frame_00003"):
        load(root)


def test_schema_mismatch(tmp_path, tiny_dataset_dir):
    root = tmp_path / "d"
    shutil.copytree(tiny_dataset_dir, root)
    txt = (root / "spec.txt").read_text().replace("schema_version=1", "schema_version=9")
    (root / "spec.txt").write_text(txt)
    with pytest.raises(FormatError):
        load(root)


def test_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        synthdata.generate(SceneSpec(**TINY_SPEC), blocker / "sub")


def test_zero_actors():
    data = synthdata.build(SceneSpec(**dict(TINY_SPEC, num_actors=0, duration=0.3)))
    assert data.tracks == []
    assert all(fr.boxes == [] for fr in data.frames)
    assert all(not m.any() for fr in data.frames for m in fr.dynamic_masks)


def _surface_distance(scene: Scene, p: np.ndarray, t: float) -> float:
    best = abs(p[2])  # ground plane
    for box in scene.boxes_at(t):
        local = (p - box.pose[:3, 3]) @ box.pose[:3, :3]
        half = box.size / 2
        outside = np.maximum(np.abs(local) - half, 0)
        inside = np.min(half - np.abs(local))
        best = min(best, float(np.linalg.norm(outside)) if np.any(outside > 0) else float(inside))
    return best


def test_sparse_depth_on_surfaces(tiny_dataset):
    scene = Scene(tiny_dataset.spec)
    for fr in tiny_dataset.frames[::3]:
        for c in range(fr.num_cameras):
            K, pose = fr.intrinsics[c], fr.poses[c]
            d = fr.sparse_depth[c]
            assert len(d) > 0
            assert np.all((d[:, 0] >= 0) & (d[:, 0] < K.width) & (d[:, 1] >= 0) & (d[:, 1] < K.height))
            assert np.all((d[:, 2] > K.near) & (d[:, 2] < K.far))
            for u, v, z in d:
                pc = np.array([(u + 0.5 - K.cx) / K.fx * z, (v + 0.5 - K.cy) / K.fy * z, z])
                pw = pose.rotation @ pc + pose.center
                assert _surface_distance(scene, pw, fr.timestamp) < 1e-3


def _ray_hits_anything(scene: Scene, origin, direction, t, far) -> bool:
    if direction[2] < -1e-9 and -origin[2] / direction[2] < far:
        return True
    for box in scene.boxes_at(t):
        o = (origin - box.pose[:3, 3]) @ box.pose[:3, :3]
        d = direction @ box.pose[:3, :3]
        lo, hi = 0.0, far
        for k in range(3):
            h = box.size[k] / 2
            if abs(d[k]) < 1e-12:
                if abs(o[k]) > h:
                    break
                continue
            a, b = sorted(((-h - o[k]) / d[k], (h - o[k]) / d[k]))
            lo, hi = max(lo, a), min(hi, b)
        else:
            if lo <= hi:
                return True
    return False


def test_sky_mask_is_exactly_ray_misses(tiny_dataset):
    scene = Scene(tiny_dataset.spec)
    fr = tiny_dataset.frames[4]
    for c in range(fr.num_cameras):
        K, pose = fr.intrinsics[c], fr.poses[c]
        mask = fr.sky_masks[c]
        assert mask.any() and not mask.all()
        for v in range(K.height):
            for u in range(K.width):
                d = pose.rotation @ np.array([(u + 0.5 - K.cx) / K.fx, (v + 0.5 - K.cy) / K.fy, 1.0])
                d /= np.linalg.norm(d)
                assert mask[v, u] == (not _ray_hits_anything(scene, pose.center, d, fr.timestamp, K.far))


def test_actor_image_motion_matches_projected_velocity():
    spec = SceneSpec(seed=5, duration=3.0, width=64, height=32, num_static=0, depth_samples=16, num_actors=1,
                     actor_trajectories="turning", actor_flash=False, num_cameras=1, ego_speed=0.0)
    data = synthdata.build(spec)
    scene = Scene(spec)
    checked = 0
    for a, b in zip(data.frames, data.frames[5:]):
        ma, mb = a.dynamic_masks[0], b.dynamic_masks[0]
        if ma.sum() < 10 or mb.sum() < 10 or ma[:, [0, -1]].any() or mb[:, [0, -1]].any():
            continue
        K, pose = a.intrinsics[0], a.poses[0]

        def project(t):
            pc = pose.rotation.T @ (scene.actor_pose(0, t)[:3, 3] - pose.center)
            return K.fx * pc[0] / pc[2] + K.cx

        du_proj = project(b.timestamp) - project(a.timestamp)
        du_img = np.nonzero(mb)[1].mean() - np.nonzero(ma)[1].mean()
        if abs(du_proj) > 1.0:
            assert np.sign(du_img) == np.sign(du_proj)
            checked += 1
    assert checked > 0
