import csv
import hashlib
import os
import shutil
from pathlib import Path

import numpy as np
import pytest
from PIL import Image
from scipy.spatial.transform import Rotation, Slerp

from recon4d import cli
from recon4d import numerics as nx
from recon4d.synthdata import load, read_tracks
from recon4d.trainer import (AdamW, ReconModel, TrainConfig, TrainState, decode, load_model, reconstruct,
                             save_checkpoint)
from recon4d.update_net import UpdateNetConfig

from conftest import TINY_SPEC

TINY_NET = UpdateNetConfig(layers=1, dim=16, heads=2, patch=8, budget=64)


def tree_digest(root: Path) -> dict:
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            p = Path(dirpath) / f
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def write_spec(path: Path, **over) -> Path:
    path.write_text("".join(f"{k}={v}\n" for k, v in {**TINY_SPEC, **over}.items()))
    return path


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "init.ufo"
    model = ReconModel(TINY_NET, 11)
    save_checkpoint(path, TrainState(0, model, AdamW(dict(model.named_parameters())), np.random.default_rng(0),
                                     TrainConfig(iterations=1)))
    return path


# -- gen-data --------------------------------------------------------------------------------
def test_missing_spec_exit_code(tmp_path, capsys):
    missing = tmp_path / "nope.txt"
    assert cli.main(["gen-data", "--spec", str(missing), "--out", str(tmp_path / "d")]) == 2
    assert str(missing) in capsys.readouterr().err


def test_two_second_spec_gives_twenty_frames(tmp_path):
    spec = write_spec(tmp_path / "s.txt", duration=2.0, depth_samples=16, num_static=2)
    assert cli.main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / "d")]) == 0
    assert len(sorted((tmp_path / "d").glob("frame_*"))) == 20
    assert len(load(tmp_path / "d").frames) == 20


def test_seed_override_and_determinism(tmp_path):
    spec = write_spec(tmp_path / "s.txt", duration=0.3)
    run = lambda out, *extra: cli.main(["gen-data", "--spec", str(spec), "--out", str(tmp_path / out), *extra])  # noqa: E731
    assert run("a") == 0 and run("b") == 0 and run("c", "--seed", "99") == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


def test_config_file_merges_under_flags(tmp_path):
    spec = write_spec(tmp_path / "s.txt", duration=0.3)
    conf = tmp_path / "c.txt"
    conf.write_text("seed=99\n")
    base = ["gen-data", "--spec", str(spec)]
    assert cli.main(["--config", str(conf), *base, "--out", str(tmp_path / "conf")]) == 0
    assert cli.main([*base, "--seed", "99", "--out", str(tmp_path / "flag")]) == 0
    assert cli.main(["--config", str(conf), *base, "--seed", "3", "--out", str(tmp_path / "win")]) == 0
    assert cli.main([*base, "--out", str(tmp_path / "plain")]) == 0
    assert tree_digest(tmp_path / "conf") == tree_digest(tmp_path / "flag")
    assert tree_digest(tmp_path / "win") == tree_digest(tmp_path / "plain")
    conf.write_text("bogus=1\n")
    assert cli.main(["--config", str(conf), *base, "--out", str(tmp_path / "x")]) == 2


# -- bench -----------------------------------------------------------------------------------
def test_bench_csv_schema(tmp_path, tiny_dataset_dir, tiny_dataset):
    out = tmp_path / "bench.csv"
    code = cli.main(["bench", "--random-init", "--data", str(tiny_dataset_dir), "--lengths", "2,4",
                     "--mode", "filtered,unfiltered", "--out", str(out)])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "length,mode,ms_median,ms_p90,peak_bytes,tokens"
    rows = list(csv.DictReader(lines))
    assert [(r["length"], r["mode"]) for r in rows] == [("2", "filtered"), ("4", "filtered"),
                                                        ("2", "unfiltered"), ("4", "unfiltered")]
    patch = UpdateNetConfig.preset("desk").patch
    per_frame = [sum((K.width // patch) * (K.height // patch) for K in fr.intrinsics) for fr in tiny_dataset.frames]
    for r in rows:
        assert int(r["tokens"]) == sum(per_frame[:int(r["length"])])
        assert float(r["ms_median"]) > 0 and int(r["peak_bytes"]) > 0
    assert cli.main(["bench", "--random-init", "--lengths", "4,2", "--out", str(out)]) == 3
    assert cli.main(["bench", "--lengths", "2", "--out", str(out)]) == 2


# -- train / reconstruct / render / eval -----------------------------------------------------
def test_train_command_writes_checkpoints(tmp_path, tiny_dataset_dir):
    conf = tmp_path / "c.txt"
    conf.write_text("gaussians_per_token=1\nlog_every=0\n")
    code = cli.main(["--config", str(conf), "train", "--data", str(tiny_dataset_dir), "--out", str(tmp_path / "run"),
                     "--iterations", "2", "--preset", "desk", "--schedule", "full", "--lr", "1e-3", "--warmup", "1"])
    assert code == 0
    assert sorted(p.name for p in (tmp_path / "run").glob("*.ufo")) == ["ckpt_00000000.ufo", "ckpt_00000002.ufo"]
    assert len((tmp_path / "run" / "loss.csv").read_text().splitlines()) == 3


def test_reconstruct_then_render_matches_direct(tmp_path, tiny_dataset_dir, checkpoint):
    t = load(tiny_dataset_dir).frames[5].timestamp
    assert cli.main(["reconstruct", "--checkpoint", str(checkpoint), "--data", str(tiny_dataset_dir),
                     "--out", str(tmp_path / "rec")]) == 0
    common = ["render", "--checkpoint", str(checkpoint), "--data", str(tiny_dataset_dir), "--time", str(t)]
    assert cli.main([*common, "--recon", str(tmp_path / "rec"), "--out", str(tmp_path / "a.png"),
                     "--depth-out", str(tmp_path / "a.npy")]) == 0
    assert cli.main([*common, "--out", str(tmp_path / "b.png")]) == 0
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()
    img = np.asarray(Image.open(tmp_path / "a.png"))
    assert img.shape == (16, 32, 3)
    assert np.load(tmp_path / "a.npy").shape == (16, 32)


def _oracle_pose(track, t):
    times = np.asarray(track.times, np.float64)
    poses = np.asarray(track.poses)
    t = float(np.clip(t, times[0], times[-1]))
    if len(times) == 1:
        return poses[0]
    rot = Slerp(times, Rotation.from_matrix(poses[:, :3, :3]))([t]).as_matrix()[0]
    trans = np.array([np.interp(t, times, poses[:, k, 3]) for k in range(3)])
    out = np.eye(4)
    out[:3, :3], out[:3, 3] = rot, trans
    return out


def test_render_between_frames_uses_interpolated_poses(tmp_path, tiny_dataset_dir, checkpoint, monkeypatch):
    data = load(tiny_dataset_dir)
    tracks = read_tracks(tiny_dataset_dir / "tracks.bin")
    t = 0.5 * (data.frames[6].timestamp + data.frames[7].timestamp)
    seen = {}
    real = cli.render_view

    def spy(model, recon, gs_t, *a, **kw):
        seen["gs"] = gs_t
        return real(model, recon, gs_t, *a, **kw)

    monkeypatch.setattr(cli, "render_view", spy)
    assert cli.main(["render", "--checkpoint", str(checkpoint), "--data", str(tiny_dataset_dir), "--time", str(t),
                     "--out", str(tmp_path / "mid.png")]) == 0
    moved = seen["gs"]
    w = moved.weights.data.astype(np.float64)
    assert w.shape[1] == len(tracks) + 1
    model, _ = load_model(checkpoint)
    with nx.no_grad():
        base = decode(model, reconstruct(model, data.context_frames(), data.tracks))
    mu0 = base.mu.data.astype(np.float64)

    def oracle(time):
        out = np.empty_like(mu0)
        for i in range(len(mu0)):
            blend = lambda s: w[i, -1] * np.eye(4) + sum(w[i, k] * _oracle_pose(tr, s)  # noqa: E731
                                                         for k, tr in enumerate(tracks))
            m = blend(time) @ np.linalg.inv(blend(base.t0[i]))
            out[i] = m[:3, :3] @ mu0[i] + m[:3, 3]
        return out

    np.testing.assert_allclose(moved.mu.data, oracle(t), atol=2e-4)
    heavy = w[:, :-1].max(1) > 0.3
    assert heavy.any()
    for key in (6, 7):
        gap = np.linalg.norm(moved.mu.data[heavy] - oracle(data.frames[key].timestamp)[heavy], axis=1)
        assert gap.max() > 1e-3


def test_eval_without_sky_masks(tmp_path, tiny_dataset_dir, checkpoint, capsys):
    root = tmp_path / "d"
    shutil.copytree(tiny_dataset_dir, root)
    (root / "frame_00003" / "sky_0.mask").unlink()
    code = cli.main(["eval", "--checkpoint", str(checkpoint), "--data", str(root), "--out", str(tmp_path / "ev")])
    assert code == 3
    assert "frame_00003/sky_0.mask" in capsys.readouterr().err


def test_eval_writes_metrics_and_maps(tmp_path, tiny_dataset_dir, checkpoint):
    args = ["eval", "--checkpoint", str(checkpoint), "--data", str(tiny_dataset_dir)]
    assert cli.main([*args, "--out", str(tmp_path / "a")]) == 0
    assert cli.main([*args, "--out", str(tmp_path / "b")]) == 0
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    head = (tmp_path / "a" / "metrics.csv").read_text().splitlines()[0]
    assert head == "frame_index,camera,psnr,ssim,d_rmse"
    assert list((tmp_path / "a").glob("lifespan_*.png")) and list((tmp_path / "a").glob("assignment_*.png"))


def test_missing_checkpoint(tmp_path, tiny_dataset_dir, capsys):
    missing = tmp_path / "none.ufo"
    assert cli.main(["eval", "--checkpoint", str(missing), "--data", str(tiny_dataset_dir),
                     "--out", str(tmp_path / "e")]) == 2
    assert str(missing) in capsys.readouterr().err
