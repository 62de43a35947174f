import numpy as np
import pytest

from recon4d import numerics as nx
from recon4d.dynamics import ObjectTrack
from recon4d.encoders import (MAX_BOXES, N_SKY, BoxEncoder, ImageEncoder, SceneEncoder, box_coordinates,
                              fourier_features, fourier_frequencies, patchify, pixel_channels, select_boxes)
from recon4d.errors import ContractError
from recon4d.geometry import CameraPose, Intrinsics, make_transform, rot_z
from recon4d.synthdata import FrameObservation


def frame(h=16, w=24, t=0.0, cams=1, image=None, pose=None):
    K = Intrinsics(20.0, 20.0, w / 2, h / 2, w, h)
    img = np.zeros((h, w, 3), np.float32) if image is None else image
    pose = pose or CameraPose(np.eye(4), t)
    return FrameObservation(0, t, [img] * cams, [pose] * cams, [K] * cams, [np.zeros((0, 3))] * cams,
                            [np.zeros((h, w), bool)] * cams, [])


def track(oid, x, size=(4.0, 2.0, 1.5)):
    return ObjectTrack(oid, [0.0, 1.0], [make_transform(np.eye(3), [x, 0, 0]), make_transform(np.eye(3), [x + 1, 0, 0])],
                       np.array(size))


def test_constants():
    assert MAX_BOXES == 32 and N_SKY == 4


def test_patch_count_full_resolution():
    enc = ImageEncoder(16, 8, 3, np.random.default_rng(0))
    batch = enc(frame(160, 240), 0)
    assert batch.num_patches == 600
    assert enc.encode_frame(frame(160, 240, cams=3)).num_patches == 1800


def test_non_divisible_image():
    enc = ImageEncoder(16, 8, 1, np.random.default_rng(0))
    with pytest.raises(ContractError):
        enc(frame(20, 24), 0)
    with pytest.raises(ContractError):
        patchify(np.zeros((20, 24, 9)), 8)


def test_black_image_at_origin_channels():
    K = Intrinsics(20.0, 20.0, 12, 8, 24, 16)
    ch = pixel_channels(np.zeros((16, 24, 3)), np.eye(4), K)
    assert np.all(ch[..., :3] == 0)
    np.testing.assert_allclose(np.linalg.norm(ch[..., 3:6], axis=-1), 1.0, atol=1e-12)
    assert np.all(ch[..., 6:9] == 0)


def test_timestamp_only_changes_time_encoding():
    enc = ImageEncoder(16, 8, 1, np.random.default_rng(1))
    img = np.random.default_rng(2).uniform(size=(16, 24, 3)).astype(np.float32)
    a = enc(frame(image=img, t=0.0), 0).tokens.data
    b = enc(frame(image=img, t=0.7), 0).tokens.data
    diff = b - a
    # every patch shifts by the same vector: the difference of the two time encodings
    np.testing.assert_allclose(diff, np.broadcast_to(diff[0], diff.shape), atol=1e-5)
    assert np.abs(diff).max() > 1e-3


def test_encode_image_deterministic_and_plucker():
    enc = ImageEncoder(16, 8, 1, np.random.default_rng(3))
    pose = CameraPose(make_transform(rot_z(0.3), [1, 2, 3]))
    f = frame(pose=pose)
    a, b = enc(f, 0), enc(f, 0)
    assert a.tokens.data.tobytes() == b.tokens.data.tobytes()
    np.testing.assert_allclose(np.sum(a.ray_dirs * a.ray_moments, axis=1), 0.0, atol=1e-9)


def test_box_fourier_dc_sine_zero():
    coords = box_coordinates(np.eye(4), np.array([2.0, 2.0, 2.0]))
    feats = fourier_features(nx.Tensor(coords[None]), fourier_frequencies(6)).data[0]
    sines = feats[:27 * 6].reshape(27, 6)
    assert np.all(sines[0] == 0)  # center at the origin


def test_box_translation_locality():
    enc = BoxEncoder(16, np.random.default_rng(4))
    tracks = [track(1, 5.0), track(2, 10.0), track(3, 15.0)]
    toks_a, a = enc(tracks, 0.0, None)
    moved = [tracks[0], track(2, 13.0), tracks[2]]
    toks_b, b = enc(moved, 0.0, None)
    order = [t.object_id for t in toks_a]
    assert order == [t.object_id for t in toks_b] == [1, 2, 3]
    changed = [oid for k, oid in enumerate(order) if a.data[k].tobytes() != b.data[k].tobytes()]
    assert changed == [2]


def test_box_limit_and_ties():
    tracks = [track(i, 10.0) for i in (7, 3, 5)]
    keep = select_boxes(tracks, 0.0, np.zeros(3), limit=2)
    assert [tracks[k].object_id for k in keep] == [3, 5]
    enc = BoxEncoder(8, np.random.default_rng(5))
    toks, emb = enc([track(i, 5.0 + i) for i in range(40)], 0.0, None)
    assert len(toks) == MAX_BOXES and emb.shape == (MAX_BOXES, 8)
    assert enc([], 0.0, None) == ([], None)


def test_scene_encoder_origin_and_equivariance():
    enc = SceneEncoder(8, np.random.default_rng(6))
    zero = enc(np.zeros((1, 8)), np.zeros((1, 3)), [0.0]).data
    expected = enc.position_encoding(nx.Tensor(np.zeros((1, 3)))).data + np.array([[0.0] * 4 + [1.0] * 4])
    np.testing.assert_allclose(zero, expected, atol=1e-6)
    rng = np.random.default_rng(7)
    f, p, t = rng.normal(size=(5, 8)), rng.normal(size=(5, 3)), rng.uniform(0, 2, 5)
    perm = rng.permutation(5)
    np.testing.assert_allclose(enc(f[perm], p[perm], t[perm]).data, enc(f, p, t).data[perm], atol=1e-6)


def test_scene_position_encoding_changes_iff_position_changes():
    enc = SceneEncoder(8, np.random.default_rng(8))
    p = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0], [1.0, 2.5, 3.0]])
    e = enc.position_encoding(nx.Tensor(p)).data
    assert e[0].tobytes() == e[1].tobytes()
    assert np.abs(e[0] - e[2]).max() > 1e-4


def test_scene_encoder_dim_mismatch():
    with pytest.raises(ContractError):
        SceneEncoder(8, np.random.default_rng(0))(np.zeros((2, 4)), np.zeros((2, 3)), [0, 0])
