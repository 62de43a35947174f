import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr
from skimage.metrics import structural_similarity

from recon4d import numerics as nx
from recon4d.errors import ContractError
from recon4d.geometry import CameraPose, Intrinsics
from recon4d.objectives import (LossWeights, MetricReport, MetricRow, depth_rmse, perceptual_proxy, psnr, ssim,
                                total_loss, view_terms)
from recon4d.splatter import GaussianSet, RenderOutput, render

from conftest import check_grad

K8 = Intrinsics(10.0, 10.0, 4.0, 4.0, 8, 8, near=0.1, far=40.0)


def fake_render(rgb, depth=None, alpha=None):
    h, w, _ = rgb.shape
    depth = np.full((h, w), 10.0) if depth is None else depth
    alpha = np.ones((h, w)) if alpha is None else alpha
    return RenderOutput(nx.Tensor(rgb), nx.Tensor(depth), nx.Tensor(alpha))


def test_default_weights():
    w = LossWeights()
    assert w.as_dict() == dict(rgb=1.0, perceptual=0.05, depth=1.0, lifespan=0.0001, sky_depth=0.01,
                               sky_opacity=0.1, obj=1.0, perceptual_start_iter=5000)
    with pytest.raises(ContractError):
        LossWeights(depth=-1.0)


def test_rgb_half_gray_vs_black():
    terms = view_terms(fake_render(np.full((4, 4, 3), 0.5)), np.zeros((4, 4, 3)), None, np.zeros((4, 4), bool),
                       40.0, LossWeights(), 0)
    assert abs(terms["rgb"].item() - 0.25) < 1e-7


def test_perfect_render_only_lifespan_remains():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(16, 16, 3))
    sky = np.zeros((16, 16), bool)
    sky[:3] = True
    depth = np.full((16, 16), 12.0)
    depth[sky] = 40.0
    alpha = np.where(sky, 0.0, 1.0)
    sparse = np.array([[2, 5, 12.0], [10, 9, 12.0]])
    with nx.precision(np.float64):
        v = view_terms(fake_render(img, depth, alpha), img, sparse, sky, 40.0, LossWeights(), 6000)
        betas = np.full(10, 1e6)
        assign = np.eye(3)[[0, 2, 1, 2]]
        res = total_loss([v], betas, assign, [0, 2, 1, 2], 6000)
    lam = LossWeights().lifespan
    for name, (raw, weight, weighted) in res.breakdown().items():
        assert weighted <= lam / 1e6 + 1e-15, name
    assert set(res.breakdown()) == {"rgb", "perceptual", "depth", "lifespan", "sky_depth", "sky_opacity", "obj"}


def test_breakdown_reports_default_weights():
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(16, 16, 3))
    sky = rng.uniform(size=(16, 16)) < 0.3
    v = view_terms(fake_render(rng.uniform(size=(16, 16, 3))), img, np.array([[1, 1, 5.0]]), sky, 40.0,
                   LossWeights(), 5000)
    res = total_loss([v], np.array([0.5, 2.0]), np.full((2, 3), 1 / 3), [0, 2], 5000)
    b = res.breakdown()
    expected = LossWeights().as_dict()
    for name, (raw, weight, weighted) in b.items():
        assert weight == expected[name]
        assert raw >= 0 and abs(weighted - raw * weight) <= 1e-6 * max(1.0, abs(weighted))
    assert abs(res.total.item() - sum(x[2] for x in b.values())) < 1e-5


def test_perceptual_start():
    img = np.zeros((16, 16, 3))
    w = LossWeights()
    sky = np.zeros((16, 16), bool)
    before = view_terms(fake_render(img + 0.1), img, None, sky, 40.0, w, 4999)
    after = view_terms(fake_render(img + 0.1), img, None, sky, 40.0, w, 5000)
    assert "perceptual" not in before and "perceptual" in after


def test_zero_weight_removes_term_bitwise():
    rng = np.random.default_rng(2)
    img, pred = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
    sky = rng.uniform(size=(16, 16)) < 0.3
    depth = rng.uniform(1, 40, (16, 16))
    alpha = rng.uniform(size=(16, 16))
    sparse = np.array([[3, 4, 9.0], [7, 2, 20.0]])
    full_w, cut_w = LossWeights(), LossWeights(sky_depth=0.0)
    full = total_loss([view_terms(fake_render(pred, depth, alpha), img, sparse, sky, 40.0, full_w, 6000)],
                      np.array([1.0, 3.0]), weights=full_w, iteration=6000)
    cut = total_loss([view_terms(fake_render(pred, depth, alpha), img, sparse, sky, 40.0, cut_w, 6000)],
                     np.array([1.0, 3.0]), weights=cut_w, iteration=6000)
    assert "sky_depth" in full.breakdown() and "sky_depth" not in cut.breakdown()
    for name, vals in cut.breakdown().items():
        assert vals == full.breakdown()[name]


def test_missing_sky_mask():
    with pytest.raises(ContractError):
        view_terms(fake_render(np.zeros((4, 4, 3))), np.zeros((4, 4, 3)), None, None, 40.0, LossWeights(), 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_terms_non_negative(seed):
    rng = np.random.default_rng(seed)
    sky = rng.uniform(size=(16, 16)) < 0.4
    sparse = np.column_stack([rng.integers(0, 16, 5), rng.integers(0, 16, 5), rng.uniform(1, 40, 5)])
    v = view_terms(fake_render(rng.uniform(size=(16, 16, 3)), rng.uniform(1, 40, (16, 16)), rng.uniform(size=(16, 16))),
                   rng.uniform(size=(16, 16, 3)), sparse, sky, 40.0, LossWeights(), 6000)
    a = rng.dirichlet(np.ones(3), size=4)
    res = total_loss([v], rng.uniform(0.05, 5, 4), a, rng.integers(0, 3, 4), 6000)
    assert res.total.item() >= 0
    assert all(raw >= 0 for raw, _, _ in res.breakdown().values())


def test_total_loss_gradient():
    rng = np.random.default_rng(3)
    n = 4
    z = rng.uniform(2.5, 5, n)
    mu0 = np.stack([rng.uniform(-0.5, 0.5, n) * z / 3, rng.uniform(-0.5, 0.5, n) * z / 3, z], 1)
    img = rng.uniform(size=(8, 8, 3))
    sky = np.zeros((8, 8), bool)
    sky[0, :] = True
    sparse = np.array([[4, 4, 3.5], [2, 5, 4.0], [6, 3, 3.0]])
    pose = CameraPose(np.eye(4))
    weights = LossWeights(perceptual=0.0)

    def op(mu, beta):
        gs = GaussianSet(mu, nx.Tensor(np.log(np.full((n, 3), 0.4))), nx.Tensor(np.tile([1.0, 0, 0, 0], (n, 1))),
                         nx.Tensor(np.full(n, 0.3)), nx.Tensor(np.full((n, 3), 0.6)), beta, np.zeros(n),
                         nx.Tensor(np.ones((n, 1))), np.arange(n), np.arange(n))
        v = view_terms(render(gs, pose, K8), img, sparse, sky, K8.far, weights, 0)
        return total_loss([v], beta, weights=weights).total

    assert check_grad(op, [mu0, rng.uniform(0.5, 2, n)], h=1e-6) < 1e-3


# -- perceptual proxy ----------------------------------------------------------------------
def test_perceptual_identity_and_symmetry():
    rng = np.random.default_rng(4)
    a, b = rng.uniform(size=(32, 32, 3)), rng.uniform(size=(32, 32, 3))
    assert perceptual_proxy(a, a).item() == 0.0
    ab, ba = perceptual_proxy(a, b).item(), perceptual_proxy(b, a).item()
    assert ab > 0 and abs(ab - ba) < 1e-6
    with pytest.raises(ContractError):
        perceptual_proxy(a, b[:16])


def test_perceptual_tracks_mse():
    rng = np.random.default_rng(5)
    proxy, mse = [], []
    for _ in range(50):
        a = rng.uniform(0.2, 0.8, (32, 32, 3))
        b = np.clip(a + rng.normal(0, rng.uniform(0.005, 0.1), a.shape), 0, 1)
        proxy.append(perceptual_proxy(a, b).item())
        mse.append(float(np.mean((a - b) ** 2)))
    assert spearmanr(proxy, mse).statistic > 0.5


# -- metrics -------------------------------------------------------------------------------
def test_psnr_examples():
    gt = np.zeros((4, 4, 3))
    assert abs(psnr(np.full_like(gt, 0.1), gt) - 20.0) < 1e-9
    assert psnr(gt, gt) == 99.0
    assert math.isnan(psnr(gt, gt, np.zeros((4, 4, 3), bool)))


def test_ssim_matches_skimage():
    rng = np.random.default_rng(6)
    for _ in range(5):
        a = rng.uniform(size=(24, 30, 3))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        ref = structural_similarity(a, b, channel_axis=2, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, data_range=1.0)
        assert abs(ssim(a, b) - ref) < 1e-6
    assert abs(ssim(a, a) - 1.0) < 1e-12


def test_depth_rmse_examples():
    pred = np.full((6, 6), 10.0)
    sparse = np.array([[0, 0, 8.0], [3, 2, 12.0], [5, 5, 8.0]])
    assert abs(depth_rmse(pred, sparse) - 2.0) < 1e-12
    assert depth_rmse(pred, np.zeros((0, 3))) is None


def test_metric_report_csv(tmp_path):
    rep = MetricReport()
    rep.add(MetricRow(3, 0, 25.0, 0.8, 1.5))
    rep.add(MetricRow(3, 1, 27.0, 0.9, None))
    rep.write_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "frame_index,camera,psnr,ssim,d_rmse"
    assert lines[2].endswith(",")
    agg = rep.aggregate()
    assert agg["psnr"] == 26.0 and agg["d_rmse"] == 1.5 and agg["count"] == 2
