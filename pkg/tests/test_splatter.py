import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from recon4d import numerics as nx
from recon4d.geometry import CameraPose, Intrinsics, make_transform, pixel_rays, rot_z
from recon4d.splatter import (BACKENDS, BETA_MIN, AffineDecoder, GaussianDecoder, GaussianSet, SkyDecoder, at_time,
                              decode_gaussians, footprints, rasterize, render, sky_color)
from recon4d.tokenstore import SceneTokenStore

from conftest import check_grad

K8 = Intrinsics(10.0, 10.0, 4.0, 4.0, 8, 8, near=0.1, far=40.0)
EYE = CameraPose(np.eye(4))


def random_set(rng, n, spread=0.5, opacity=(-1.0, 0.8)):
    z = rng.uniform(2.5, 5.0, n)
    mu = np.stack([rng.uniform(-spread, spread, n) * z / 3, rng.uniform(-spread, spread, n) * z / 3, z], 1)
    return dict(mu=mu, log_scale=np.log(rng.uniform(0.2, 0.5, (n, 3))), quat=rng.normal(size=(n, 4)),
                opacity_logit=rng.uniform(*opacity, n), color=rng.uniform(0.1, 0.9, (n, 3)),
                beta=rng.uniform(0.3, 2.0, n), t0=rng.uniform(0, 0.5, n))


def build(p, uid=None):
    n = len(p["mu"])
    t = lambda x: nx.as_tensor(np.asarray(x, dtype=nx.get_default_dtype()) if not isinstance(x, nx.Tensor) else x)  # noqa: E731
    uid = np.arange(n) if uid is None else np.asarray(uid)
    return GaussianSet(t(p["mu"]), t(p["log_scale"]), t(p["quat"]), t(p["opacity_logit"]), t(p["color"]),
                       t(p["beta"]), np.asarray(p["t0"], np.float64), nx.Tensor(np.ones((n, 1))), uid, uid)


def sky_weights(rng, dim=8, n_sky=4):
    dec = SkyDecoder(dim, n_sky, rng)
    return dec.weights(nx.Tensor(rng.normal(size=(n_sky, dim))))


def stacked(out):
    h, w = out.alpha.shape
    return nx.concat([nx.reshape(out.rgb, (h * w, 3)), nx.reshape(out.depth, (h * w, 1)),
                      nx.reshape(out.alpha, (h * w, 1))], axis=1)


# -- compositing backends ---------------------------------------------------------------
def _splats(rng, n, w=24, h=16):
    means = np.stack([rng.uniform(-2, w + 2, n), rng.uniform(-2, h + 2, n)], 1)
    a, c = rng.uniform(0.3, 2.0, n), rng.uniform(0.3, 2.0, n)
    b = rng.uniform(-0.5, 0.5, n) * np.sqrt(a * c)
    depth = np.sort(rng.uniform(1, 30, n))
    radius = np.ceil(3 / np.sqrt(np.minimum(a, c)))
    return means, np.stack([a, b, c], 1), rng.uniform(0.05, 0.95, n), rng.uniform(0, 1, (n, 3)), depth, radius


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernel not built")
def test_backends_agree():
    rng = np.random.default_rng(0)
    with nx.precision(np.float64):
        *arrays, radius = _splats(rng, 60)
        probe = rng.normal(size=(16, 24, 5))
        results = {}
        for name in BACKENDS:
            args = [nx.Tensor(x.copy(), requires_grad=True) for x in arrays]
            out = rasterize(*args, radius, 24, 16, backend=name)
            nx.reduce_sum(out * probe).backward()
            results[name] = (out.data.copy(), [a.grad.copy() for a in args])
    (o1, g1), (o2, g2) = results["numpy"], results["cython"]
    np.testing.assert_allclose(o1, o2, atol=1e-10)
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(a, b, atol=1e-8)


@pytest.mark.parametrize("backend", sorted(BACKENDS))
@pytest.mark.parametrize("seed", range(4))
def test_render_gradients_match_finite_differences(backend, seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 6))
    p = random_set(rng, n)
    with nx.precision(np.float64):
        sky = [nx.Tensor(x.data) for x in sky_weights(np.random.default_rng(10 + seed))]
    affine = (nx.Tensor(np.eye(3) + rng.normal(0, 0.05, (3, 3))), nx.Tensor(rng.normal(0, 0.05, 3)))

    def op(mu, log_scale, opacity_logit, color, beta):
        q = dict(p, mu=mu, log_scale=log_scale, opacity_logit=opacity_logit, color=color, beta=beta)
        gs = at_time(build(q), [], 0.4)
        return stacked(render(gs, EYE, K8, sky, affine, backend=backend))

    err = check_grad(op, [p["mu"], p["log_scale"], p["opacity_logit"], p["color"], p["beta"]], h=1e-6, seed=seed)
    assert err < 1e-3


def test_sky_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    with nx.precision(np.float64):
        dec = SkyDecoder(6, 2, rng)
        dec.proj.weight.data[:] = rng.normal(0, 0.3, dec.proj.weight.data.shape)
    dirs, _ = pixel_rays(EYE, K8)
    assert check_grad(lambda tok: sky_color(dirs, dec.weights(tok)), [rng.normal(size=(2, 6))]) < 1e-4


def test_sky_color_examples():
    rng = np.random.default_rng(2)
    dec = SkyDecoder(8, 4, rng)
    dec.proj.weight.data[:] = 0.0
    dirs, _ = pixel_rays(CameraPose(make_transform(rot_z(0.3), [0, 0, 0])), K8)
    w = dec.weights(nx.Tensor(rng.normal(size=(4, 8))))
    w1, b1, w2, b2 = w
    w1.data[:] = 0.0  # constant MLP input layer
    col = sky_color(dirs, w).data
    np.testing.assert_allclose(col, np.broadcast_to(col[0, 0], col.shape), atol=1e-7)
    dec.proj.weight.data[:] = rng.normal(0, 5.0, dec.proj.weight.data.shape)
    col = sky_color(dirs, dec.weights(nx.Tensor(rng.normal(0, 5, size=(4, 8))))).data
    assert col.min() >= 0 and col.max() <= 1


def test_zero_gaussians_give_sky_and_far():
    rng = np.random.default_rng(3)
    sky = sky_weights(rng)
    dirs, _ = pixel_rays(EYE, K8)
    affine = (nx.Tensor(np.eye(3) * 0.9), nx.Tensor(np.full(3, 0.05)))
    out = render(build(random_set(rng, 0)), EYE, K8, sky, affine)
    expected = sky_color(dirs, sky).data @ (np.eye(3) * 0.9).T + 0.05
    np.testing.assert_allclose(out.rgb.data, expected, atol=1e-6)
    assert np.all(out.alpha.data == 0)
    np.testing.assert_allclose(out.depth.data, K8.far)


def test_opaque_gaussian_on_pixel_ray():
    p = dict(mu=[[0.05, 0.05, 3.0]], log_scale=np.log([[1.0, 1.0, 1.0]]), quat=[[1, 0, 0, 0]],
             opacity_logit=[12.0], color=[[0.2, 0.6, 0.9]], beta=[1.0], t0=[0.0])
    out = render(build(p), EYE, K8)
    assert out.alpha.data[4, 4] >= 0.99
    np.testing.assert_allclose(out.rgb.data[4, 4], [0.2, 0.6, 0.9], atol=0.01)
    dec = AffineDecoder(8, np.random.default_rng(0))
    ident = dec(nx.Tensor(np.random.default_rng(1).normal(size=8)))
    np.testing.assert_allclose(render(build(p), EYE, K8, affine=ident).rgb.data, out.rgb.data, atol=1e-7)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(0.0, 4.0))
def test_alpha_monotone_in_opacity(seed, bump):
    rng = np.random.default_rng(seed)
    p = random_set(rng, int(rng.integers(1, 6)))
    base = render(build(p), EYE, K8).alpha.data
    k = int(rng.integers(len(p["mu"])))
    q = dict(p, opacity_logit=p["opacity_logit"].copy())
    q["opacity_logit"][k] += bump
    assert np.all(render(build(q), EYE, K8).alpha.data >= base - 1e-7)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    p = random_set(rng, 6)
    p["mu"][1] = p["mu"][0] + [0.1, 0.0, 0.0]  # equal view depth
    perm = rng.permutation(6)
    q = {k: np.asarray(v)[perm] for k, v in p.items()}
    a = render(build(p), EYE, K8)
    b = render(build(q, uid=perm), EYE, K8)
    for x, y in zip(a.numpy(), b.numpy()):
        assert x.tobytes() == y.tobytes()


def test_infinite_lifespan_static_scene():
    rng = np.random.default_rng(4)
    p = random_set(rng, 5)
    p["beta"] = np.full(5, 1e9)
    a = render(at_time(build(p), [], 0.0), EYE, K8).rgb.data
    b = render(at_time(build(p), [], 3.0), EYE, K8).rgb.data
    assert np.abs(a - b).max() < 1e-6


# -- decoding ---------------------------------------------------------------------------
def _store(rng, n, dim=16):
    s = SceneTokenStore(dim)
    s.append(s.allocate_ids(n), rng.uniform(-10, 10, (n, 3)), rng.normal(0, 30, (n, dim)), 0.25, 0)
    return s


def test_decode_counts_floor_and_offsets():
    rng = np.random.default_rng(5)
    store = _store(rng, 100)
    dec = GaussianDecoder(16, 1, 4, rng)
    dec.mlp.fc2.weight.data[:] = rng.normal(0, 3.0, dec.mlp.fc2.weight.data.shape)
    refs = {0: EYE}
    with nx.precision(np.float64):
        gs = decode_gaussians(store, None, dec, refs, fx=10.0)
        moved = decode_gaussians(store, None, dec, refs, fx=10.0, t=0.25)
    assert len(gs) == 100 and len(gs.primitives()) == 100
    assert gs.beta.data.min() >= BETA_MIN
    foot = footprints(store.positions.data, np.zeros((100, 3)), 8, 10.0)
    raw = dec.mlp(store.features).data
    np.testing.assert_allclose(gs.mu.data, store.positions.data + raw[:, :3] * foot[:, None], atol=1e-9)
    np.testing.assert_allclose(moved.mu.data, gs.mu.data, atol=1e-12)
    np.testing.assert_allclose(moved.opacity.data, 1 / (1 + np.exp(-gs.opacity_logit.data)), atol=1e-12)
    dec4 = GaussianDecoder(16, 4, 4, rng)
    assert len(decode_gaussians(store, None, dec4, refs, fx=10.0)) == 400


def test_footprint_floor():
    np.testing.assert_allclose(footprints(np.array([[0.1, 0, 0], [20, 0, 0]]), np.zeros((2, 3)), 8, 100.0),
                               [0.04, 1.6])

