"""Shared helpers: finite-difference checks and small synthetic scenes."""
from __future__ import annotations

import numpy as np
import pytest

from recon4d import numerics as nx
from recon4d import synthdata


def numeric_grad(fn, arrays, index, h=1e-5):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = fn(*arrays)
        x[i] = old - h
        fm = fn(*arrays)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b) -> float:
    """Max-norm relative error between two gradient arrays."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / scale)


def check_grad(op, arrays, h=1e-5, seed=0, which=None):
    """Compare autodiff and central differences for ``sum(op(*tensors) * R)``; returns max rel error."""
    rng = np.random.default_rng(seed)
    with nx.precision(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        probe = {}

        def scalar(*arrs):
            with nx.no_grad():
                out = op(*[nx.Tensor(a) for a in arrs])
            if "r" not in probe:
                probe["r"] = rng.normal(size=out.shape)
            return float(np.sum(out.data * probe["r"]))

        scalar(*arrays)
        ts = [nx.Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = op(*ts)
        nx.reduce_sum(out * probe["r"]).backward()
        errs = []
        for i in (range(len(arrays)) if which is None else which):
            num = numeric_grad(scalar, arrays, i, h)
            ana = ts[i].grad if ts[i].grad is not None else np.zeros_like(arrays[i])
            errs.append(rel_error(ana, num))
        return max(errs)


TINY_SPEC = dict(seed=3, duration=1.0, width=32, height=16, num_static=6, depth_samples=96, num_actors=2)


@pytest.fixture(scope="session")
def tiny_dataset():
    return synthdata.build(synthdata.SceneSpec(**TINY_SPEC))


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny_ds")
    synthdata.generate(synthdata.SceneSpec(**TINY_SPEC), root / "data")
    return root / "data"


_ACCEPTANCE: list[str] = []


def record_acceptance(line: str) -> None:
    _ACCEPTANCE.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
