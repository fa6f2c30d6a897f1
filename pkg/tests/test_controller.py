import math

import numpy as np
import pytest

from strsep import numerics as nx
from strsep.controller import (ControllerConfig, compute_controller, entropy_penalty,
                               gap_penalty, log_scales, scale_weights)
from strsep.numerics import Tensor, finite_difference_gradient

SIZES = (4, 8, 16, 32)


def test_equal_gaps_single_source():
    out = compute_controller(Tensor(np.zeros(2)), SIZES, ControllerConfig())
    a = np.log(SIZES)
    assert out.u.data[0] == pytest.approx(0.5, abs=1e-15)
    assert out.centers.data[0] == pytest.approx((a.min() + a.max()) / 2, abs=1e-12)


def test_equal_gaps_two_sources():
    out = compute_controller(Tensor(np.zeros(3)), SIZES, ControllerConfig())
    assert np.allclose(out.u.data, [1 / 3, 2 / 3], atol=1e-15)


def test_alpha_log_linear_interpolation():
    cfg = ControllerConfig(alpha_min=0.01, alpha_max=1.0)
    out = compute_controller(Tensor(np.zeros(2)), SIZES, cfg)
    assert out.alpha.data[0] == pytest.approx(0.1, rel=1e-12)


def test_rejects_single_scale():
    with pytest.raises(ValueError):
        compute_controller(Tensor(np.zeros(3)), (8,), ControllerConfig())


def test_scale_weights_examples():
    a = log_scales(SIZES)
    assert np.allclose(scale_weights(1.234, a, 0.0).data, 0.25)
    assert scale_weights(a[0], a, 50.0).data[0] > 0.999
    a2 = log_scales((4, 16))
    assert np.allclose(scale_weights(a2.mean(), a2, 4.0).data, [0.5, 0.5], atol=1e-15)


def test_entropy_examples():
    onehot = np.eye(4)[:2]
    assert abs(entropy_penalty(Tensor(onehot)).item()) <= 2e-8
    assert entropy_penalty(Tensor(np.full((1, 4), 0.25))).item() == pytest.approx(math.log(4), abs=1e-6)
    rng = np.random.default_rng(0)
    uniform = entropy_penalty(Tensor(np.full((1, 4), 0.25))).item()
    for _ in range(200):
        row = rng.dirichlet(np.ones(4))[None, :]
        assert entropy_penalty(Tensor(row)).item() <= uniform + 1e-12


def test_gap_examples():
    assert gap_penalty(Tensor([1.0]), 0.5).item() == 0.0
    assert gap_penalty(Tensor([0.0, 1.0, 2.0]), 0.5).item() == 0.0
    c = np.cumsum([0.0, 0.25, 0.6])
    assert gap_penalty(Tensor(c), 0.5).item() == pytest.approx(0.03125, abs=1e-15)


def test_ordering_and_normalisation_over_random_draws():
    cfg = ControllerConfig()
    rng = np.random.default_rng(0)
    for seed in range(1000):
        K = 1 + seed % 5
        eta = np.random.default_rng(seed).normal(0, 10, size=K + 1)
        out = compute_controller(Tensor(eta), SIZES, cfg)
        a = np.log(SIZES)
        c = out.centers.data
        assert a.min() < c[0] and c[-1] < a.max()
        assert np.all(np.diff(c) > 0)
        assert np.all(np.diff(out.alpha.data) < 0)
        assert np.all(np.abs(out.weights.data.sum(axis=1) - 1) <= 1e-12)
        assert np.all(out.weights.data > 0)
        p = out.expected_scale.data
        assert np.all(p >= min(SIZES) - 1e-9) and np.all(p <= max(SIZES) + 1e-9)
    del rng


FIELDS = ("u", "centers", "weights", "expected_log_scale", "expected_scale", "alpha")


@pytest.mark.parametrize("field", FIELDS)
@pytest.mark.parametrize("seed", range(5))
def test_controller_gradients(field, seed):
    rng = np.random.default_rng(seed)
    eta0 = rng.normal(size=4)
    probe = rng.normal(size=(3, 4) if field == "weights" else 3)
    cfg = ControllerConfig()

    def value(eta):
        return nx.tsum(nx.mul(getattr(compute_controller(eta, SIZES, cfg), field), probe))

    eta = Tensor(eta0, requires_grad=True)
    value(eta).backward()
    fd = finite_difference_gradient(lambda x: value(Tensor(x)).item(), eta0, 1e-5)
    assert np.linalg.norm(eta.grad - fd) <= 1e-4 * max(np.linalg.norm(fd), 1e-8)
