import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bsmall import autodiff as ad
from bsmall.autodiff import Tensor, ShapeError, forward, grad
from bsmall.layers import (
    KL_CONSTANTS,
    LayerError,
    LayerSpec,
    VariationalParams,
    build_model,
    forward_variational,
    kl_divergence,
    kl_per_weight,
    load_checkpoint,
    log_alpha_array,
    save_checkpoint,
)

from conftest import central_fd, rel_err


def kl_oracle(la):
    """Closed form evaluated directly in numpy."""
    k1, k2, k3 = KL_CONSTANTS.k1, KL_CONSTANTS.k2, KL_CONSTANTS.k3
    neg_kl = k1 / (1 + np.exp(-(k2 + k3 * la))) - 0.5 * np.log1p(np.exp(-la)) - k1
    return -neg_kl


def kl_value(la):
    return kl_per_weight(Tensor(np.asarray(la, float))).data


def test_kl_pinned_value_at_zero():
    k1, k2 = KL_CONSTANTS.k1, KL_CONSTANTS.k2
    pinned = k1 - k1 / (1 + math.exp(-k2)) + 0.5 * math.log(2)
    assert float(kl_value(0.0)) == pytest.approx(pinned, rel=1e-12)
    assert float(kl_value(0.0)) == pytest.approx(0.4312390, abs=1e-6)


def test_kl_matches_oracle_and_is_monotone():
    grid = np.linspace(-8, 8, 401)
    vals = kl_value(grid)
    assert np.allclose(vals, kl_oracle(grid), rtol=1e-12, atol=1e-14)
    assert np.all(np.diff(vals) <= 0)
    assert kl_value(-2.0) > kl_value(0.0) > kl_value(2.0)


def test_kl_vanishes_for_dropped_weights():
    assert abs(float(kl_value(20.0))) < 1e-8
    assert abs(float(kl_value(60.0))) < 1e-12


@pytest.mark.parametrize("order", [1, 2, 3])
def test_kl_higher_derivatives_fd(order, rng):
    la = rng.uniform(-6, 6, size=7)

    def deriv(x, n):
        t = Tensor(x, requires_grad=True)
        y = ad.tsum(kl_per_weight(t))
        for _ in range(n):
            (y,) = grad(None, y, [t], create_graph=True)
            y = ad.tsum(y)
        return y, t

    g, t = deriv(la.copy(), order - 1)
    (got,) = grad(None, g, [t])
    h = 1e-5
    want = np.array([
        (float(deriv(la + h * e, order - 1)[0].data) - float(deriv(la - h * e, order - 1)[0].data)) / (2 * h)
        for e in np.eye(la.size)
    ])
    assert rel_err(got.data, want) <= 1e-5


def test_kl_gradient_wrt_theta_and_log_sigma2_fd(rng):
    theta = rng.normal(size=(3, 4))
    ls2 = rng.uniform(-4, 0, size=(3, 4))
    t, s = Tensor(theta.copy(), requires_grad=True), Tensor(ls2.copy(), requires_grad=True)
    out, tape = forward(lambda a, b: kl_divergence(VariationalParams(a, b)), [t, s])
    got = grad(tape, out, [t, s])

    def f(a, b):
        return float(np.sum(kl_oracle(log_alpha_array(a, b))))

    want = central_fd(f, [theta.copy(), ls2.copy()])
    for g, w in zip(got, want):
        assert rel_err(g.data, w) <= 1e-5


def test_lrt_monte_carlo_mean_and_variance():
    layer = VariationalParams(Tensor(np.ones((2, 1))), Tensor(np.zeros((2, 1))))
    x = np.ones((100_000, 2))
    out = forward_variational(layer, x, "train", np.random.default_rng(0)).data.ravel()
    n = out.size
    # analytic mean 2, variance 2; standard errors of both sample moments
    assert abs(out.mean() - 2.0) <= 3 * math.sqrt(2.0 / n)
    assert abs(out.var(ddof=1) - 2.0) <= 3 * math.sqrt(2 * 2.0**2 / (n - 1))


def test_zero_theta_is_pure_noise():
    layer = VariationalParams(Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 2))))
    out = forward_variational(layer, np.ones((50_000, 3)), "train", np.random.default_rng(1)).data
    assert abs(out.mean()) < 3 * math.sqrt(3.0 / out.size)


def test_noise_free_limit_train_equals_eval(rng):
    theta = rng.normal(size=(4, 3))
    layer = VariationalParams(Tensor(theta), Tensor(np.full((4, 3), -40.0)), Tensor(rng.normal(size=3)))
    x = rng.normal(size=(5, 4))
    train = forward_variational(layer, x, "train", np.random.default_rng(2)).data
    ev = forward_variational(layer, x, "eval").data
    assert np.allclose(train, ev, rtol=0, atol=1e-6)
    assert np.array_equal(ev, forward_variational(layer, x, "eval").data)


def test_eval_mode_masks_dropped_weights():
    theta = np.array([[1.0], [1.0]])
    ls2 = np.array([[0.0], [5.0]])  # log alpha 0 and 5
    layer = VariationalParams(Tensor(theta), Tensor(ls2))
    assert forward_variational(layer, np.ones((1, 2)), "eval", eta=3.0).data.item() == 1.0


def test_layer_errors():
    layer = VariationalParams(Tensor(np.ones((2, 1))), Tensor(np.zeros((2, 1))))
    with pytest.raises(ShapeError):
        forward_variational(layer, np.ones((1, 3)), "eval")
    with pytest.raises(LayerError, match="rng"):
        forward_variational(layer, np.ones((1, 2)), "train")
    with pytest.raises(LayerError, match="layer"):
        forward_variational(layer, np.full((1, 2), np.inf), "eval")
    with pytest.raises(ValueError):
        VariationalParams(Tensor(np.ones((2, 1))), Tensor(np.zeros((1, 2))))


@given(st.floats(-1e3, 1e3), st.floats(-60, 10))
def test_log_alpha_finite_and_clipped(theta, ls2):
    la = log_alpha_array(np.array(theta), np.array(ls2))
    assert np.isfinite(la) and -20 <= la <= 20


def test_spec_chain_errors():
    with pytest.raises(ValueError, match="empty"):
        build_model([], False)
    with pytest.raises(ValueError, match="expects"):
        build_model([LayerSpec("dense", 1, 4), LayerSpec("dense", 5, 1)], False)


def test_checkpoint_roundtrip(tmp_path, rng):
    m = build_model([LayerSpec("dense", 2, 3), LayerSpec("relu"), LayerSpec("dense", 3, 1)], True, 3)
    m = m.with_params([p.data + rng.normal(size=p.shape) * 1e-3 for p in m.params])
    save_checkpoint(m, tmp_path / "m.json")
    back = load_checkpoint(tmp_path / "m.json")
    assert back.names == m.names
    for a, b in zip(m.params, back.params):
        assert np.array_equal(a.data, b.data)
