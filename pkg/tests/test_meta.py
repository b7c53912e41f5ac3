import dataclasses
import math

import numpy as np
import pytest

from bsmall import autodiff as ad
from bsmall.autodiff import Tensor
from bsmall.layers import LayerSpec, build_model, kl_per_weight, log_alpha_array
from bsmall.meta import (
    LossError,
    MetaConfig,
    MetaError,
    episode_meta_gradient,
    init_state,
    inner_adapt,
    meta_train,
    noise_rng,
    outer_step,
    task_loss,
)
from bsmall.models import sinusoid_mlp
from bsmall.tasks import TaskEpisode, sinusoid_source

from conftest import rel_err


def linear_model(w=0.0, b=0.0):
    m = build_model([LayerSpec("dense", 1, 1)], False, 0)
    return m.with_params([np.array([[w]]), np.array([b])])


def tiny_mlp(variational=False, seed=0):
    specs = [LayerSpec("dense", 1, 4), LayerSpec("relu"), LayerSpec("dense", 4, 1)]
    return build_model(specs, variational, seed)


ONE_POINT = (np.array([[1.0]]), np.array([[1.0]]))


def test_hand_inner_step():
    m = linear_model()
    cfg = MetaConfig(inner_lr=0.01)
    (w, b) = inner_adapt(m, m.params, ONE_POINT, cfg, steps=1)
    assert w.data.item() == pytest.approx(0.02, abs=1e-15)
    assert b.data.item() == pytest.approx(0.02, abs=1e-15)


def test_hand_inner_step_derivative_fd():
    cfg = MetaConfig(inner_lr=0.01)

    def adapted_w(w0):
        m = linear_model(w0)
        return inner_adapt(m, m.params, ONE_POINT, cfg, steps=1)[0], m.params[0]

    w1, leaf = adapted_w(0.0)
    (d,) = ad.grad(None, ad.tsum(w1), [leaf])
    assert d.data.item() == pytest.approx(0.98, abs=1e-15)
    h = 1e-6
    fd = (adapted_w(h)[0].data.item() - adapted_w(-h)[0].data.item()) / (2 * h)
    assert fd == pytest.approx(0.98, rel=1e-8)


def test_hand_outer_step_composition():
    """inner then outer SGD step on f(x)=wx+b, worked by hand."""
    m = linear_model()
    cfg = MetaConfig(inner_lr=0.01, outer_lr=0.1, optimizer="sgd", tasks_per_batch=1, grad_clip=1e9)
    ep = TaskEpisode(*ONE_POINT, np.array([[2.0]]), np.array([[3.0]]))
    new, _ = outer_step(m, init_state(m), [ep], cfg)
    # adapted: w' = b' = 0.02; query residual r = 0.02*2 + 0.02 - 3
    r = 0.06 - 3.0
    dw = 2 * r * (2 * 0.98 + 1 * (-0.02))  # dL/dw' dw'/dw + dL/db' db'/dw
    db = 2 * r * (2 * (-0.02) + 1 * 0.98)
    assert new.params[0].item() == pytest.approx(-0.1 * dw, rel=1e-12)
    assert new.params[1].item() == pytest.approx(-0.1 * db, rel=1e-12)


def test_zero_inner_lr_is_identity():
    m = tiny_mlp()
    out = inner_adapt(m, m.params, ONE_POINT, MetaConfig(inner_lr=0.0), steps=3)
    for a, b in zip(out, m.params):
        assert np.array_equal(a.data, b.data)


def test_inner_adapt_is_pure():
    m = tiny_mlp(True)
    before = [p.data.copy() for p in m.params]
    inner_adapt(m, m.params, ONE_POINT, MetaConfig(), 0.1, np.random.default_rng(0), steps=3)
    for a, b in zip(before, m.params):
        assert np.array_equal(a, b.data)


@pytest.mark.parametrize("variational", [False, True])
def test_meta_gradient_fd(variational):
    """Full second-order meta-gradient against FD of the two-level objective (<= 50 params)."""
    m = tiny_mlp(variational, seed=3)
    if variational:
        m = m.with_params([np.full(p.shape, -2.0) if s.role == "log_sigma2" else p.data for p, s in zip(m.params, m.slots)])
    assert m.num_parameters() <= 50
    ep = sinusoid_source(0, 5, 5)(0, 0)
    cfg = MetaConfig(inner_lr=0.05)
    lam = 0.01 if variational else 0.0
    params = [p.data.copy() for p in m.params]

    def objective(*arrs):
        return episode_meta_gradient(m, list(arrs), ep, cfg, lam, noise_rng(0, 0, 0)).loss

    got = episode_meta_gradient(m, params, ep, cfg, lam, noise_rng(0, 0, 0)).grads
    h = 1e-6
    for k, p in enumerate(params):
        fd = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            up = [q.copy() for q in params]
            dn = [q.copy() for q in params]
            up[k][i] += h
            dn[k][i] -= h
            fd[i] = (objective(*up) - objective(*dn)) / (2 * h)
        assert rel_err(got[k], fd) <= 1e-4, m.names[k]


def test_first_order_differs_but_finite():
    m = tiny_mlp(seed=1)
    ep = sinusoid_source(1, 5, 5)(0, 0)
    params = [p.data for p in m.params]
    full = episode_meta_gradient(m, params, ep, MetaConfig(inner_lr=0.1), 0.0, None).grads
    fo = episode_meta_gradient(m, params, ep, MetaConfig(inner_lr=0.1, first_order=True), 0.0, None).grads
    assert all(np.all(np.isfinite(g)) for g in full + fo)
    assert any(not np.array_equal(a, b) for a, b in zip(full, fo))


def test_zero_outer_lr_keeps_parameters():
    m = sinusoid_mlp(False, 0)
    src = sinusoid_source(0, 10, 10)
    cfg = MetaConfig(outer_lr=0.0, tasks_per_batch=2)
    new, _ = outer_step(m, init_state(m), [src(0, i) for i in range(2)], cfg)
    for a, b in zip(new.params, m.params):
        assert np.array_equal(a, b.data)


def test_loss_examples():
    m = linear_model(1.0, 0.0)
    assert task_loss(m, m.params, (np.ones((3, 1)), np.ones((3, 1))), False, 0.0).item() == 0.0
    logits = build_model([LayerSpec("dense", 2, 5)], False).with_params([np.zeros((2, 5)), np.zeros(5)])
    ce = task_loss(logits, logits.params, (np.ones((4, 2)), np.arange(4)), False, 0.0, loss="ce")
    assert ce.item() == pytest.approx(math.log(5), rel=1e-12)


def test_variational_loss_composition():
    det = tiny_mlp(False, 2)
    var = tiny_mlp(True, 2)
    it = iter(det.params)
    var = var.with_params([np.full(p.shape, -40.0) if s.role == "log_sigma2" else next(it).data for p, s in zip(var.params, var.slots)])
    batch = (np.linspace(-1, 1, 6).reshape(6, 1), np.zeros((6, 1)))
    lam = 0.3
    got = task_loss(var, var.params, batch, True, lam, mode="eval").item()
    la = np.concatenate([log_alpha_array(l.theta.data, l.log_sigma2.data).ravel() for _, l in var.variational_layers()])
    want = task_loss(det, det.params, batch, False, 0.0).item() + lam * float(kl_per_weight(Tensor(la)).data.sum())
    assert got == pytest.approx(want, rel=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_reports_norms():
    m = linear_model(1e200, 0.0)
    with pytest.raises(LossError, match="parameter norms"):
        task_loss(m, m.params, (np.ones((1, 1)), np.zeros((1, 1))), False, 0.0)


def test_zero_meta_steps_returns_initial_state():
    m = sinusoid_mlp(False, 0)
    state, history = meta_train(MetaConfig(total_meta_steps=0), sinusoid_source(0, 10, 10), m)
    assert history == [] and state.step == 0
    for a, b in zip(state.params, m.params):
        assert np.array_equal(a, b.data)


def test_meta_train_records_and_determinism(tmp_path):
    cfg = MetaConfig(total_meta_steps=6, tasks_per_batch=2, val_every=3, val_episodes=2, kl_anneal_steps=4)
    runs = []
    for k in range(2):
        m = sinusoid_mlp(True, 0)
        state, hist = meta_train(cfg, sinusoid_source(0, 10, 10), m, None, sinusoid_source(0, 10, 10, "val"), tmp_path / f"m{k}.ndjson")
        runs.append((state, hist))
    (s0, h0), (s1, h1) = runs
    assert h0 == h1 and all(np.array_equal(a, b) for a, b in zip(s0.params, s1.params))
    assert [r["lambda_effective"] for r in h0][:5] == pytest.approx([0.0, 0.025, 0.05, 0.075, 0.1])
    assert "val_loss" in h0[2] and "sparsity" in h0[2] and "val_loss" not in h0[0]
    assert (tmp_path / "m0.ndjson").read_text().count("\n") == 6


def test_vectorized_path_matches_serial():
    """Same maths, different summation order: equal to rounding, not bitwise."""
    m = sinusoid_mlp(False, 0)
    src = sinusoid_source(0, 10, 10)
    eps = [src(0, i) for i in range(3)]
    cfg = MetaConfig(tasks_per_batch=3)
    a, _ = outer_step(m, init_state(m), eps, cfg)
    b, _ = outer_step(m, init_state(m), eps, dataclasses.replace(cfg, vectorize=True))
    for x, y in zip(a.params, b.params):
        assert np.allclose(x, y, rtol=1e-9, atol=1e-12)


def test_meta_train_wraps_failures():
    m = sinusoid_mlp(False, 0)

    def bad(step, i):
        raise RuntimeError("boom")

    with pytest.raises(MetaError, match="step 0"):
        meta_train(MetaConfig(total_meta_steps=1), bad, m)


def test_config_validation():
    with pytest.raises(ValueError):
        MetaConfig(optimizer="rmsprop")
    with pytest.raises(ValueError):
        MetaConfig(kl_weight=-1.0)
    assert MetaConfig().kl_lambda(10) == pytest.approx(0.1)
    assert MetaConfig(kl_anneal_steps=1000).lambda_effective(250, 10) == pytest.approx(0.025)
