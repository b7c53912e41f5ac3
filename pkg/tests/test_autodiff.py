import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from bsmall import autodiff as ad
from bsmall.autodiff import GradError, ShapeError, Tape, Tensor, forward, grad

from conftest import central_fd, rel_err

finite = st.floats(-3, 3, allow_nan=False, width=64)


def check_primitive(fn, *shapes, rng, positive=False, tol=1e-5):
    arrs = [rng.normal(size=s) for s in shapes]
    if positive:
        arrs = [np.abs(a) + 0.5 for a in arrs]
    proj = [rng.normal(size=np.shape(fn(*[Tensor(a) for a in arrs]).data))]

    def scalar(*xs):
        return float(np.sum(fn(*[Tensor(x) for x in xs]).data * proj[0]))

    ts = [Tensor(a.copy(), requires_grad=True) for a in arrs]
    out, tape = forward(lambda *t: ad.tsum(ad.mul(fn(*t), Tensor(proj[0]))), ts)
    got = grad(tape, out, ts)
    want = central_fd(scalar, arrs)
    for g, w in zip(got, want):
        assert rel_err(g.data, w) <= tol


UNARY = {
    "exp": (ad.exp, False),
    "log": (ad.log, True),
    "square": (ad.square, False),
    "sqrt": (ad.sqrt, True),
    "sigmoid": (ad.sigmoid, False),
    "neg": (ad.neg, False),
    "sum": (lambda x: ad.tsum(x, axis=1), False),
    "mean": (lambda x: ad.mean(x, axis=0, keepdims=True), False),
    "logsumexp": (lambda x: ad.logsumexp(x, axis=1), False),
    "transpose": (lambda x: ad.transpose(x), False),
    "reshape": (lambda x: ad.reshape(x, (-1,)), False),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_fd(name, rng):
    fn, pos = UNARY[name]
    check_primitive(fn, (3, 4), rng=rng, positive=pos)


@pytest.mark.parametrize(
    "fn,sa,sb",
    [
        (ad.add, (3, 4), (4,)),
        (ad.sub, (3, 1), (1, 4)),
        (ad.mul, (2, 3, 4), (3, 4)),
        (ad.matmul, (3, 4), (4, 2)),
        (ad.matmul, (5, 3, 4), (4, 2)),
    ],
)
def test_binary_fd(fn, sa, sb, rng):
    check_primitive(fn, sa, sb, rng=rng)


def test_div_fd(rng):
    check_primitive(ad.div, (3, 4), (3, 4), rng=rng, positive=True)


def test_relu_fd_away_from_kink(rng):
    x = rng.normal(size=(4, 5))
    x[np.abs(x) < 0.05] = 0.3
    t = Tensor(x, requires_grad=True)
    out, tape = forward(lambda a: ad.tsum(ad.mul(ad.relu(a), a)), [t])
    (g,) = grad(tape, out, [t])
    want = central_fd(lambda a: float(np.sum(np.maximum(a, 0) * a)), [x.copy()])[0]
    assert rel_err(g.data, want) <= 1e-5


def test_conv_and_pool_fd(rng):
    check_primitive(lambda x, w, b: ad.conv2d(x, w, b), (2, 2, 4, 4), (3, 2, 3, 3), (3,), rng=rng)
    check_primitive(ad.max_pool2x2, (2, 3, 4, 4), rng=rng)


def test_losses_fd(rng):
    labels = np.array([0, 2, 1, 2])
    check_primitive(lambda z: ad.softmax_cross_entropy(z, labels), (4, 3), rng=rng)
    target = rng.normal(size=(5, 1))
    check_primitive(lambda p: ad.mse(p, Tensor(target)), (5, 1), rng=rng)


def test_im2col_col2im_adjoint(rng):
    x = rng.normal(size=(2, 3, 5, 5))
    y = rng.normal(size=ad.im2col(Tensor(x)).shape)
    lhs = np.sum(ad.im2col(Tensor(x)).data * y)
    rhs = np.sum(x * ad.col2im(Tensor(y), x.shape).data)
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_hand_example_cubic():
    x = Tensor(2.0, requires_grad=True)
    out, tape = forward(lambda a: a * a * a, [x])
    (g,) = grad(tape, out, [x], create_graph=True)
    assert g.item() == pytest.approx(12.0)
    (gg,) = grad(None, g, [x])
    assert gg.item() == pytest.approx(12.0)


def test_second_order_fd(rng):
    """Hessian-vector product of a small sigmoid network against FD of the gradient."""
    w = rng.normal(size=(3, 3))
    x = rng.normal(size=(4, 3))
    v = rng.normal(size=(3, 3))

    def gradient(warr):
        t = Tensor(warr, requires_grad=True)
        out, tape = forward(lambda a: ad.tsum(ad.exp(ad.mul(ad.sigmoid(ad.matmul(Tensor(x), a)), 0.5))), [t])
        return grad(tape, out, [t], create_graph=True)[0], t

    g, t = gradient(w.copy())
    (hv,) = grad(None, ad.tsum(ad.mul(g, Tensor(v))), [t])
    h = 1e-5
    fd = (gradient(w + h * v)[0].data - gradient(w - h * v)[0].data) / (2 * h)
    assert rel_err(hv.data, fd) <= 1e-4


@given(arrays(np.float64, (3, 2), elements=finite), arrays(np.float64, (3, 2), elements=finite), finite)
def test_gradient_linearity(a, b, c):
    """grad(c*f + g) == c*grad(f) + grad(g) to 1e-12."""

    def grads(fn):
        t = Tensor(a, requires_grad=True)
        out, tape = forward(fn, [t])
        return grad(tape, out, [t])[0].data

    f = lambda t: ad.tsum(ad.sigmoid(ad.mul(t, Tensor(b))))
    g = lambda t: ad.tsum(ad.square(t))
    combo = grads(lambda t: ad.add(ad.mul(f(t), c), g(t)))
    assert np.allclose(combo, c * grads(f) + grads(g), rtol=1e-12, atol=1e-12)


def test_determinism(rng):
    x = rng.normal(size=(6, 4))
    runs = []
    for _ in range(2):
        t = Tensor(x.copy(), requires_grad=True)
        out, tape = forward(lambda a: ad.logsumexp(ad.matmul(a, ad.transpose(a)), axis=1).sum(), [t])
        runs.append(grad(tape, out, [t])[0].data)
    assert np.array_equal(runs[0], runs[1])


def test_tape_records_ops():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.tsum(ad.exp(x))
    assert tape.ops() == ["exp", "sum"]
    assert x in tape and y in tape


def test_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    out, tape = forward(lambda a: a * 2.0, [x])
    with pytest.raises(GradError, match="scalar"):
        grad(tape, out, [x])
    with pytest.raises(GradError, match="requires_grad"):
        grad(tape, ad.tsum(out), [Tensor(np.ones(3))])
    other = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GradError, match="tape"):
        grad(tape, ad.tsum(out), [other])
    with pytest.raises(GradError, match="not connected"):
        grad(None, ad.tsum(x), [other])
    assert np.all(grad(None, ad.tsum(x), [other], allow_unused=True)[0].data == 0)
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.exp(x)
    assert not y.requires_grad
