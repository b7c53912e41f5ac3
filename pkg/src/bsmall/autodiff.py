"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is built define-by-run: every primitive that touches a tensor with
``requires_grad`` links its output to its inputs and, when a :class:`Tape` is
active, appends itself to that tape. Backward rules are written with the same
primitives, so differentiating with ``create_graph=True`` yields a graph that
can be differentiated again (MAML's second-order meta-gradient needs this).

Max-pool is non-smooth: its backward routes gradients through a fixed argmax
mask, so its second derivative is taken to be zero.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the named operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class GradError(RuntimeError):
    pass


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


@contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextmanager
def enable_grad(flag: bool = True):
    prev = _grad_enabled()
    _state.enabled = flag
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.op: str | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg}, op={self.op})"

    __array_priority__ = 1000

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeEntry:
    op: str
    inputs: tuple[int, ...]
    output: Tensor


@dataclass
class Tape:
    """Ordered record of primitives applied while the tape is active."""

    entries: list[TapeEntry] = field(default_factory=list)

    def __post_init__(self):
        self._seen: set[int] = set()

    def record(self, out: Tensor) -> None:
        ids = tuple(id(p) for p in out._parents)
        self.entries.append(TapeEntry(out.op, ids, out))
        self._seen.update(ids)
        self._seen.add(id(out))

    def __contains__(self, t: Tensor) -> bool:
        return id(t) in self._seen

    def __len__(self):
        return len(self.entries)

    def ops(self) -> list[str]:
        return [e.op for e in self.entries]

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()


def forward(graph_fn, inputs):
    """Evaluate ``graph_fn(*inputs)`` under a fresh tape."""
    with Tape() as tape:
        out = graph_fn(*inputs)
    return out, tape


def _make(data, parents: tuple, backward, op: str) -> Tensor:
    if not _grad_enabled() or not any(p.requires_grad for p in parents):
        t = Tensor.__new__(Tensor)
        t.data = data
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t.op = op
        t.name = None
        return t
    t = Tensor.__new__(Tensor)
    t.data = data
    t.requires_grad = True
    t._parents = parents
    t._backward = backward
    t.op = op
    t.name = None
    stack = _tape_stack()
    if stack:
        stack[-1].record(t)
    return t


def _broadcast_shape(op, a, b):
    if a.data.shape == b.data.shape:
        return a.data.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- shape plumbing


def sum_to(x: Tensor, shape: tuple) -> Tensor:
    """Sum ``x`` down to ``shape`` (adjoint of broadcasting)."""
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    data = data.reshape(shape)
    in_shape = x.shape
    return _make(data, (x,), lambda g, need: (broadcast_to(g, in_shape),), "sum_to")


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError("broadcast_to", x.shape, shape) from None
    in_shape = x.shape
    return _make(data, (x,), lambda g, need: (sum_to(g, in_shape),), "broadcast_to")


def reshape(x: Tensor, shape: tuple) -> Tensor:
    x = as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    in_shape = x.shape
    return _make(data, (x,), lambda g, need: (reshape(g, in_shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g, need: (transpose(g, inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g, need):
        return (sum_to(g, sa) if need[0] else None, sum_to(g, sb) if need[1] else None)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape

    def bw(g, need):
        return (sum_to(g, sa) if need[0] else None, sum_to(neg(g), sb) if need[1] else None)

    return _make(a.data - b.data, (a, b), bw, "sub")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g, need: (neg(g),), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    sa, sb = a.shape, b.shape

    def bw(g, need):
        return (
            sum_to(mul(g, b), sa) if need[0] else None,
            sum_to(mul(g, a), sb) if need[1] else None,
        )

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    sa, sb = a.shape, b.shape

    def bw(g, need):
        ga = sum_to(div(g, b), sa) if need[0] else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), sb) if need[1] else None
        return ga, gb

    return _make(a.data / b.data, (a, b), bw, "div")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def bw(g, need):
        return (mul(g, out),)

    out = _make(np.exp(a.data), (a,), bw, "exp")
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g, need: (div(g, a),), "log")


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g, need: (mul(g, mul(a, 2.0)),), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def bw(g, need):
        return (div(mul(g, 0.5), out),)

    out = _make(np.sqrt(a.data), (a,), bw, "sqrt")
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g, need: (mul(g, Tensor(mask)),), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = None

    def bw(g, need):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _make(0.5 * (1.0 + np.tanh(0.5 * a.data)), (a,), bw, "sigmoid")
    return out


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero outside the interval."""
    a = as_tensor(a)
    mask = (a.data >= lo) & (a.data <= hi)
    return _make(np.clip(a.data, lo, hi), (a,), lambda g, need: (mul(g, Tensor(mask)),), "clip")


# ---------------------------------------------------------------- reductions


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    in_shape = a.shape
    kshape = tuple(1 if i in axes else s for i, s in enumerate(in_shape))

    def bw(g, need):
        return (broadcast_to(reshape(g, kshape), in_shape),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def logsumexp(a, axis: int = -1) -> Tensor:
    """log-sum-exp along ``axis`` with keepdims semantics."""
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    data = m + np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True))
    out = None

    def bw(g, need):
        return (mul(broadcast_to(g, a.shape), exp(sub(a, out))),)

    out = _make(data, (a,), bw, "logsumexp")
    return out


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape

    def bw(g, need):
        ga = sum_to(matmul(g, swap_last(b)), sa) if need[0] else None
        gb = sum_to(matmul(swap_last(a), g), sb) if need[1] else None
        return ga, gb

    return _make(data, (a, b), bw, "matmul")


# ---------------------------------------------------------------- images (NCHW)


def im2col(x, k: int = 3, pad: int = 1) -> Tensor:
    """(N, C, H, W) -> (N, C*k*k, H_out*W_out) patch matrix, stride 1."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("im2col", x.shape)
    n, c, h, w = x.shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError("im2col", x.shape, (k, k))
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * k * k, ho * wo)
    in_shape = x.shape
    return _make(
        np.ascontiguousarray(cols), (x,), lambda g, need: (col2im(g, in_shape, k, pad),), "im2col"
    )


def col2im(cols, shape: tuple, k: int = 3, pad: int = 1) -> Tensor:
    """Adjoint of :func:`im2col`: scatter-add patches back into an image."""
    cols = as_tensor(cols)
    n, c, h, w = shape
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    g = cols.data.reshape(n, c, k, k, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + ho, j : j + wo] += g[:, :, i, j]
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return _make(
        np.ascontiguousarray(out), (cols,), lambda g, need: (im2col(g, k, pad),), "col2im"
    )


def conv2d(x, weight, bias=None, pad: int = 1) -> Tensor:
    """Stride-1 'same' convolution; weight is (F, C, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    f, c, k, _ = weight.shape
    if x.ndim != 4 or x.shape[1] != c:
        raise ShapeError("conv2d", x.shape, weight.shape)
    n, _, h, w = x.shape
    cols = im2col(x, k, pad)
    out = matmul(reshape(weight, (f, c * k * k)), cols)
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    out = reshape(out, (n, f, ho, wo))
    if bias is not None:
        out = add(out, reshape(bias, (1, f, 1, 1)))
    return out


def max_pool2x2(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError("max_pool2x2", x.shape)
    n, c, h, w = x.shape
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    out = blocks.max(axis=(3, 5))
    hit = blocks == out[:, :, :, None, :, None]
    # ties: keep only the first maximum in each window
    flat = hit.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    first = np.zeros_like(flat)
    np.put_along_axis(first, flat.argmax(axis=-1)[..., None], True, axis=-1)
    mask = first.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    mask_t = Tensor(mask.astype(DTYPE))
    big = (n, c, h // 2, 2, w // 2, 2)

    def bw(g, need):
        up = broadcast_to(reshape(g, (n, c, h // 2, 1, w // 2, 1)), big)
        return (reshape(mul(up, mask_t), (n, c, h, w)),)

    return _make(out, (x,), bw, "max_pool2x2")


# ---------------------------------------------------------------- losses


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of integer ``labels`` under ``logits`` (N, C)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=int)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy", logits.shape, labels.shape)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    lse = logsumexp(logits, axis=1)
    picked = tsum(mul(logits, Tensor(onehot)), axis=1, keepdims=True)
    return mean(sub(lse, picked))


def mse(pred, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("mse", pred.shape, target.shape)
    return mean(square(sub(pred, target)))


# ---------------------------------------------------------------- differentiation


def _topo(output: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    tape: Tape | None,
    output: Tensor,
    wrt: list[Tensor],
    create_graph: bool = False,
    allow_unused: bool = False,
) -> list[Tensor]:
    """Gradients of scalar ``output`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the returned gradients are themselves differentiable.
    ``tape`` may be None, in which case membership is judged from the graph.
    """
    if output.size != 1:
        raise GradError(f"grad: output must be scalar, got shape {output.shape}")
    for w in wrt:
        if not w.requires_grad:
            raise GradError("grad: differentiation target has requires_grad=False")
        if tape is not None and w not in tape:
            raise GradError("grad: differentiation target does not appear on the tape")
    order = _topo(output) if output.requires_grad else []
    targets = {id(w) for w in wrt}
    # only walk nodes that lead to a target
    relevant = set()
    for node in order:
        nid = id(node)
        if nid in targets:
            relevant.add(nid)
            continue
        for p in node._parents:
            if id(p) in relevant:
                relevant.add(nid)
                break
    if not allow_unused:
        for w in wrt:
            if id(w) not in relevant:
                raise GradError("grad: differentiation target is not connected to the output")

    grads: dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.data))}
    with enable_grad(create_graph):
        for node in reversed(order):
            bw = node._backward
            if bw is None:
                continue
            g = grads.get(id(node))
            if g is None:
                continue
            parents = node._parents
            need = tuple(id(p) in relevant for p in parents)
            pgrads = bw(g, need)
            for p, pg in zip(parents, pgrads):
                if pg is None:
                    continue
                pid = id(p)
                prev = grads.get(pid)
                grads[pid] = pg if prev is None else add(prev, pg)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        out.append(g if g is not None else Tensor(np.zeros_like(w.data)))
    return out
