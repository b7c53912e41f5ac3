"""Deterministic and sparse-variational-dropout layers.

Variational layers keep a weight mean ``theta`` and a per-weight
``log_sigma2``; the dropout rate is derived as
``log_alpha = log_sigma2 - log(theta**2 + eps)``. Training-mode forwards use
the local reparameterization trick, evaluation-mode forwards use the mean
weights with every ``log_alpha > eta`` entry masked out.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass(frozen=True)
class KLConstants:
    """Closed-form KL approximation of Molchanov et al. (2017), "Variational
    Dropout Sparsifies Deep Neural Networks", for the log-uniform prior.

    ``-KL ~= k1 * sigmoid(k2 + k3 * log_alpha) - 0.5 * log1p(1/alpha) + c``
    """

    k1: float = 0.63576
    k2: float = 1.87320
    k3: float = 1.48695
    c: float = -0.63576
    version: str = "svdo-2017.1"


KL_CONSTANTS = KLConstants()

LOG_ALPHA_MIN, LOG_ALPHA_MAX = -20.0, 20.0
EPS_CLIP = 1e-16
LRT_VAR_FLOOR = 1e-30  # finite d(sqrt) at zero variance, yet negligible next to exp(-40) noise
INIT_LOG_SIGMA2 = -10.0
BN_EPS = 1e-5
DEFAULT_ETA = 3.0

LAYER_KINDS = ("dense", "conv3x3", "batchnorm", "relu", "maxpool2x2", "flatten")
CHECKPOINT_FORMAT = "bsmall-checkpoint"
CHECKPOINT_VERSION = 1


class LayerError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    n_in: int = 0
    n_out: int = 0
    variational: bool | None = None  # None: follow the model-wide flag

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")


@dataclass
class VariationalParams:
    theta: Tensor
    log_sigma2: Tensor
    bias: Tensor | None = None

    def __post_init__(self):
        if self.theta.shape != self.log_sigma2.shape:
            raise ShapeError("VariationalParams", self.theta.shape, self.log_sigma2.shape)


@dataclass
class DeterministicParams:
    weight: Tensor
    bias: Tensor | None = None


def log_alpha(theta, log_sigma2) -> Tensor:
    """Differentiable, clipped log dropout rate."""
    la = ad.sub(log_sigma2, ad.log(ad.add(ad.square(theta), EPS_CLIP)))
    return ad.clip(la, LOG_ALPHA_MIN, LOG_ALPHA_MAX)


def log_alpha_array(theta: np.ndarray, log_sigma2: np.ndarray) -> np.ndarray:
    la = log_sigma2 - np.log(theta * theta + EPS_CLIP)
    return np.clip(la, LOG_ALPHA_MIN, LOG_ALPHA_MAX)


def _sigmoid_derivative(s: np.ndarray, n: int) -> np.ndarray:
    """n-th derivative of the logistic function, written in terms of s = sigmoid(u)."""
    if n == 0:
        return s
    d1 = s * (1 - s)
    if n == 1:
        return d1
    if n == 2:
        return d1 * (1 - 2 * s)
    if n == 3:
        return d1 * (1 - 6 * s + 6 * s * s)
    if n == 4:
        return d1 * (1 - 14 * s + 36 * s * s - 24 * s**3)
    raise NotImplementedError(f"sigmoid derivative of order {n}")


def _kl_derivative(la, order: int, constants: KLConstants) -> Tensor:
    """``order``-th derivative of the per-weight KL in log alpha, as a primitive.

    KL(la) = -k1*sigmoid(k2 + k3*la) + 0.5*softplus(-la) - c, so every
    derivative is a polynomial in the two sigmoids; the backward of order n is
    order n + 1 (up to third order, enough for a second-order meta-gradient
    through the KL gradient).
    """
    k1, k2, k3, c = constants.k1, constants.k2, constants.k3, constants.c
    x = la.data
    s_u = 0.5 * (1.0 + np.tanh(0.5 * (k2 + k3 * x)))
    s_m = 0.5 * (1.0 - np.tanh(0.5 * x))  # sigmoid(-la)
    if order == 0:
        data = -k1 * s_u + 0.5 * np.logaddexp(0.0, -x) - c
    else:
        data = -k1 * k3**order * _sigmoid_derivative(s_u, order) + 0.5 * (-1) ** order * _sigmoid_derivative(
            s_m, order - 1
        )

    def bw(g, need):
        if order >= 3:
            raise NotImplementedError("KL derivatives beyond third order")
        return (ad.mul(g, _kl_derivative(la, order + 1, constants)),)

    return ad._make(data, (la,), bw, f"svd_kl_d{order}")


def kl_per_weight(la, constants: KLConstants = KL_CONSTANTS) -> Tensor:
    """``-(k1*sigmoid(k2 + k3*la) - 0.5*log1p(exp(-la)) + c)`` elementwise."""
    return _kl_derivative(ad.as_tensor(la), 0, constants)


def kl_divergence(layer: VariationalParams, constants: KLConstants = KL_CONSTANTS) -> Tensor:
    """Approximate KL(q || log-uniform prior) summed over the layer's weights."""
    return ad.tsum(kl_per_weight(log_alpha(layer.theta, layer.log_sigma2), constants))


def _affine(kind: str, x: Tensor, w, bias=None) -> Tensor:
    if kind == "dense":
        out = ad.matmul(x, w)
        if bias is None:
            return out
        if bias.ndim == 2:  # per-task biases (T, out) against (T, n, out)
            bias = ad.reshape(bias, (bias.shape[0], 1, bias.shape[1]))
        return ad.add(out, bias)
    return ad.conv2d(x, w, bias)


def _check_input(kind: str, x: Tensor, wshape: tuple, name: str) -> None:
    if kind == "dense":
        ok = x.ndim in (2, 3) and x.shape[-1] == wshape[-2]
    else:
        ok = x.ndim == 4 and x.shape[1] == wshape[1]
    if not ok:
        raise ShapeError(f"{name}:{kind}", x.shape, wshape)


def forward_variational(
    layer: VariationalParams,
    x,
    mode: str = "train",
    rng: np.random.Generator | None = None,
    kind: str = "dense",
    eta: float = DEFAULT_ETA,
    name: str = "layer",
) -> Tensor:
    x = ad.as_tensor(x)
    _check_input(kind, x, layer.theta.shape, name)
    if mode == "train":
        if rng is None:
            raise LayerError(f"{name}: train mode needs an rng")
        mu = _affine(kind, x, layer.theta, layer.bias)
        var = _affine(kind, ad.square(x), ad.exp(layer.log_sigma2))
        noise = Tensor(rng.standard_normal(mu.shape))
        out = ad.add(mu, ad.mul(ad.sqrt(ad.add(var, LRT_VAR_FLOOR)), noise))
    elif mode == "eval":
        keep = log_alpha_array(layer.theta.data, layer.log_sigma2.data) <= eta
        out = _affine(kind, x, ad.mul(layer.theta, Tensor(keep.astype(float))), layer.bias)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if not np.all(np.isfinite(out.data)):
        raise LayerError(f"{name}: non-finite activation")
    return out


def forward_deterministic(
    layer: DeterministicParams, x, kind: str = "dense", name: str = "layer"
) -> Tensor:
    x = ad.as_tensor(x)
    _check_input(kind, x, layer.weight.shape, name)
    out = _affine(kind, x, layer.weight, layer.bias)
    if not np.all(np.isfinite(out.data)):
        raise LayerError(f"{name}: non-finite activation")
    return out


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, stats=None):
    """Per-channel normalisation of NCHW input.

    ``stats`` (mean, var) arrays switch to fixed statistics; otherwise the
    batch's own statistics are used and returned alongside the output.
    """
    c = x.shape[1]
    if stats is None:
        mu = ad.mean(x, axis=(0, 2, 3), keepdims=True)
        centred = ad.sub(x, mu)
        var = ad.mean(ad.square(centred), axis=(0, 2, 3), keepdims=True)
        batch_stats = (mu.data.reshape(c), var.data.reshape(c))
    else:
        mu = Tensor(stats[0].reshape(1, c, 1, 1))
        var = Tensor(stats[1].reshape(1, c, 1, 1))
        centred = ad.sub(x, mu)
        batch_stats = None
    xhat = ad.div(centred, ad.sqrt(ad.add(var, BN_EPS)))
    out = ad.add(ad.mul(xhat, ad.reshape(gamma, (1, c, 1, 1))), ad.reshape(beta, (1, c, 1, 1)))
    return out, batch_stats


@dataclass
class _Slot:
    layer: int
    role: str  # theta | log_sigma2 | weight | bias | gamma | beta


@dataclass
class Model:
    """Layer stack with a flat, ordered parameter list.

    Every forward takes an optional replacement parameter list so that the
    meta-learner can run the same architecture on adapted parameters.
    """

    specs: list[LayerSpec]
    variational: bool
    params: list[Tensor]
    slots: list[_Slot]
    bn_running_stats: bool = False
    bn_momentum: float = 0.1
    bn_state: dict = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return [f"layer{s.layer}.{s.role}" for s in self.slots]

    def is_variational(self, i: int) -> bool:
        spec = self.specs[i]
        if spec.kind not in ("dense", "conv3x3"):
            return False
        return self.variational if spec.variational is None else spec.variational

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params))

    def weight_count(self) -> int:
        return int(sum(p.size for p, s in zip(self.params, self.slots) if s.role in ("theta", "weight")))

    def role_indices(self, *roles: str) -> list[int]:
        return [i for i, s in enumerate(self.slots) if s.role in roles]

    def layer_params(self, params: list[Tensor] | None = None) -> dict:
        params = self.params if params is None else params
        if len(params) != len(self.slots):
            raise ValueError(f"expected {len(self.slots)} parameter tensors, got {len(params)}")
        grouped: dict[int, dict[str, Tensor]] = {}
        for p, s in zip(params, self.slots):
            grouped.setdefault(s.layer, {})[s.role] = p
        out = {}
        for i, roles in grouped.items():
            if "theta" in roles:
                out[i] = VariationalParams(roles["theta"], roles["log_sigma2"], roles.get("bias"))
            elif "gamma" in roles:
                out[i] = DeterministicParams(roles["gamma"], roles["beta"])
            else:
                out[i] = DeterministicParams(roles["weight"], roles.get("bias"))
        return out

    def forward(self, x, params=None, mode: str = "train", rng=None, eta: float = DEFAULT_ETA) -> Tensor:
        lp = self.layer_params(params)
        h = ad.as_tensor(x)
        for i, spec in enumerate(self.specs):
            name = f"layer{i}"
            if spec.kind in ("dense", "conv3x3"):
                kind = "dense" if spec.kind == "dense" else "conv"
                if self.is_variational(i):
                    h = forward_variational(lp[i], h, mode, rng, kind, eta, name)
                else:
                    h = forward_deterministic(lp[i], h, kind, name)
            elif spec.kind == "batchnorm":
                stats = None
                if self.bn_running_stats and mode == "eval" and i in self.bn_state:
                    stats = self.bn_state[i]
                h, batch_stats = batch_norm(h, lp[i].weight, lp[i].bias, stats)
                if self.bn_running_stats and mode == "train" and batch_stats is not None:
                    self._update_bn(i, batch_stats)
            elif spec.kind == "relu":
                h = ad.relu(h)
            elif spec.kind == "maxpool2x2":
                h = ad.max_pool2x2(h)
            elif spec.kind == "flatten":
                h = ad.reshape(h, (h.shape[0], -1))
        return h

    def _update_bn(self, i, batch_stats):
        mu, var = batch_stats
        if i not in self.bn_state:
            self.bn_state[i] = (mu.copy(), var.copy())
        else:
            m = self.bn_momentum
            old_mu, old_var = self.bn_state[i]
            self.bn_state[i] = ((1 - m) * old_mu + m * mu, (1 - m) * old_var + m * var)

    def kl(self, params=None) -> Tensor:
        lp = self.layer_params(params)
        terms = [kl_divergence(lp[i]) for i in range(len(self.specs)) if self.is_variational(i)]
        if not terms:
            return Tensor(0.0)
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
        return total

    def variational_layers(self, params=None) -> list[tuple[int, VariationalParams]]:
        lp = self.layer_params(params)
        return [(i, lp[i]) for i in range(len(self.specs)) if self.is_variational(i)]

    def with_params(self, arrays) -> "Model":
        params = [
            Tensor(np.array(a, dtype=float, copy=True), requires_grad=True, name=n)
            for a, n in zip(arrays, self.names)
        ]
        return Model(
            list(self.specs), self.variational, params, list(self.slots),
            self.bn_running_stats, self.bn_momentum, dict(self.bn_state),
        )


def _shape_walk(specs: list[LayerSpec]):
    """Yield (spec, channels/features in) and check the chain composes."""
    if not specs:
        raise ValueError("empty layer spec list")
    width = None
    for i, s in enumerate(specs):
        if s.kind in ("dense", "conv3x3", "batchnorm"):
            if s.kind == "batchnorm":
                if s.n_in <= 0:
                    raise ValueError(f"layer{i}: batchnorm needs n_in")
                need = s.n_in
            else:
                if s.n_in <= 0 or s.n_out <= 0:
                    raise ValueError(f"layer{i}: {s.kind} needs positive n_in and n_out")
                need = s.n_in
            if width is not None and width != need:
                raise ValueError(f"layer{i}: expects {need} inputs, previous layer yields {width}")
            width = s.n_out if s.kind != "batchnorm" else s.n_in
        elif s.kind == "flatten":
            width = s.n_out if s.n_out > 0 else None


def build_model(
    specs: list[LayerSpec],
    variational: bool,
    init_seed: int = 0,
    bn_running_stats: bool = False,
) -> Model:
    _shape_walk(specs)
    rng = np.random.default_rng(init_seed)
    params, slots = [], []

    def add_param(arr, layer, role):
        params.append(Tensor(np.asarray(arr, dtype=float), requires_grad=True, name=f"layer{layer}.{role}"))
        slots.append(_Slot(layer, role))

    for i, s in enumerate(specs):
        if s.kind in ("dense", "conv3x3"):
            if s.kind == "dense":
                fan_in, shape = s.n_in, (s.n_in, s.n_out)
            else:
                fan_in, shape = s.n_in * 9, (s.n_out, s.n_in, 3, 3)
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=shape)
            b = rng.uniform(-bound, bound, size=(s.n_out,))
            var = variational if s.variational is None else s.variational
            if var:
                add_param(w, i, "theta")
                add_param(np.full(shape, INIT_LOG_SIGMA2), i, "log_sigma2")
            else:
                add_param(w, i, "weight")
            add_param(b, i, "bias")
        elif s.kind == "batchnorm":
            add_param(np.ones(s.n_in), i, "gamma")
            add_param(np.zeros(s.n_in), i, "beta")
    return Model(list(specs), variational, params, slots, bn_running_stats)


def save_checkpoint(model: Model, path, extra: dict | None = None) -> None:
    record = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kl_constants": asdict(KL_CONSTANTS),
        "variational": model.variational,
        "bn_running_stats": model.bn_running_stats,
        "specs": [asdict(s) for s in model.specs],
        "params": [
            {"name": n, "shape": list(p.shape), "values": p.data.ravel().tolist()}
            for n, p in zip(model.names, model.params)
        ],
    }
    if extra:
        record["extra"] = extra
    Path(path).write_text(json.dumps(record))


def load_checkpoint(path) -> Model:
    record = json.loads(Path(path).read_text())
    if record.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint file")
    if record["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {record['version']}")
    if record["kl_constants"]["version"] != KL_CONSTANTS.version:
        raise ValueError(f"{path}: KL constants version mismatch")
    specs = [LayerSpec(**s) for s in record["specs"]]
    model = build_model(specs, record["variational"], 0, record.get("bn_running_stats", False))
    by_name = {p["name"]: p for p in record["params"]}
    arrays = []
    for name, p in zip(model.names, model.params):
        entry = by_name[name]
        if tuple(entry["shape"]) != p.shape:
            raise ShapeError(f"checkpoint:{name}", tuple(entry["shape"]), p.shape)
        arrays.append(np.array(entry["values"], dtype=float).reshape(p.shape))
    return model.with_params(arrays)
