"""MAML and B-SMALL meta-training.

Inner loop: plain gradient descent on the support set,
``params' = params - inner_lr * grad(task_loss(params, support))``.
Outer loop: the query-set losses of the adapted parameters are summed over
the task batch and differentiated with respect to the *initial* parameters
(second-order unless ``first_order``), then fed to Adam or SGD.

For variational models ``task_loss`` adds ``lambda * KL`` to the data term,
so both loops optimise the negated variational lower bound.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

NOISE_STREAM = 1


class MetaError(RuntimeError):
    pass


class LossError(MetaError):
    pass


@dataclass(frozen=True)
class MetaConfig:
    inner_lr: float = 0.01
    outer_lr: float = 1e-3
    inner_steps_train: int = 1
    inner_steps_eval: int = 10
    tasks_per_batch: int = 25
    K: int = 10
    Q: int = 10
    first_order: bool = False
    kl_weight: float | None = None  # None: 1 / (support examples per task)
    kl_anneal_steps: int = 1000
    total_meta_steps: int = 10000
    optimizer: str = "adam"
    grad_clip: float = 10.0
    inner_adapt_alpha: bool = True
    freeze_log_sigma2: bool = False
    eval_kl: bool = True
    eta: float = 3.0
    aggregate: str = "sum"  # sum | mean
    loss: str = "mse"  # mse | ce
    seed: int = 0
    val_every: int = 100
    val_episodes: int = 25
    checkpoint_every: int = 0
    vectorize: bool = False

    def __post_init__(self):
        if self.inner_lr < 0 or self.outer_lr < 0:
            raise ValueError("step sizes must be nonnegative")
        if self.inner_steps_train < 1 or self.inner_steps_eval < 1:
            raise ValueError("inner step counts must be at least 1")
        if self.total_meta_steps < 0:
            raise ValueError("total_meta_steps must be nonnegative (0 = evaluation only)")
        if self.tasks_per_batch < 1 or self.K < 1:
            raise ValueError("tasks_per_batch and K must be positive")
        if self.kl_weight is not None and self.kl_weight < 0:
            raise ValueError("kl_weight must be nonnegative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.aggregate not in ("sum", "mean"):
            raise ValueError(f"unknown aggregate {self.aggregate!r}")
        if self.loss not in ("mse", "ce"):
            raise ValueError(f"unknown loss {self.loss!r}")

    def kl_lambda(self, support_size: int) -> float:
        return 1.0 / support_size if self.kl_weight is None else self.kl_weight

    def lambda_effective(self, step: int, support_size: int) -> float:
        lam = self.kl_lambda(support_size)
        if self.kl_anneal_steps <= 0:
            return lam
        return lam * min(1.0, step / self.kl_anneal_steps)


@dataclass
class MetaState:
    params: list[np.ndarray]
    opt: dict = field(default_factory=dict)
    step: int = 0
    seed: int = 0

    def copy(self) -> "MetaState":
        opt = {k: ([a.copy() for a in v] if isinstance(v, list) else v) for k, v in self.opt.items()}
        return MetaState([p.copy() for p in self.params], opt, self.step, self.seed)


def init_state(model, seed: int = 0) -> MetaState:
    return MetaState([p.data.copy() for p in model.params], {}, 0, seed)


def noise_rng(seed: int, step: int, index: int) -> np.random.Generator:
    """LRT noise stream for episode ``index`` of outer step ``step``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(NOISE_STREAM, step, index)))


def _frozen(model, config: MetaConfig) -> set[int]:
    return set(model.role_indices("log_sigma2")) if config.freeze_log_sigma2 else set()


def _inner_fixed(model, config: MetaConfig) -> set[int]:
    fixed = _frozen(model, config)
    if not config.inner_adapt_alpha:
        fixed |= set(model.role_indices("log_sigma2"))
    return fixed


def _param_norms(params) -> str:
    return ", ".join(f"{np.linalg.norm(p.data):.3g}" for p in params)


def data_loss(model, params, x, y, loss: str, mode: str, rng, batched: bool = False) -> Tensor:
    out = model.forward(x, params, mode, rng)
    if loss == "ce":
        if batched:
            raise ValueError("task-batched evaluation supports the squared loss only")
        return ad.softmax_cross_entropy(out, y)
    if not batched:
        return ad.mse(out, y)
    if out.shape != np.shape(y):
        raise ad.ShapeError("mse", out.shape, np.shape(y))
    per_task = ad.mean(ad.square(ad.sub(out, y)), axis=tuple(range(1, out.ndim)))
    return ad.tsum(per_task)


def task_loss(
    model,
    params,
    batch,
    variational: bool,
    lam: float,
    loss: str = "mse",
    mode: str = "train",
    rng=None,
    with_parts: bool = False,
    batched: bool = False,
):
    """Data loss (MSE or cross-entropy, batch mean) plus ``lam`` times the KL.

    With ``batched`` the leading axis indexes tasks carrying their own
    parameters and the per-task losses are summed. Returns the scalar loss,
    or ``(loss, data_term)`` with ``with_parts``.
    """
    x, y = batch
    if len(x) == 0:
        raise ValueError("empty batch")
    dl = data_loss(model, params, x, y, loss, mode, rng, batched)
    total = dl
    if variational and lam > 0:
        total = ad.add(dl, ad.mul(model.kl(params), lam))
    if not np.isfinite(total.data):
        raise LossError(f"non-finite loss {float(total.data)}; parameter norms: {_param_norms(params)}")
    return (total, dl) if with_parts else total


def inner_adapt(
    model,
    params: list[Tensor],
    support,
    config: MetaConfig,
    lam: float = 0.0,
    rng=None,
    steps: int | None = None,
    mode: str = "train",
    create_graph: bool | None = None,
    batched: bool = False,
) -> list[Tensor]:
    """``steps`` SGD steps on the support loss; ``params`` is left untouched."""
    steps = config.inner_steps_train if steps is None else steps
    if steps < 1:
        raise ValueError("inner_adapt needs at least one step")
    if create_graph is None:
        create_graph = not config.first_order
    fixed = _inner_fixed(model, config)
    idx = [i for i in range(len(params)) if i not in fixed]
    current = list(params)
    for _ in range(steps):
        loss = task_loss(model, current, support, model.variational, lam, config.loss, mode, rng, batched=batched)
        grads = ad.grad(None, loss, [current[i] for i in idx], create_graph=create_graph, allow_unused=True)
        for g in grads:
            if not np.all(np.isfinite(g.data)):
                raise MetaError("non-finite inner-loop gradient")
        nxt = list(current)
        for i, g in zip(idx, grads):
            nxt[i] = ad.sub(current[i], ad.mul(g, config.inner_lr))
        current = nxt
    return current


@dataclass
class EpisodeResult:
    grads: list[np.ndarray]
    loss: float
    data_loss: float


def episode_meta_gradient(
    model,
    params: list[np.ndarray],
    episode,
    config: MetaConfig,
    lam: float,
    rng,
) -> EpisodeResult:
    """Query loss of the adapted parameters and its gradient w.r.t. ``params``.

    This is one task's term of the outer objective; the outer step and the
    sensor-network nodes both call it.
    """
    leaves = [Tensor(p, requires_grad=True) for p in params]
    adapted = inner_adapt(model, leaves, (episode.support_x, episode.support_y), config, lam, rng)
    total, dl = task_loss(
        model, adapted, (episode.query_x, episode.query_y), model.variational, lam,
        config.loss, "train", rng, with_parts=True,
    )
    frozen = _frozen(model, config)
    targets = [leaves[i] for i in range(len(leaves)) if i not in frozen]
    gs = iter(ad.grad(None, total, targets, allow_unused=True))
    grads = [np.zeros_like(p) if i in frozen else next(gs).data for i, p in enumerate(params)]
    return EpisodeResult(grads, float(total.data), float(dl.data))


def batched_meta_gradient(model, params: list[np.ndarray], episodes: list, config: MetaConfig, lam: float, rng):
    """All tasks of a batch in one graph: parameters are broadcast along a
    leading task axis, so each task adapts its own copy. Returns the summed
    meta-gradient and per-task loss arrays. Dense models with squared loss only.
    """
    T = len(episodes)
    sx, sy, qx, qy = stack_episodes(episodes)
    leaves = [Tensor(p, requires_grad=True) for p in params]
    per_task = [ad.broadcast_to(l, (T,) + l.shape) for l in leaves]
    adapted = inner_adapt(model, per_task, (sx, sy), config, lam, rng, batched=True)
    out = model.forward(qx, adapted, "train", rng)
    sq = ad.mean(ad.square(ad.sub(out, qy)), axis=tuple(range(1, out.ndim)))
    total = ad.tsum(sq)
    kl_task = 0.0
    if model.variational and lam > 0:
        kl = model.kl(adapted)
        total = ad.add(total, ad.mul(kl, lam))
        kl_task = float(kl.data) / T
    if not np.isfinite(total.data):
        raise LossError(f"non-finite loss {float(total.data)}; parameter norms: {_param_norms(leaves)}")
    frozen = _frozen(model, config)
    targets = [leaves[i] for i in range(len(leaves)) if i not in frozen]
    gs = iter(ad.grad(None, total, targets, allow_unused=True))
    grads = [np.zeros_like(p) if i in frozen else next(gs).data for i, p in enumerate(params)]
    data = sq.data.copy()
    return grads, data + lam * kl_task, data


def stack_episodes(episodes):
    return tuple(np.stack([getattr(ep, f) for ep in episodes]) for f in ("support_x", "support_y", "query_x", "query_y"))


def can_batch(model, config: MetaConfig) -> bool:
    specs = getattr(model, "specs", None)
    return specs is not None and config.loss == "mse" and all(s.kind in ("dense", "relu") for s in specs)


def aggregate(results: list[EpisodeResult], how: str = "sum") -> list[np.ndarray]:
    total = [g.copy() for g in results[0].grads]
    for r in results[1:]:
        for t, g in zip(total, r.grads):
            t += g
    if how == "mean":
        total = [t / len(results) for t in total]
    return total


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


def apply_update(state: MetaState, grads: list[np.ndarray], config: MetaConfig, frozen: set[int]) -> MetaState:
    """One optimizer step on the meta-parameters; returns a new state."""
    new = state.copy()
    lr = config.outer_lr
    if config.optimizer == "sgd":
        for i, g in enumerate(grads):
            if i not in frozen:
                new.params[i] = new.params[i] - lr * g
    else:
        b1, b2, eps = 0.9, 0.999, 1e-8
        if "m" not in new.opt:
            new.opt = {"m": [np.zeros_like(p) for p in new.params], "v": [np.zeros_like(p) for p in new.params], "t": 0}
        t = new.opt["t"] + 1
        new.opt["t"] = t
        for i, g in enumerate(grads):
            if i in frozen:
                continue
            m = b1 * new.opt["m"][i] + (1 - b1) * g
            v = b2 * new.opt["v"][i] + (1 - b2) * g * g
            new.opt["m"][i], new.opt["v"][i] = m, v
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            new.params[i] = new.params[i] - lr * mhat / (np.sqrt(vhat) + eps)
    new.step = state.step + 1
    return new


def support_size(episode) -> int:
    return len(episode.support_x)


def outer_step(model, state: MetaState, episodes: list, config: MetaConfig) -> tuple[MetaState, dict]:
    """One meta-update from a batch of episodes.

    Per-episode meta-gradients are summed in episode order. With
    ``config.vectorize`` (dense models) the batch runs as a single graph,
    which agrees with the per-episode path to rounding but not bit-for-bit.
    """
    if not episodes:
        raise ValueError("outer_step needs at least one episode")
    lam = config.lambda_effective(state.step, support_size(episodes[0])) if model.variational else 0.0
    if config.vectorize and can_batch(model, config):
        grads, losses, data_losses = batched_meta_gradient(
            model, state.params, episodes, config, lam, noise_rng(state.seed, state.step, 0)
        )
        if config.aggregate == "mean":
            grads = [g / len(episodes) for g in grads]
    else:
        results = [
            episode_meta_gradient(model, state.params, ep, config, lam, noise_rng(state.seed, state.step, i))
            for i, ep in enumerate(episodes)
        ]
        grads = aggregate(results, config.aggregate)
        losses = [r.loss for r in results]
        data_losses = [r.data_loss for r in results]
    return finish_outer_step(model, state, grads, losses, data_losses, config, lam)


def finish_outer_step(model, state, grads, losses, data_losses, config, lam) -> tuple[MetaState, dict]:
    grads, norm = clip_global_norm(grads, config.grad_clip)
    if not np.isfinite(norm):
        raise MetaError(f"non-finite meta-gradient at step {state.step}")
    new = apply_update(state, grads, config, _frozen(model, config))
    for p in new.params:
        if not np.all(np.isfinite(p)):
            raise MetaError(f"non-finite parameters after step {state.step}")
    info = {
        "train_loss": float(np.mean(data_losses)),
        "train_objective": float(np.mean(losses)),
        "grad_norm": norm,
        "lambda_effective": lam,
    }
    return new, info


# ------------------------------------------------------------------ evaluation


def adapt_and_score(model, params: list[np.ndarray], episode, config: MetaConfig, steps_list, lam: float):
    """Adapt on the support set in eval mode; query loss/accuracy after each step count."""
    steps_list = sorted(set(int(s) for s in steps_list))
    current = [Tensor(p, requires_grad=True) for p in params]
    lam = lam if config.eval_kl else 0.0
    support = (episode.support_x, episode.support_y)
    out = {}
    done = 0
    for target in steps_list:
        if target > done:
            current = [Tensor(p.data, requires_grad=True) for p in current]
            current = inner_adapt(model, current, support, config, lam, None, target - done, "eval", False)
            done = target
        with ad.no_grad():
            pred = model.forward(episode.query_x, current, "eval")
        if config.loss == "ce":
            loss = float(ad.softmax_cross_entropy(pred, episode.query_y).data)
            acc = float(np.mean(pred.data.argmax(axis=1) == episode.query_y))
            out[target] = (loss, acc)
        else:
            loss = float(ad.mse(pred, episode.query_y).data)
            out[target] = (loss, None)
    return out


def adapt_and_score_batched(model, params: list[np.ndarray], episodes, config: MetaConfig, steps_list, lam: float):
    """Batched :func:`adapt_and_score` for dense squared-loss models.

    Returns ``{steps: per-episode query MSE array}``.
    """
    steps_list = sorted(set(int(s) for s in steps_list))
    lam = lam if config.eval_kl else 0.0
    T = len(episodes)
    sx, sy, qx, qy = stack_episodes(episodes)
    current = [Tensor(np.broadcast_to(p, (T,) + p.shape).copy(), requires_grad=True) for p in params]
    out, done = {}, 0
    for target in steps_list:
        if target > done:
            current = [Tensor(p.data, requires_grad=True) for p in current]
            current = inner_adapt(model, current, (sx, sy), config, lam, None, target - done, "eval", False, batched=True)
            done = target
        with ad.no_grad():
            pred = model.forward(qx, current, "eval")
        out[target] = ((pred.data - qy) ** 2).mean(axis=tuple(range(1, pred.ndim)))
    return out


def validate(model, state: MetaState, episodes, config: MetaConfig, steps: int | None = None) -> dict:
    steps = config.inner_steps_train if steps is None else steps
    lam = config.lambda_effective(state.step, support_size(episodes[0])) if model.variational else 0.0
    losses, accs = [], []
    for ep in episodes:
        loss, acc = adapt_and_score(model, state.params, ep, config, [steps], lam)[steps]
        losses.append(loss)
        accs.append(acc)
    res = {"val_loss": float(np.mean(losses))}
    res["val_mse_or_acc"] = float(np.mean(accs)) if config.loss == "ce" else res["val_loss"]
    return res


def train_val_losses(model, state, episodes, config, lam) -> float:
    """Post-adaptation query loss, measured the way the outer loop sees it."""
    vals = []
    for i, ep in enumerate(episodes):
        r = episode_meta_gradient(model, state.params, ep, config, lam, noise_rng(state.seed + 7919, state.step, i))
        vals.append(r.data_loss)
    return float(np.mean(vals))


# ------------------------------------------------------------------ training loop


@dataclass
class MetricsWriter:
    path: Path | None = None

    def __post_init__(self):
        if self.path is not None:
            self.path = Path(self.path)
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, record: dict) -> None:
        if self.path is None:
            return
        with self.path.open("a") as fh:
            fh.write(json.dumps(record) + "\n")


def meta_train(
    config: MetaConfig,
    task_source: Callable[[int, int], object],
    model,
    callbacks: list[Callable] | None = None,
    val_source: Callable[[int, int], object] | None = None,
    metrics_path=None,
    checkpoint_dir=None,
    state: MetaState | None = None,
) -> tuple[MetaState, list[dict]]:
    """Run ``config.total_meta_steps`` outer steps.

    ``task_source(step, i)`` returns the i-th training episode of a step and
    ``val_source(step, j)`` the j-th (fresh) validation episode at a step.
    Each callback is called as ``cb(step, state, record)``.
    """
    from .sparsity import measure_sparsity

    state = init_state(model, config.seed) if state is None else state
    history: list[dict] = []
    writer = MetricsWriter(metrics_path)
    for _ in range(config.total_meta_steps):
        step = state.step
        try:
            episodes = [task_source(step, i) for i in range(config.tasks_per_batch)]
            state, info = outer_step(model, state, episodes, config)
        except Exception as exc:
            raise MetaError(f"meta step {step} failed: {exc}") from exc
        record = {"step": step + 1, "train_loss": info["train_loss"], "lambda_effective": info["lambda_effective"]}
        if val_source and config.val_every and (step + 1) % config.val_every == 0:
            val_eps = [val_source(step + 1, j) for j in range(config.val_episodes)]
            vlam = info["lambda_effective"]
            record["val_loss"] = train_val_losses(model, state, val_eps, config, vlam)
            record["val_mse_or_acc"] = validate(model, state, val_eps, config)["val_mse_or_acc"]
            if model.variational:
                record["sparsity"] = measure_sparsity(model.with_params(state.params), config.eta).ratio
            else:
                record["sparsity"] = None
        history.append(record)
        writer.write(record)
        if checkpoint_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            from .layers import save_checkpoint

            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(model.with_params(state.params), Path(checkpoint_dir) / f"step{step + 1:06d}.json")
        for cb in callbacks or ():
            cb(step + 1, state, record)
    return state, history


def config_dict(config: MetaConfig) -> dict:
    return asdict(config)


def with_overrides(config: MetaConfig, **kw) -> MetaConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
