"""Task distributions and episode sampling.

Every sampler takes an explicit ``numpy.random.Generator``; the ``*_stream``
helpers derive that generator from ``(seed, split, step, index)`` so an
episode is a pure function of its coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .meta import MetaConfig, adapt_and_score, adapt_and_score_batched, can_batch

AMPLITUDE_RANGE = (0.1, 5.0)
PHASE_RANGE = (0.0, np.pi)
INPUT_RANGE = (-5.0, 5.0)
EVAL_GRID_POINTS = 100
EVAL_EPISODES = 600

SPLITS = {"train": 0, "val": 1, "test": 2}
EPISODE_STREAM = 2
CACHE_FORMAT = "bsmall-episodes"
CACHE_VERSION = 1


@dataclass(frozen=True)
class SinusoidTask:
    amplitude: float
    phase: float

    def __post_init__(self):
        lo, hi = AMPLITUDE_RANGE
        if not (lo <= self.amplitude <= hi):
            raise ValueError(f"amplitude {self.amplitude} outside {AMPLITUDE_RANGE}")
        if not (PHASE_RANGE[0] <= self.phase <= PHASE_RANGE[1]):
            raise ValueError(f"phase {self.phase} outside {PHASE_RANGE}")

    def __call__(self, x):
        return self.amplitude * np.sin(np.asarray(x) + self.phase)


@dataclass
class TaskEpisode:
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.support_x)


def episode_rng(seed: int, split: str, step: int, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(EPISODE_STREAM, SPLITS[split], step, index))
    return np.random.default_rng(ss)


def sample_sinusoid_task(rng: np.random.Generator, amplitude_range=AMPLITUDE_RANGE) -> SinusoidTask:
    return SinusoidTask(float(rng.uniform(*amplitude_range)), float(rng.uniform(*PHASE_RANGE)))


def _draw_x(rng, n):
    return rng.uniform(*INPUT_RANGE, size=(n, 1))


def sample_sinusoid_episode(
    rng: np.random.Generator,
    K: int,
    Q: int,
    amplitude_range=AMPLITUDE_RANGE,
    query: str = "random",
    task: SinusoidTask | None = None,
) -> TaskEpisode:
    """K support and Q query points of one random sinusoid.

    ``query="grid"`` replaces the random query draw with ``Q`` evenly spaced
    points over the input range.
    """
    if K < 1 or Q < 1:
        raise ValueError("K and Q must be at least 1")
    task = sample_sinusoid_task(rng, amplitude_range) if task is None else task
    sx = _draw_x(rng, K)
    if query == "grid":
        qx = np.linspace(*INPUT_RANGE, Q).reshape(Q, 1)
    else:
        qx = _draw_x(rng, Q)
    # continuous draws coincide with probability zero; redraw to keep the sets disjoint
    while np.intersect1d(sx, qx).size:
        qx = _draw_x(rng, Q)
    return TaskEpisode(sx, task(sx), qx, task(qx), {"amplitude": task.amplitude, "phase": task.phase})


def sinusoid_source(seed: int, K: int, Q: int, split: str = "train", amplitude_range=AMPLITUDE_RANGE, query="random"):
    """Callable ``(step, index) -> TaskEpisode`` over a deterministic stream."""

    def source(step: int, index: int = 0) -> TaskEpisode:
        return sample_sinusoid_episode(episode_rng(seed, split, step, index), K, Q, amplitude_range, query)

    return source


@dataclass
class SinusoidTaskPool:
    """A finite meta-training set: fixed tasks, each with a fixed set of points."""

    tasks: list[SinusoidTask]
    xs: np.ndarray  # (n_tasks, points, 1)
    ys: np.ndarray

    def __len__(self):
        return len(self.tasks)


def make_sinusoid_pool(seed: int, n_tasks: int, points: int, amplitude_range=AMPLITUDE_RANGE) -> SinusoidTaskPool:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(4,)))
    tasks = [sample_sinusoid_task(rng, amplitude_range) for _ in range(n_tasks)]
    xs = rng.uniform(*INPUT_RANGE, size=(n_tasks, points, 1))
    ys = np.stack([t(x) for t, x in zip(tasks, xs)])
    return SinusoidTaskPool(tasks, xs, ys)


def pool_source(pool: SinusoidTaskPool, seed: int, K: int, Q: int):
    """Episodes drawn from a finite pool: pick a task, split its points K / Q."""
    if K + Q > pool.xs.shape[1]:
        raise ValueError(f"K + Q = {K + Q} exceeds the {pool.xs.shape[1]} points per pool task")

    def source(step: int, index: int = 0) -> TaskEpisode:
        rng = episode_rng(seed, "train", step, index)
        t = int(rng.integers(len(pool)))
        perm = rng.permutation(pool.xs.shape[1])
        s, q = perm[:K], perm[K : K + Q]
        task = pool.tasks[t]
        return TaskEpisode(
            pool.xs[t, s], pool.ys[t, s], pool.xs[t, q], pool.ys[t, q],
            {"amplitude": task.amplitude, "phase": task.phase, "pool_index": t},
        )

    return source


def eval_episodes(seed: int, K: int, n: int = EVAL_EPISODES, reading: str = "tasks", amplitude_range=AMPLITUDE_RANGE):
    """Evaluation episodes.

    ``reading="tasks"``: ``n`` tasks, each adapted on its own K points and
    scored on a 100-point grid. ``reading="points"``: each task is scored on
    600 random query points adapted from the same K points.
    """
    if reading == "tasks":
        return [
            sample_sinusoid_episode(episode_rng(seed, "test", 0, i), K, EVAL_GRID_POINTS, amplitude_range, "grid")
            for i in range(n)
        ]
    if reading == "points":
        return [
            sample_sinusoid_episode(episode_rng(seed, "test", 0, i), K, EVAL_EPISODES, amplitude_range, "random")
            for i in range(n)
        ]
    raise ValueError(f"unknown reading {reading!r}")


def evaluate_regression(
    model, params, episodes, adapt_steps=(1, 5, 10), config: MetaConfig | None = None, lam=None, chunk: int = 200
):
    """Mean query MSE across episodes after each number of adaptation steps."""
    if not adapt_steps:
        raise ValueError("adapt_steps must be non-empty")
    config = config or MetaConfig()
    params = [np.asarray(p.data if hasattr(p, "data") else p) for p in params]
    if lam is None:
        lam = config.kl_lambda(len(episodes[0].support_x)) if getattr(model, "variational", False) else 0.0
    per = {s: [] for s in adapt_steps}
    if can_batch(model, config):
        for start in range(0, len(episodes), chunk):
            scores = adapt_and_score_batched(model, params, episodes[start : start + chunk], config, adapt_steps, lam)
            for s in adapt_steps:
                per[s].extend(scores[s].tolist())
    else:
        for ep in episodes:
            scores = adapt_and_score(model, params, ep, config, adapt_steps, lam)
            for s in adapt_steps:
                per[s].append(scores[s][0])
    return {int(s): float(np.mean(v)) for s, v in per.items()}


# ------------------------------------------------------------------ classification


@dataclass
class SyntheticClassTask:
    """A pool of synthetic image classes.

    Each class is a smooth random single-channel pattern (a coarse Gaussian
    grid upsampled to ``extent``); examples add pixel noise.
    """

    prototypes: np.ndarray  # (n_classes, 1, extent, extent)
    examples: np.ndarray  # (n_classes, per_class, 1, extent, extent)
    noise: float

    @property
    def n_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def per_class(self) -> int:
        return self.examples.shape[1]


def make_synthetic_classes(
    seed: int,
    n_classes: int = 64,
    per_class: int = 20,
    extent: int = 16,
    noise: float = 0.3,
    coarse: int = 4,
) -> SyntheticClassTask:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(3,)))
    block = extent // coarse
    coarse_grid = rng.standard_normal((n_classes, 1, coarse, coarse))
    protos = np.kron(coarse_grid, np.ones((block, block)))
    protos /= protos.std(axis=(1, 2, 3), keepdims=True)
    # prototypes collide with probability zero, but the invariant is cheap to check
    flat = protos.reshape(n_classes, -1)
    d = ((flat[:, None] - flat[None]) ** 2).sum(-1)
    if np.any(d[~np.eye(n_classes, dtype=bool)] == 0):
        raise RuntimeError("duplicate prototypes")
    examples = protos[:, None] + noise * rng.standard_normal((n_classes, per_class, 1, extent, extent))
    return SyntheticClassTask(protos, examples, noise)


def sample_classification_episode(rng: np.random.Generator, pool: SyntheticClassTask, n_way: int, K: int, Q: int) -> TaskEpisode:
    """N-way K-shot episode with labels remapped to ``range(n_way)``."""
    if n_way < 2:
        raise ValueError("n_way must be at least 2")
    if n_way > pool.n_classes:
        raise ValueError(f"n_way {n_way} exceeds the {pool.n_classes} available classes")
    if K + Q > pool.per_class:
        raise ValueError(f"K + Q = {K + Q} exceeds the per-class pool of {pool.per_class}")
    classes = rng.choice(pool.n_classes, n_way, replace=False)
    sx, sy, qx, qy, s_idx, q_idx = [], [], [], [], [], []
    for label, c in enumerate(classes):
        idx = rng.permutation(pool.per_class)[: K + Q]
        s_idx.append(idx[:K])
        q_idx.append(idx[K:])
        sx.append(pool.examples[c, idx[:K]])
        qx.append(pool.examples[c, idx[K:]])
        sy += [label] * K
        qy += [label] * Q
    return TaskEpisode(
        np.concatenate(sx), np.array(sy), np.concatenate(qx), np.array(qy),
        {"classes": classes.tolist(), "support_idx": np.array(s_idx).tolist(), "query_idx": np.array(q_idx).tolist()},
    )


def classification_source(pool: SyntheticClassTask, seed: int, n_way: int, K: int, Q: int, split: str = "train"):
    def source(step: int, index: int = 0) -> TaskEpisode:
        return sample_classification_episode(episode_rng(seed, split, step, index), pool, n_way, K, Q)

    return source


def nearest_prototype_accuracy(pool: SyntheticClassTask, episode: TaskEpisode) -> float:
    """Accuracy of the Bayes classifier that knows the class prototypes.

    Classes are isotropic Gaussians with equal variance around their
    prototypes, so maximum likelihood is nearest-prototype.
    """
    protos = pool.prototypes[episode.meta["classes"]].reshape(len(episode.meta["classes"]), -1)
    q = episode.query_x.reshape(len(episode.query_x), -1)
    # log-likelihood up to a positive scale 1 / (2 noise^2), which argmax ignores
    dist = ((q[:, None, :] - protos[None]) ** 2).sum(-1)
    return float(np.mean(dist.argmin(1) == episode.query_y))


def bayes_ceiling(pool: SyntheticClassTask, seed: int, n_way: int, K: int, Q: int, n: int = 200) -> float:
    src = classification_source(pool, seed, n_way, K, Q, "test")
    return float(np.mean([nearest_prototype_accuracy(pool, src(0, i)) for i in range(n)]))


def evaluate_classification(model, params, episodes, adapt_steps=(10,), config: MetaConfig | None = None, lam=None):
    """Mean post-adaptation query accuracy per step count."""
    config = config or MetaConfig(loss="ce")
    params = [np.asarray(p.data if hasattr(p, "data") else p) for p in params]
    if lam is None:
        lam = config.kl_lambda(len(episodes[0].support_x)) if model.variational else 0.0
    per = {s: [] for s in adapt_steps}
    for ep in episodes:
        scores = adapt_and_score(model, params, ep, config, adapt_steps, lam)
        for s in adapt_steps:
            per[s].append(scores[s][1])
    return {int(s): float(np.mean(v)) for s, v in per.items()}


# ------------------------------------------------------------------ on-disk cache


def save_episodes(path, episodes: list[TaskEpisode], seed: int, split: str) -> None:
    header = {"format": CACHE_FORMAT, "version": CACHE_VERSION, "seed": seed, "split": split, "count": len(episodes)}
    arrays = {}
    for i, ep in enumerate(episodes):
        for name in ("support_x", "support_y", "query_x", "query_y"):
            arrays[f"{i}.{name}"] = getattr(ep, name)
        arrays[f"{i}.meta"] = np.array(json.dumps(ep.meta))
    np.savez(path, __header__=np.array(json.dumps(header)), **arrays)


def load_episodes(path) -> tuple[dict, list[TaskEpisode]]:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("format") != CACHE_FORMAT or header.get("version") != CACHE_VERSION:
            raise ValueError(f"{path}: unrecognised episode cache")
        eps = [
            TaskEpisode(
                z[f"{i}.support_x"], z[f"{i}.support_y"], z[f"{i}.query_x"], z[f"{i}.query_y"],
                json.loads(str(z[f"{i}.meta"])),
            )
            for i in range(header["count"])
        ]
    return header, eps
