"""Fusion-center sensor network running distributed (B-S)MAML.

Each vertex holds a replica of the meta-parameters and a node-local task
distribution. Per round, every reachable node adapts on one local episode and
uploads its query-loss meta-gradient; the fusion center sums the uploads in
node-id order, applies one optimizer step and broadcasts the result. With all
nodes reachable this is exactly a centralized outer step whose task batch is
the nodes' episodes.

Logical time only: messages are in-process records, no transport.
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .meta import (
    EpisodeResult,
    MetaConfig,
    MetaState,
    aggregate,
    outer_step,
    episode_meta_gradient,
    finish_outer_step,
    init_state,
    noise_rng,
    support_size,
)
from .tasks import AMPLITUDE_RANGE, episode_rng, evaluate_regression, sample_sinusoid_episode

VALUE_WIDTH = 8  # float64
GRAPH_HEADER = "# bsmall sensor graph v1"


class SimulationError(RuntimeError):
    pass


@dataclass
class SensorGraph:
    n_vertices: int
    edges: set[tuple[int, int]] = field(default_factory=set)
    assignment: dict[int, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_vertices < 1:
            raise ValueError("a sensor graph needs at least one vertex")
        norm = set()
        for i, j in self.edges:
            if not (0 <= i < self.n_vertices and 0 <= j < self.n_vertices) or i == j:
                raise ValueError(f"bad edge ({i}, {j})")
            norm.add((min(i, j), max(i, j)))
        self.edges = norm
        for v in range(self.n_vertices):
            self.assignment.setdefault(v, AMPLITUDE_RANGE)

    def degree(self, i: int) -> int:
        return sum(1 for e in self.edges if i in e)

    def neighbors(self, i: int) -> list[int]:
        return sorted(j if k == i else k for k, j in self.edges if i in (k, j))

    def is_complete(self) -> bool:
        return all(self.degree(i) == self.n_vertices - 1 for i in range(self.n_vertices))

    @classmethod
    def complete(cls, n: int, heterogeneous: bool = False) -> "SensorGraph":
        edges = {(i, j) for i in range(n) for j in range(i + 1, n)}
        assignment = amplitude_bands(n) if heterogeneous else {}
        return cls(n, edges, assignment)

    def to_file(self, path) -> None:
        lines = [GRAPH_HEADER, f"vertices {self.n_vertices}"]
        for v in range(self.n_vertices):
            lines.append(f"v {v}: " + " ".join(str(u) for u in self.neighbors(v)))
        for v in range(self.n_vertices):
            lo, hi = self.assignment[v]
            lines.append(f"a {v} {lo!r} {hi!r}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_file(cls, path) -> "SensorGraph":
        n, edges, assignment = None, set(), {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            head, *rest = line.split()
            try:
                if head == "vertices":
                    n = int(rest[0])
                elif head == "v":
                    v = int(rest[0].rstrip(":"))
                    edges.update((v, int(u)) for u in rest[1:])
                elif head == "a":
                    assignment[int(rest[0])] = (float(rest[1]), float(rest[2]))
                else:
                    raise ValueError(f"unknown record {head!r}")
            except (IndexError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
        if n is None:
            raise ValueError(f"{path}: missing 'vertices' record")
        return cls(n, edges, assignment)


def amplitude_bands(n: int, lo: float = AMPLITUDE_RANGE[0], hi: float = AMPLITUDE_RANGE[1]) -> dict:
    """Split the amplitude range into ``n`` contiguous bands, one per node."""
    edges = np.linspace(lo, hi, n + 1)
    return {i: (float(edges[i]), float(edges[i + 1])) for i in range(n)}


@dataclass
class NodeState:
    node_id: int
    params: list[np.ndarray]
    pending: "Message | None" = None


@dataclass
class Message:
    sender: int
    receiver: int  # -1 is the fusion center
    kind: str  # "update" | "broadcast"
    payload: list[np.ndarray]

    @property
    def nbytes(self) -> int:
        return int(sum(p.size for p in self.payload)) * VALUE_WIDTH


@dataclass
class RoundTrace:
    round: int
    upload_bytes: dict[int, int]
    broadcast_bytes: dict[int, int]
    aggregate_norm: float
    failed: list[int] = field(default_factory=list)
    train_loss: float = float("nan")

    @property
    def total_bytes(self) -> int:
        return sum(self.upload_bytes.values()) + sum(self.broadcast_bytes.values())

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "upload_bytes": {str(k): v for k, v in self.upload_bytes.items()},
            "broadcast_bytes": {str(k): v for k, v in self.broadcast_bytes.items()},
            "total_bytes": self.total_bytes,
            "aggregate_norm": self.aggregate_norm,
            "failed": self.failed,
            "train_loss": self.train_loss,
        }


@dataclass
class SensorConfig:
    meta: MetaConfig = field(default_factory=lambda: MetaConfig(tasks_per_batch=1))
    K: int = 10
    Q: int = 10
    fail: dict[int, list[int]] = field(default_factory=dict)  # round -> failed node ids
    eval_every: int = 0
    eval_episodes: int = 50
    workers: int = 1


def node_episode(graph: SensorGraph, seed: int, round_idx: int, node: int, K: int, Q: int, split: str = "train"):
    return sample_sinusoid_episode(episode_rng(seed, split, round_idx, node), K, Q, graph.assignment[node])


def init_nodes(graph: SensorGraph, fusion: MetaState) -> list[NodeState]:
    return [NodeState(v, [p.copy() for p in fusion.params]) for v in range(graph.n_vertices)]


def _node_work(model, node: NodeState, graph, fusion: MetaState, config: SensorConfig, lam: float) -> Message:
    ep = node_episode(graph, fusion.seed, fusion.step, node.node_id, config.K, config.Q)
    res = episode_meta_gradient(
        model, node.params, ep, config.meta, lam, noise_rng(fusion.seed, fusion.step, node.node_id)
    )
    msg = Message(node.node_id, -1, "update", res.grads)
    msg.loss = (res.loss, res.data_loss)
    return msg


def run_round(model, graph: SensorGraph, states: list[NodeState], fusion: MetaState, config: SensorConfig):
    """One protocol round; returns ``(new fusion state, RoundTrace)``."""
    for s in states:
        if any(not np.array_equal(a, b) for a, b in zip(s.params, fusion.params)):
            raise SimulationError(f"node {s.node_id} does not hold the current fusion parameters")
    failed = sorted(set(config.fail.get(fusion.step, ())))
    alive = [s for s in states if s.node_id not in failed]
    if not alive:
        raise SimulationError(f"round {fusion.step}: every node failed")
    lam = config.meta.lambda_effective(fusion.step, config.K) if model.variational else 0.0
    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            msgs = list(pool.map(lambda s: _node_work(model, s, graph, fusion, config, lam), alive))
    else:
        msgs = [_node_work(model, s, graph, fusion, config, lam) for s in alive]
    for s, m in zip(alive, msgs):
        s.pending = m
    # delivery order must not matter: canonicalise by sender id before reducing
    msgs.sort(key=lambda m: m.sender)
    results = [EpisodeResult(m.payload, m.loss[0], m.loss[1]) for m in msgs]
    grads = aggregate(results, config.meta.aggregate)
    new, info = finish_outer_step(
        model, fusion, grads, [r.loss for r in results], [r.data_loss for r in results], config.meta, lam
    )
    broadcast = {}
    for s in states:
        down = Message(-1, s.node_id, "broadcast", [p.copy() for p in new.params])
        s.params = down.payload
        s.pending = None
        broadcast[s.node_id] = down.nbytes
    trace = RoundTrace(
        fusion.step,
        {m.sender: m.nbytes for m in msgs},
        broadcast,
        info["grad_norm"],
        failed,
        info["train_loss"],
    )
    return new, trace


def inference_broadcast_bytes(model, params, eta: float) -> int:
    """Bytes needed to ship an inference-ready model: surviving weights plus biases."""
    from .sparsity import prune

    m = model.with_params(params)
    if not model.variational:
        return m.num_parameters() * VALUE_WIDTH
    pruned = prune(m, eta)
    kept = sum(int(np.count_nonzero(l.theta.data)) for _, l in pruned.variational_layers())
    other = sum(p.size for p, s in zip(pruned.params, pruned.slots) if s.role in ("bias", "weight", "gamma", "beta"))
    return (kept + other) * VALUE_WIDTH


def run_simulation(model, graph: SensorGraph, config: SensorConfig, rounds: int, trace_path=None, state=None):
    """Iterate :func:`run_round`; returns ``(fusion state, history, traces)``."""
    if rounds < 1:
        raise ValueError("rounds must be at least 1")
    fusion = init_state(model, config.meta.seed) if state is None else state
    nodes = init_nodes(graph, fusion)
    history, traces = [], []
    fh = open(trace_path, "w") if trace_path else None
    try:
        for r in range(rounds):
            try:
                fusion, trace = run_round(model, graph, nodes, fusion, config)
            except Exception as exc:
                raise SimulationError(f"round {r} failed: {exc}") from exc
            traces.append(trace)
            record = {"round": r + 1, "total_bytes": trace.total_bytes, "train_loss": trace.train_loss}
            if config.eval_every and (r + 1) % config.eval_every == 0:
                record["node_mse"] = node_mse(model, graph, fusion.params, config)
            history.append(record)
            if fh:
                fh.write(json.dumps(trace.to_dict()) + "\n")
    finally:
        if fh:
            fh.close()
    return fusion, history, traces


def node_mse(model, graph: SensorGraph, params, config: SensorConfig, steps: int = 10) -> dict[int, float]:
    """Post-adaptation query MSE on fresh episodes from each node's distribution."""
    out = {}
    for v in range(graph.n_vertices):
        eps = [
            sample_sinusoid_episode(episode_rng(config.meta.seed, "val", j, v), config.K, 100, graph.assignment[v], "grid")
            for j in range(config.eval_episodes)
        ]
        lam = config.meta.kl_lambda(config.K) if model.variational else 0.0
        out[v] = evaluate_regression(model, params, eps, (steps,), config.meta, lam)[steps]
    return out


def centralized_reference(model, graph: SensorGraph, config: SensorConfig, rounds: int) -> MetaState:
    """Single-process training on the same episode streams, via the serial outer step."""
    meta = dataclasses.replace(config.meta, vectorize=False)
    state = init_state(model, meta.seed)
    for r in range(rounds):
        failed = set(config.fail.get(r, ()))
        eps = [
            node_episode(graph, state.seed, state.step, v, config.K, config.Q)
            for v in range(graph.n_vertices)
            if v not in failed
        ]
        state, _ = outer_step(model, state, eps, meta)
    return state


def oracle_equivalence(model, graph: SensorGraph, config: SensorConfig, rounds: int) -> tuple[bool, float]:
    """Compare the simulated protocol with :func:`centralized_reference`.

    Returns ``(bit_identical, max_abs_diff)``. Only meaningful when no node fails
    mid-protocol, or when failures are mirrored as above.
    """
    sim, _, _ = run_simulation(model, graph, config, rounds)
    ref = centralized_reference(model, graph, config, rounds)
    same = all(np.array_equal(a, b) for a, b in zip(sim.params, ref.params))
    diff = max(float(np.max(np.abs(a - b))) for a, b in zip(sim.params, ref.params))
    return same, diff
