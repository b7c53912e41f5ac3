"""Experiment protocols: sinusoid regression, synthetic few-shot classification
and the sensor-network simulation, with on-disk artifacts.

Per seed a directory ``<out>/seed<k>/`` receives ``metrics.ndjson`` (training
records followed by the final-evaluation records), ``sparsity.json`` and the
final checkpoint. The merge step then renders ``table.csv``, ``sparsity.json``,
``figure_*.csv`` and ``report.json`` from those metrics files only.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layers import save_checkpoint
from .meta import MetaConfig, meta_train
from .models import ModelConfig, conv4, sinusoid_mlp
from .sparsity import measure_sparsity

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "BSMALL_OUTPUT_ROOT"
KINDS = ("sinusoid", "synth_class", "sensornet")
ALGORITHMS = ("maml", "bsmall")
TEST_SEED_OFFSET = 10_000


class ConfigError(ValueError):
    """Invalid experiment configuration; the message names the field."""


@dataclass
class ExperimentConfig:
    kind: str = "sinusoid"
    algorithm: str = "maml"
    seeds: list[int] = field(default_factory=lambda: [0])
    output_dir: str = ""
    eval_steps: list[int] = field(default_factory=lambda: [1, 5, 10])
    K: int = 10
    eval_K: list[int] = field(default_factory=list)  # empty: evaluate at K only
    eval_episodes: int = 600
    test_reading: str = "tasks"  # tasks | points
    train_tasks: int = 0  # finite meta-train pool size; 0 = fresh task every episode
    pool_points: int = 20
    # synthetic classification
    n_way: int = 5
    class_noise: float = 0.3
    train_classes: int = 64
    test_classes: int = 20
    per_class: int = 20
    filters: int = 32
    # sensor network
    nodes: int = 4
    rounds: int = 50
    heterogeneous: bool = False
    oracle_check: bool = False
    graph_file: str = ""
    meta: MetaConfig = field(default_factory=MetaConfig)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind: must be one of {KINDS}, got {self.kind!r}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm: must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed is required")
        if not self.eval_steps or any(s < 0 for s in self.eval_steps):
            raise ConfigError("eval_steps: need a non-empty list of nonnegative step counts")
        if self.K < 1:
            raise ConfigError("K: must be positive")
        if self.test_reading not in ("tasks", "points"):
            raise ConfigError("test_reading: must be 'tasks' or 'points'")
        if self.kind == "sensornet" and self.nodes < 1:
            raise ConfigError("nodes: must be positive")
        if self.train_tasks and self.pool_points < self.K + self.meta.Q:
            raise ConfigError("pool_points: must be at least K + meta.Q")

    @property
    def variational(self) -> bool:
        return self.algorithm == "bsmall"

    def out_path(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        return root / f"{self.kind}_{self.algorithm}_k{self.K}"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_META_FIELDS = {f.name for f in dataclasses.fields(MetaConfig)}
_EXP_FIELDS = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"meta"}


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    meta = dict(d.pop("meta", {}) or {})
    for k in meta:
        if k not in _META_FIELDS:
            raise ConfigError(f"meta.{k}: unknown field")
    for k in d:
        if k not in _EXP_FIELDS:
            raise ConfigError(f"{k}: unknown field")
    try:
        meta_cfg = MetaConfig(**meta)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"meta: {exc}") from None
    try:
        return ExperimentConfig(meta=meta_cfg, **d)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config: {path}: {exc}") from None


def default_meta(kind: str, algorithm: str) -> dict:
    """Protocol defaults per experiment kind (overridable from file or flags)."""
    if kind == "synth_class":
        return {
            "loss": "ce", "K": 1, "Q": 5, "tasks_per_batch": 2, "inner_steps_train": 5,
            "inner_steps_eval": 10, "total_meta_steps": 2000, "val_every": 100, "val_episodes": 10,
        }
    if kind == "sensornet":
        return {"tasks_per_batch": 1, "total_meta_steps": 50}
    return {"vectorize": True, "val_every": 100, "val_episodes": 25}


def ci95(values) -> float:
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return 0.0
    return float(1.96 * v.std(ddof=1) / math.sqrt(v.size))


def _write_ndjson(path: Path, record: dict) -> None:
    with path.open("a") as fh:
        fh.write(json.dumps(record) + "\n")


def read_metrics(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


# ------------------------------------------------------------------ sinusoid


def _sinusoid_sources(cfg: ExperimentConfig, seed: int):
    from .tasks import make_sinusoid_pool, pool_source, sinusoid_source

    if cfg.train_tasks:
        pool = make_sinusoid_pool(seed, cfg.train_tasks, cfg.pool_points)
        train = pool_source(pool, seed, cfg.K, cfg.meta.Q)
    else:
        train = sinusoid_source(seed, cfg.K, cfg.meta.Q)
    val = sinusoid_source(seed, cfg.K, cfg.meta.Q, "val")
    return train, val


def run_sinusoid_seed(cfg: ExperimentConfig, seed: int, seed_dir: Path) -> None:
    from .tasks import eval_episodes, evaluate_regression

    meta = dataclasses.replace(cfg.meta, seed=seed, K=cfg.K)
    model = sinusoid_mlp(cfg.variational, seed)
    train, val = _sinusoid_sources(cfg, seed)
    metrics = seed_dir / "metrics.ndjson"
    state, _ = meta_train(meta, train, model, None, val, metrics, seed_dir / "checkpoints" if meta.checkpoint_every else None)
    final = model.with_params(state.params)
    save_checkpoint(final, seed_dir / "checkpoint.json", {"seed": seed, "step": state.step})
    steps = list(range(0, max(cfg.eval_steps) + 1))
    for k in cfg.eval_K or [cfg.K]:
        eps = eval_episodes(TEST_SEED_OFFSET + seed, k, cfg.eval_episodes, cfg.test_reading)
        mse = evaluate_regression(model, state.params, eps, steps, meta)
        _write_ndjson(metrics, {"record": "final_eval", "seed": seed, "K": k, "metric": "mse", "by_steps": {str(s): v for s, v in mse.items()}})
    _write_sparsity(final, cfg, seed, seed_dir, metrics)


def _write_sparsity(final, cfg, seed, seed_dir, metrics):
    if cfg.variational:
        rep = measure_sparsity(final, cfg.meta.eta)
        rep.save(seed_dir / "sparsity.json")
        _write_ndjson(metrics, {"record": "final_sparsity", "seed": seed, **rep.to_dict()})


# ------------------------------------------------------------------ classification


def classification_pools(cfg: ExperimentConfig, seed: int):
    from .tasks import make_synthetic_classes

    train = make_synthetic_classes(seed, cfg.train_classes, cfg.per_class, 16, cfg.class_noise)
    test = make_synthetic_classes(seed + TEST_SEED_OFFSET, cfg.test_classes, cfg.per_class, 16, cfg.class_noise)
    return train, test


def run_classification_seed(cfg: ExperimentConfig, seed: int, seed_dir: Path) -> None:
    from .tasks import bayes_ceiling, classification_source, evaluate_classification

    meta = dataclasses.replace(cfg.meta, seed=seed, K=cfg.K, loss="ce")
    train_pool, test_pool = classification_pools(cfg, seed)
    model = conv4(ModelConfig("conv4", cfg.variational, cfg.n_way, cfg.filters, 1, 16), seed=seed)
    train = classification_source(train_pool, seed, cfg.n_way, cfg.K, meta.Q)
    val = classification_source(test_pool, seed, cfg.n_way, cfg.K, meta.Q, "val")
    metrics = seed_dir / "metrics.ndjson"
    state, _ = meta_train(meta, train, model, None, val, metrics, seed_dir / "checkpoints" if meta.checkpoint_every else None)
    final = model.with_params(state.params)
    save_checkpoint(final, seed_dir / "checkpoint.json", {"seed": seed, "step": state.step})
    test = classification_source(test_pool, seed, cfg.n_way, cfg.K, meta.Q, "test")
    eps = [test(0, i) for i in range(cfg.eval_episodes)]
    acc = evaluate_classification(model, state.params, eps, sorted(set(cfg.eval_steps)), meta)
    ceiling = bayes_ceiling(test_pool, seed, cfg.n_way, cfg.K, meta.Q, min(cfg.eval_episodes, 200))
    _write_ndjson(metrics, {"record": "final_eval", "seed": seed, "K": cfg.K, "metric": "acc", "by_steps": {str(s): v for s, v in acc.items()}, "bayes_ceiling": ceiling})
    _write_sparsity(final, cfg, seed, seed_dir, metrics)


# ------------------------------------------------------------------ sensor network


def run_sensornet(cfg: ExperimentConfig, out: Path) -> dict:
    from .sensornet import SensorConfig, SensorGraph, oracle_equivalence, run_simulation

    seed = cfg.seeds[0]
    meta = dataclasses.replace(cfg.meta, seed=seed, K=cfg.K)
    if cfg.graph_file:
        graph = SensorGraph.from_file(cfg.graph_file)
    else:
        graph = SensorGraph.complete(cfg.nodes, cfg.heterogeneous)
    model = sinusoid_mlp(cfg.variational, seed)
    scfg = SensorConfig(meta, cfg.K, meta.Q, eval_every=max(1, cfg.rounds // 5), eval_episodes=20)
    out.mkdir(parents=True, exist_ok=True)
    state, history, traces = run_simulation(model, graph, scfg, cfg.rounds, out / "traces.ndjson")
    with (out / "metrics.ndjson").open("w") as fh:
        for rec in history:
            fh.write(json.dumps(rec) + "\n")
    result = {
        "kind": "sensornet",
        "algorithm": cfg.algorithm,
        "nodes": graph.n_vertices,
        "rounds": cfg.rounds,
        "total_bytes": int(sum(t.total_bytes for t in traces)),
        "bytes_per_round": traces[0].total_bytes,
    }
    if cfg.oracle_check:
        ok, diff = oracle_equivalence(model, graph, scfg, cfg.rounds)
        result["oracle_equal"] = ok
        result["oracle_max_abs_diff"] = diff
    save_checkpoint(model.with_params(state.params), out / "checkpoint.json")
    (out / "report.json").write_text(json.dumps(result, indent=2))
    return result


# ------------------------------------------------------------------ merge / report


def overfit_gap(history: list[dict], frac: float = 0.1) -> float:
    """|mean train loss - mean validation loss| over the final ``frac`` of steps."""
    steps = [r["step"] for r in history if "train_loss" in r and "record" not in r]
    if not steps:
        return float("nan")
    cut = max(steps) - max(1, int(round(frac * max(steps))))
    train = [r["train_loss"] for r in history if "train_loss" in r and r.get("step", -1) > cut and "record" not in r]
    val = [r["val_loss"] for r in history if r.get("val_loss") is not None and r.get("step", -1) > cut]
    if not train or not val:
        return float("nan")
    return abs(float(np.mean(train)) - float(np.mean(val)))


def merge(cfg: ExperimentConfig, out: Path) -> dict:
    seed_records = {s: read_metrics(out / f"seed{s}" / "metrics.ndjson") for s in cfg.seeds}
    cells: dict[str, dict] = {}
    bayes = []
    for s, recs in seed_records.items():
        for r in recs:
            if r.get("record") == "final_eval":
                for steps, v in r["by_steps"].items():
                    key = f"{r['metric']}@{steps}" + (f"/K={r['K']}" if r["K"] != cfg.K else "")
                    cells.setdefault(key, {"values": [], "seeds": []})
                    cells[key]["values"].append(v)
                    cells[key]["seeds"].append(s)
                if "bayes_ceiling" in r:
                    bayes.append(r["bayes_ceiling"])
    for c in cells.values():
        c["mean"] = float(np.mean(c["values"]))
        c["ci95"] = ci95(c["values"])
    sparsity = None
    if cfg.variational:
        ratios = [r["ratio"] for recs in seed_records.values() for r in recs if r.get("record") == "final_sparsity"]
        sparsity = {"eta": cfg.meta.eta, "values": ratios, "mean": float(np.mean(ratios)), "ci95": ci95(ratios)}
        (out / "sparsity.json").write_text(json.dumps(sparsity, indent=2))
    gaps = {str(s): overfit_gap(recs) for s, recs in seed_records.items()}
    report = {
        "kind": cfg.kind,
        "algorithm": cfg.algorithm,
        "K": cfg.K,
        "seeds": cfg.seeds,
        "cells": cells,
        "sparsity": sparsity,
        "overfit_gap": gaps,
        "config": cfg.to_dict(),
    }
    if bayes:
        report["bayes_ceiling"] = float(np.mean(bayes))
    table_steps = {str(s) for s in cfg.eval_steps}
    with (out / "table.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "cell", "mean", "ci95"] + [f"seed{s}" for s in cfg.seeds])
        for key, c in cells.items():
            if key.split("@")[1].split("/")[0] in table_steps:
                w.writerow([cfg.algorithm, key, repr(c["mean"]), repr(c["ci95"])] + [repr(v) for v in c["values"]])
        if sparsity:
            w.writerow([cfg.algorithm, f"sparsity@eta={cfg.meta.eta}", repr(sparsity["mean"]), repr(sparsity["ci95"])] + [repr(v) for v in sparsity["values"]])
    _write_figures(cfg, out, cells, seed_records)
    (out / "report.json").write_text(json.dumps(report, indent=2))
    return report


def _write_figures(cfg, out, cells, seed_records):
    metric = "acc" if cfg.kind == "synth_class" else "mse"
    with (out / f"figure_{metric}_vs_steps.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "K", "steps", "mean", "ci95"])
        for key, c in cells.items():
            head, _, kpart = key.partition("/")
            k = int(kpart.split("=")[1]) if kpart else cfg.K
            w.writerow([cfg.algorithm, k, int(head.split("@")[1]), repr(c["mean"]), repr(c["ci95"])])
    with (out / "figure_loss_curves.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "seed", "step", "train_loss", "val_loss"])
        for s, recs in seed_records.items():
            for r in recs:
                if "record" in r:
                    continue
                v = r.get("val_loss")
                w.writerow([cfg.algorithm, s, r["step"], repr(r["train_loss"]), "" if v is None else repr(v)])


def run_experiment(cfg: ExperimentConfig) -> dict:
    out = cfg.out_path()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    if cfg.kind == "sensornet":
        return run_sensornet(cfg, out)
    runner = run_sinusoid_seed if cfg.kind == "sinusoid" else run_classification_seed
    for seed in cfg.seeds:
        seed_dir = out / f"seed{seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        log.info("training %s/%s seed %d", cfg.kind, cfg.algorithm, seed)
        runner(cfg, seed, seed_dir)
    return merge(cfg, out)


# ------------------------------------------------------------------ comparison


def _lower_is_better(cell: str) -> bool:
    return cell.startswith("mse")


def compare(report_a: dict, report_b: dict) -> list[dict]:
    """Align two reports cell by cell; ``delta`` is b - a."""
    if report_a["kind"] != report_b["kind"]:
        raise ValueError(f"cannot compare a {report_a['kind']} report with a {report_b['kind']} report")
    rows = []
    for cell in sorted(set(report_a["cells"]) | set(report_b["cells"]), key=_cell_order):
        a = report_a["cells"].get(cell)
        b = report_b["cells"].get(cell)
        row = {"cell": cell, "a": a["mean"] if a else None, "b": b["mean"] if b else None}
        if a and b:
            row["delta"] = b["mean"] - a["mean"]
            if row["delta"] == 0:
                row["winner"] = "tie"
            elif (row["delta"] < 0) == _lower_is_better(cell):
                row["winner"] = report_b["algorithm"]
            else:
                row["winner"] = report_a["algorithm"]
        else:
            row["delta"] = None
            row["winner"] = "n/a"
        rows.append(row)
    sa, sb = report_a.get("sparsity"), report_b.get("sparsity")
    rows.append({
        "cell": "sparsity",
        "a": sa["mean"] if sa else "n/a",
        "b": sb["mean"] if sb else "n/a",
        "delta": (sb["mean"] - sa["mean"]) if sa and sb else "n/a",
        "winner": "n/a",
    })
    return rows


def _cell_order(cell: str):
    head, _, k = cell.partition("/")
    name, _, steps = head.partition("@")
    return (k, name, int(steps) if steps.isdigit() else 0)


def format_comparison(rows: list[dict], label_a: str, label_b: str) -> str:
    def fmt(v):
        if v is None:
            return "n/a"
        return v if isinstance(v, str) else f"{v:.4f}"

    lines = [f"{'cell':<16}{label_a:>12}{label_b:>12}{'delta':>12}  winner"]
    for r in rows:
        lines.append(f"{r['cell']:<16}{fmt(r['a']):>12}{fmt(r['b']):>12}{fmt(r['delta']):>12}  {r['winner']}")
    return "\n".join(lines)


# ------------------------------------------------------------------ checkpoint evaluation


def evaluate_checkpoint(path, kind: str = "sinusoid", K: int = 10, eval_steps=(1, 5, 10), episodes: int = 600,
                        seed: int = 0, meta: MetaConfig | None = None, reading: str = "tasks") -> dict:
    """Score a saved model on the held-out split; returns ``{steps: metric}``."""
    from .layers import load_checkpoint
    from .tasks import classification_source, eval_episodes, evaluate_classification, evaluate_regression

    model = load_checkpoint(path)
    meta = meta or MetaConfig(K=K)
    if kind == "sinusoid":
        eps = eval_episodes(TEST_SEED_OFFSET + seed, K, episodes, reading)
        return evaluate_regression(model, model.params, eps, list(eval_steps), meta)
    if kind == "synth_class":
        cfg = ExperimentConfig(kind=kind, K=K, n_way=model.specs[-1].n_out)
        _, test_pool = classification_pools(cfg, seed)
        meta = dataclasses.replace(meta, loss="ce")
        src = classification_source(test_pool, seed, cfg.n_way, K, meta.Q, "test")
        return evaluate_classification(model, model.params, [src(0, i) for i in range(episodes)], list(eval_steps), meta)
    raise ConfigError(f"kind: cannot evaluate a checkpoint for {kind!r}")
