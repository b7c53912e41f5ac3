"""Command-line entry point: ``python3 -m bsmall {run,eval,compare,simulate}``.

Exit codes: 0 success, 1 user error (bad flags, config or inputs),
2 runtime failure (training diverged, oracle mismatch, I/O during a run).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .experiments import (
    ConfigError,
    config_from_dict,
    compare,
    default_meta,
    evaluate_checkpoint,
    format_comparison,
    load_config,
    run_experiment,
)

EXIT_OK, EXIT_USER, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _fail_schedule(text: str) -> dict[int, list[int]]:
    """``"3:1,2;7:0"`` -> {3: [1, 2], 7: [0]}."""
    out = {}
    try:
        for part in filter(None, text.split(";")):
            r, nodes = part.split(":")
            out[int(r)] = _int_list(nodes)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad failure schedule {text!r}; use ROUND:NODE,NODE;...") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bsmall", description="MAML / B-SMALL experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="TOML file; flags override its values")
        sp.add_argument("--alg", choices=("maml", "bsmall"))
        sp.add_argument("--k", type=int, dest="K", help="support examples per task (shots)")
        sp.add_argument("--seeds", type=_int_list)
        sp.add_argument("--steps", type=int, help="meta-steps (0 = evaluate the untrained model)")
        sp.add_argument("--out", help="output directory (default: $BSMALL_OUTPUT_ROOT/<kind>_<alg>_k<K>)")
        sp.add_argument("--kl-weight", type=float)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config field, e.g. meta.outer_lr=0.0005 or train_tasks=50")

    run = sub.add_parser("run", help="train and evaluate across seeds")
    common(run)
    run.add_argument("--exp", choices=("sinusoid", "synth_class", "sensornet"))
    run.add_argument("--eval-steps", type=_int_list)
    run.add_argument("--eval-k", type=_int_list, help="fine-tune shot counts evaluated after training")
    run.add_argument("--train-tasks", type=int, help="finite meta-train task pool (0 = fresh tasks)")
    run.add_argument("--nodes", type=int)
    run.add_argument("--rounds", type=int)
    run.add_argument("--heterogeneous", action="store_true", default=None)
    run.add_argument("--oracle-check", action="store_true", default=None)

    sim = sub.add_parser("simulate", help="sensor-network simulation")
    common(sim)
    sim.add_argument("--nodes", type=int)
    sim.add_argument("--rounds", type=int)
    sim.add_argument("--graph", help="graph specification file")
    sim.add_argument("--heterogeneous", action="store_true", default=None)
    sim.add_argument("--oracle-check", action="store_true", default=None)
    sim.add_argument("--fail", type=_fail_schedule, default={}, help="node failures, ROUND:NODE,NODE;...")

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("checkpoint")
    ev.add_argument("--exp", choices=("sinusoid", "synth_class"), default="sinusoid")
    ev.add_argument("--k", type=int, dest="K", default=10)
    ev.add_argument("--eval-steps", type=_int_list, default=[1, 5, 10])
    ev.add_argument("--episodes", type=int, default=600)
    ev.add_argument("--seed", type=int, default=0)

    cmp_ = sub.add_parser("compare", help="side-by-side of two report.json files")
    cmp_.add_argument("report_a")
    cmp_.add_argument("report_b")
    cmp_.add_argument("--json", action="store_true", help="emit rows as JSON")
    return p


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def resolve_config(args, kind: str):
    """File values, then protocol defaults for missing keys, then flags."""
    d = load_config(args.config) if args.config else {}
    kind = kind or d.get("kind", "sinusoid")
    d["kind"] = kind
    meta = d.setdefault("meta", {})
    alg = args.alg or d.get("algorithm", "maml")
    for k, v in default_meta(kind, alg).items():
        meta.setdefault(k, v)
    flags = {
        "algorithm": args.alg,
        "K": args.K,
        "seeds": args.seeds,
        "output_dir": args.out,
        "eval_steps": getattr(args, "eval_steps", None),
        "eval_K": getattr(args, "eval_k", None),
        "train_tasks": getattr(args, "train_tasks", None),
        "nodes": getattr(args, "nodes", None),
        "rounds": getattr(args, "rounds", None),
        "heterogeneous": getattr(args, "heterogeneous", None),
        "oracle_check": getattr(args, "oracle_check", None),
        "graph_file": getattr(args, "graph", None),
    }
    d.update({k: v for k, v in flags.items() if v is not None})
    if args.steps is not None:
        meta["total_meta_steps"] = args.steps
    if args.kl_weight is not None:
        meta["kl_weight"] = args.kl_weight
    if "K" in d:
        meta["K"] = d["K"]
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected KEY=VALUE")
        k, v = item.split("=", 1)
        _set_path(d, k.strip(), _parse_value(v))
    return config_from_dict(d)


def _print_report(report: dict) -> None:
    if report["kind"] == "sensornet":
        print(json.dumps(report, indent=2))
        return
    shown = {str(k) for k in report["config"]["eval_steps"]}
    for cell, c in report["cells"].items():
        if cell.split("@")[1].split("/")[0] not in shown:
            continue
        print(f"{report['algorithm']:>7} {cell:<14} {c['mean']:.4f} ± {c['ci95']:.4f}")
    if report.get("sparsity"):
        s = report["sparsity"]
        print(f"{report['algorithm']:>7} {'sparsity':<14} {s['mean']:.4f} ± {s['ci95']:.4f}")


def _cmd_run(args, kind=None) -> int:
    cfg = resolve_config(args, kind or args.exp)
    if cfg.kind == "sensornet" and getattr(args, "fail", None):
        raise ConfigError("--fail is only accepted by 'simulate'")
    report = run_experiment(cfg)
    _print_report(report)
    print(f"artifacts: {cfg.out_path()}")
    if report.get("oracle_equal") is False:
        print(f"oracle check FAILED: max |diff| = {report['oracle_max_abs_diff']:g}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _cmd_simulate(args) -> int:
    from .models import sinusoid_mlp
    from .sensornet import SensorConfig, SensorGraph, run_simulation

    if not args.fail:
        return _cmd_run(args, "sensornet")
    cfg = resolve_config(args, "sensornet")
    if cfg.oracle_check:
        raise ConfigError("oracle_check: the centralized equivalence assumes every node is reachable; drop --fail or set oracle_check=false")
    meta = dataclasses.replace(cfg.meta, seed=cfg.seeds[0])
    graph = SensorGraph.from_file(cfg.graph_file) if cfg.graph_file else SensorGraph.complete(cfg.nodes, cfg.heterogeneous)
    scfg = SensorConfig(meta, cfg.K, meta.Q, fail=args.fail)
    model = sinusoid_mlp(cfg.variational, meta.seed)
    out = cfg.out_path()
    out.mkdir(parents=True, exist_ok=True)
    _, history, traces = run_simulation(model, graph, scfg, cfg.rounds, out / "traces.ndjson")
    print(json.dumps({"rounds": cfg.rounds, "total_bytes": sum(t.total_bytes for t in traces),
                      "failed_rounds": {t.round: t.failed for t in traces if t.failed}}, indent=2))
    return EXIT_OK


def _cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint: no such file {args.checkpoint}")
    res = evaluate_checkpoint(args.checkpoint, args.exp, args.K, args.eval_steps, args.episodes, args.seed)
    name = "mse" if args.exp == "sinusoid" else "acc"
    for s, v in res.items():
        print(f"{name}@{s} {v:.6f}")
    return EXIT_OK


def _cmd_compare(args) -> int:
    reports = []
    for path in (args.report_a, args.report_b):
        try:
            reports.append(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"report: cannot read {path}: {exc}") from None
    a, b = reports
    try:
        rows = compare(a, b)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.json:
        print(json.dumps(rows, indent=2))
    else:
        print(format_comparison(rows, a["algorithm"], b["algorithm"]))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handlers = {"run": _cmd_run, "simulate": _cmd_simulate, "eval": _cmd_eval, "compare": _cmd_compare}
    try:
        return handlers[args.command](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception as exc:  # training or simulation failure; partial artifacts stay on disk
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
