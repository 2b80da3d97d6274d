"""Command-line entry point: parse, graph, solve, gen, train, eval, bench.

Exit codes: 0 success, 1 usage error, 2 bad input, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .autodiff import NonFiniteError
from .dss import CircuitError, DSSSyntaxError, parse_path, spec_to_json_text
from .grid import GRAPH_SCHEMA, ControlState, build_multigraph
from .io import atomic_write_text
from .model import CHECKPOINT_SCHEMA, ModelConfig, PowerFlowMultiNet
from .solver import SOLUTION_SCHEMA, PowerFlowError, SolverConfig, solution_json_text, solve
from .training import (
    DATASET_SCHEMA,
    FEATURE_SCHEMA_VERSION,
    DatasetError,
    DiscardError,
    Timeseries,
    TrainConfig,
    TrainingError,
    Uniform,
    benchmark,
    evaluate,
    generate_dataset,
    load_dataset,
    train,
    train_config_dict,
)

log = logging.getLogger("multigraph_pf")

EXIT_OK, EXIT_USAGE, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)} - {"seed"}
TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _version_text() -> str:
    return (
        f"multigraph-pf {__version__}\n"
        f"graph schema: {GRAPH_SCHEMA}\n"
        f"solution schema: {SOLUTION_SCHEMA}\n"
        f"dataset schema: {DATASET_SCHEMA} (features v{FEATURE_SCHEMA_VERSION})\n"
        f"checkpoint schema: {CHECKPOINT_SCHEMA}"
    )


class _Version(argparse.Action):
    def __init__(self, option_strings, dest, **kw):
        super().__init__(option_strings, dest, nargs=0, help="print package and file-format versions")

    def __call__(self, parser, namespace, values, option_string=None):
        print(_version_text())
        parser.exit(0)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("--config", default=None, help="TOML or JSON file with config fields")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")

    parser = _Parser(prog="multigraph-pf", description="Power flow surrogate pipeline.")
    parser.add_argument("--version", action=_Version)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("parse", parents=[common], help="parse a circuit file to JSON")
    p.add_argument("circuit")
    p.add_argument("--json-out", default=None, help="same as --out")

    p = sub.add_parser("graph", parents=[common], help="build the multigraph and dump it as JSON")
    p.add_argument("circuit")

    p = sub.add_parser("solve", parents=[common], help="run the power flow solver")
    p.add_argument("circuit")
    p.add_argument("--tolerance", type=float, default=None)
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--caps", default=None, help="capacitor states, e.g. 1,0")
    p.add_argument("--taps", default=None, help="tap positions per transformer, e.g. 0,2,-1")

    p = sub.add_parser("gen", parents=[common], help="generate train/val datasets")
    p.add_argument("circuit")
    p.add_argument("--mode", choices=["uniform", "timeseries"], default=None)
    p.add_argument("--delta", type=float, default=None, help="uniform scaling half-width")
    p.add_argument("--length", type=int, default=None, help="timeseries steps per day")
    p.add_argument("--sigma", type=float, default=None, help="timeseries lognormal noise")
    p.add_argument("--n", type=int, default=None, help="total mutants, split 80/20 into train/val")
    p.add_argument("--jobs", type=int, default=None)

    p = sub.add_parser("train", parents=[common], help="train a model; --out is a directory")
    p.add_argument("train_set")
    p.add_argument("--val", default=None, help="validation dataset file")
    for name, typ in [("epochs", int), ("batch_size", int), ("lr0", float), ("hidden_dim", int),
                      ("state_dim", int), ("num_layers", int), ("mlp_depth", int)]:
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)

    p = sub.add_parser("eval", parents=[common], help="compute NSE metrics and timings")
    p.add_argument("checkpoint")
    p.add_argument("dataset")

    p = sub.add_parser("bench", parents=[common], help="time solver versus model forward")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--batch-sizes", default=None, help="comma-separated, default 1,128")
    p.add_argument("--repeats", type=int, default=None)
    return parser


def load_config(path) -> dict:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix.lower() == ".toml":
            try:
                import tomllib
            except ImportError:  # Python < 3.11
                import tomli as tomllib
            doc = tomllib.loads(raw.decode("utf-8"))
        else:
            doc = json.loads(raw)
    except ValueError as exc:
        raise InputError(f"invalid config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise InputError(f"config {path} must be a table/object")
    # allow [model] / [train] sections or a flat table
    flat = {}
    for key, value in doc.items():
        if isinstance(value, dict) and key in ("model", "train", "gen", "solver", "bench"):
            flat.update(value)
        else:
            flat[key] = value
    return flat


def _settings(args, defaults: dict) -> dict:
    """defaults < config file < command-line flags."""
    merged = dict(defaults)
    if args.config:
        cfg = load_config(args.config)
        unknown = set(cfg) - set(defaults)
        if unknown:
            raise InputError(f"unknown config field(s) for {args.command}: {', '.join(sorted(unknown))}")
        merged.update(cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _emit(text: str, out) -> None:
    if out:
        atomic_write_text(out, text if text.endswith("\n") else text + "\n")
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _load_circuit(path):
    spec = parse_path(path)
    for w in spec.warnings:
        log.warning("%s: %s", path, w)
    return spec


def cmd_parse(args) -> int:
    if args.json_out and args.out and args.json_out != args.out:
        raise UsageError("--json-out and --out disagree")
    _emit(spec_to_json_text(_load_circuit(args.circuit)), args.json_out or args.out)
    return EXIT_OK


def cmd_graph(args) -> int:
    g = build_multigraph(_load_circuit(args.circuit))
    _emit(json.dumps(g.to_json(), indent=2), args.out)
    return EXIT_OK


def cmd_solve(args) -> int:
    s = _settings(args, {"tolerance": SolverConfig.tolerance, "max_iter": SolverConfig.max_iter})
    spec = _load_circuit(args.circuit)
    state = ControlState.default(spec)
    if args.caps is not None or args.taps is not None:
        caps = _int_list(args.caps, "--caps") if args.caps is not None else list(state.cap_states)
        taps = _int_list(args.taps, "--taps") if args.taps is not None else list(state.tap_positions)
        if any(c not in (0, 1) for c in caps):
            raise InputError("--caps entries must be 0 or 1")
        state = ControlState(tuple(caps), tuple(taps))
    g = build_multigraph(spec, state)
    sol = solve(g, SolverConfig(tolerance=float(s["tolerance"]), max_iter=int(s["max_iter"])))
    log.info("converged in %d iterations", sol.iterations)
    _emit(solution_json_text(g, sol), args.out)
    return EXIT_OK


def _int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise InputError(f"{flag}: expected comma-separated integers") from exc


def cmd_gen(args) -> int:
    s = _settings(args, {"mode": "uniform", "delta": 0.1, "length": 96, "sigma": 0.05, "n": 1000, "jobs": 1,
                         "seed": 0, "tolerance": SolverConfig.tolerance, "max_iter": SolverConfig.max_iter})
    if s["n"] < 2:
        raise InputError("--n must be at least 2")
    mode = Uniform(float(s["delta"])) if s["mode"] == "uniform" else Timeseries(int(s["length"]), float(s["sigma"]))
    n_train = int(round(0.8 * s["n"]))
    spec = _load_circuit(args.circuit)
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    tr, va = generate_dataset(spec, n_train, s["n"] - n_train, mode, int(s["seed"]), out_dir,
                              solver_cfg=SolverConfig(float(s["tolerance"]), int(s["max_iter"])), jobs=int(s["jobs"]))
    log.info("wrote %s and %s", tr, va)
    return EXIT_OK


def _train_configs(args) -> tuple[ModelConfig, TrainConfig]:
    defaults = {f: getattr(ModelConfig, f) for f in MODEL_FIELDS}
    defaults.update({f: getattr(TrainConfig, f) for f in TRAIN_FIELDS})
    defaults["seed"] = 0
    s = _settings(args, defaults)
    milestones = s["milestones"]
    if milestones is not None:
        milestones = tuple((int(e), float(m)) for e, m in milestones)
    try:
        mcfg = ModelConfig(**{k: s[k] for k in MODEL_FIELDS}, seed=int(s["seed"]))
        tcfg = TrainConfig(**{k: s[k] for k in TRAIN_FIELDS if k != "milestones"}, milestones=milestones,
                           seed=int(s["seed"]))
    except (TypeError, ValueError) as exc:
        raise InputError(f"invalid training config: {exc}") from exc
    return mcfg, tcfg


def cmd_train(args) -> int:
    mcfg, tcfg = _train_configs(args)
    train_set = load_dataset(args.train_set)
    val_set = load_dataset(args.val) if args.val else None
    if val_set is not None and val_set.header["topology_hash"] != train_set.header["topology_hash"]:
        raise InputError("train and validation sets come from different circuits")
    out_dir = Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)

    def progress(h):
        val = "" if h["val_loss"] is None else f" val={h['val_loss']:.4e}"
        log.info("epoch %d lr=%.1e train=%.4e%s", h["epoch"], h["lr"], h["train_loss"], val)

    res = train(train_set, val_set, mcfg, tcfg, checkpoint_path=out_dir / "model.json", progress=progress)
    summary = {
        "model_config": dataclasses.asdict(mcfg),
        "train_config": train_config_dict(tcfg),
        "initial_train_loss": res.initial_train_loss,
        "initial_val_loss": res.initial_val_loss,
        "final_train_loss": res.final_train_loss,
        "final_val_loss": res.final_val_loss,
        "best_val_loss": res.best_val_loss,
        "history": res.history,
    }
    atomic_write_text(out_dir / "history.json", json.dumps(summary, indent=2) + "\n")
    log.info("checkpoint %s, history %s", out_dir / "model.json", out_dir / "history.json")
    return EXIT_OK


def metrics_table(report: dict) -> str:
    lines = [f"{'target':<8}{'NSE mean':>14}{'NSE std':>14}"]
    for key, row in report["nse"].items():
        lines.append(f"{key:<8}{row['mean']:>14.4e}{row['std']:>14.4e}")
    for key in ("forward_time", "solver_time"):
        if key in report:
            lines.append(f"{key:<14}{report[key]['mean'] * 1e3:>10.3f} ms +/- {report[key]['std'] * 1e3:.3f}")
    return "\n".join(lines)


def bench_table(report: dict) -> str:
    s = report["solver"]
    lines = [f"solver        {s['per_sample_mean'] * 1e3:10.3f} ms +/- {s['per_sample_std'] * 1e3:.3f}"]
    for bs, row in report["forward"].items():
        lines.append(f"forward b={bs:<4}{row['per_sample_mean'] * 1e3:10.3f} ms +/- {row['per_sample_std'] * 1e3:.3f}"
                     f"  speedup {row['speedup_vs_solver']:.2f}x")
    return "\n".join(lines)


def _load_model(path) -> PowerFlowMultiNet:
    try:
        return PowerFlowMultiNet.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot load checkpoint {path}: {exc}") from exc


def _report(args, report: dict, table: str) -> None:
    text = json.dumps(report, indent=2)
    if args.out:
        _emit(text, args.out)
        if not args.quiet:
            print(table)
    else:
        print(text)
        if not args.quiet:
            print(table, file=sys.stderr)


def cmd_eval(args) -> int:
    s = _settings(args, {"timing_samples": 20, "repeats": 10})
    report = evaluate(_load_model(args.checkpoint), load_dataset(args.dataset),
                      timing_samples=int(s["timing_samples"]), repeats=int(s["repeats"]))
    _report(args, report, metrics_table(report))
    return EXIT_OK


def cmd_bench(args) -> int:
    s = _settings(args, {"batch_sizes": "1,128", "repeats": 10})
    sizes = s["batch_sizes"]
    try:
        sizes = tuple(int(x) for x in (sizes.split(",") if isinstance(sizes, str) else sizes))
    except ValueError as exc:
        raise InputError(f"bad --batch-sizes: {exc}") from exc
    if not sizes or min(sizes) < 1:
        raise InputError("batch sizes must be positive")
    report = benchmark(_load_model(args.checkpoint), load_dataset(args.dataset), sizes, repeats=int(s["repeats"]))
    _report(args, report, bench_table(report))
    return EXIT_OK


COMMANDS = {"parse": cmd_parse, "graph": cmd_graph, "solve": cmd_solve, "gen": cmd_gen,
            "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(message)s", force=True)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (PowerFlowError, TrainingError, DiscardError, NonFiniteError, FloatingPointError) as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except (InputError, DSSSyntaxError, CircuitError, DatasetError, OSError, ValueError, KeyError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
