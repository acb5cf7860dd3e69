"""Command-line driver: ``safl run | sweep | report | gen-data | bound``.

Exit codes: 0 success, 1 configuration error, 2 training divergence,
3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import convergence
from .config import ConfigError, RunConfig, load_config, parse_assignment
from .encoder import ModelState, save_checkpoint
from .fedsim import DivergenceError, RunResult, make_clients, run_federated
from .report import report_run
from .selector import write_trace
from .synthdata import generate, partition, save_partition, skew_statistic, train_eval_split
from .tensor import RngStream

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3

SUMMARY_FIELDS = [
    "strategy", "rounds", "seed", "initial_f1", "final_f1", "best_f1", "final_loss",
    "total_bytes_up", "total_bytes_down", "reduction_pct", "layer_reduction_pct", "epsilon_total",
]  # fmt: skip

log = logging.getLogger("safl")


class OutputExistsError(OSError):
    pass


@dataclass
class Prepared:
    config: RunConfig
    train: object
    eval: object
    shards: list[list[int]]


def prepare(cfg: RunConfig) -> Prepared:
    corpus = generate(cfg.corpus_spec())
    train, evl = train_eval_split(corpus, cfg.eval_fraction, cfg.seed)
    shards = partition(train, cfg.partition_spec())
    return Prepared(cfg, train, evl, shards)


def _claim_dir(path: Path, force: bool, marker: str) -> None:
    if path.exists() and (path / marker).exists() and not force:
        raise OutputExistsError(f"output directory {path} already holds a run; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    for name in ("rounds.jsonl", "selection_trace.jsonl"):
        (path / name).unlink(missing_ok=True)


def execute_run(cfg: RunConfig, out_dir: str | Path, force: bool = False) -> RunResult:
    """Run one configured simulation and write every artifact into ``out_dir``."""
    cfg.validate()
    out = Path(out_dir)
    _claim_dir(out, force, "summary.csv")
    cfg.with_overrides(output_dir=str(out)).save(out / "resolved_config.ini")
    prep = prepare(cfg)
    model = ModelState.init(cfg.encoder_config(), RngStream(cfg.seed, "model:init"))
    clients = make_clients(prep.train, prep.shards)
    rounds_path = out / "rounds.jsonl"
    trace_path = out / "selection_trace.jsonl"
    rounds_path.touch()
    trace_path.touch()

    def on_round(report):
        with open(rounds_path, "a") as fh:
            fh.write(json.dumps(report.to_dict()) + "\n")
        write_trace(report.trace, trace_path)

    result = run_federated(model, clients, cfg.strategy_obj(), cfg.fed_config(), prep.eval, on_round)
    result.privacy.dump(out / "privacy_ledger.json")
    save_checkpoint(result.model, out / "model.npz")
    write_summary(out / "summary.csv", [summary_row(cfg, result)])
    return result


def summary_row(cfg: RunConfig, result: RunResult) -> dict:
    eps = result.privacy.epsilon_total
    return {
        "strategy": cfg.strategy_obj().label,
        "rounds": cfg.rounds,
        "seed": cfg.seed,
        "initial_f1": repr(result.initial_metrics["f1"]),
        "final_f1": repr(result.final_metrics["f1"]),
        "best_f1": repr(result.best_f1),
        "final_loss": repr(result.final_metrics["loss"]),
        "total_bytes_up": result.comm.total_up,
        "total_bytes_down": result.comm.total_down,
        "reduction_pct": repr(100.0 * result.comm.reduction),
        "layer_reduction_pct": repr(100.0 * result.comm.layer_reduction),
        "epsilon_total": "inf" if math.isinf(eps) else repr(eps),
    }


def write_summary(path: Path, rows: Sequence[dict], fields: Sequence[str] = SUMMARY_FIELDS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(fields))
        w.writeheader()
        w.writerows(rows)


def read_summary(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

SWEEP_FIELDS = ["axis", "value", "final_f1", "best_f1", "total_bytes_up", "reduction_pct", "epsilon_total", "skew"]


def _sweep_override(axis: str, value: float) -> dict:
    if axis == "k":
        return {"k": int(value)}
    if axis == "sigma":
        return {"noise_multiplier": float(value), "enabled": True}
    if axis == "alpha":
        return {"dirichlet_alpha": float(value)}
    raise ConfigError(f"sweep axis must be one of k, sigma, alpha; got {axis!r}")


def execute_sweep(cfg: RunConfig, axis: str, values: Sequence[float], out_dir: str | Path, force: bool = False) -> list[dict]:
    """One run per axis value, merged into ``sweep_<axis>.csv``."""
    out = Path(out_dir)
    merged = out / f"sweep_{axis}.csv"
    if merged.exists() and not force:
        raise OutputExistsError(f"{merged} exists; pass --force to overwrite")
    configs = [cfg.with_overrides(**_sweep_override(axis, v)).validate() for v in values]
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for v, c in zip(values, configs):
        run_dir = out / f"{axis}_{v:g}"
        result = execute_run(c, run_dir, force)
        prep = prepare(c)
        s = summary_row(c, result)
        rows.append(
            {
                "axis": axis,
                "value": v,
                "final_f1": s["final_f1"],
                "best_f1": s["best_f1"],
                "total_bytes_up": s["total_bytes_up"],
                "reduction_pct": s["reduction_pct"],
                "epsilon_total": s["epsilon_total"],
                "skew": repr(skew_statistic(prep.train, prep.shards)),
            }
        )
    write_summary(merged, rows, SWEEP_FIELDS)
    return rows


# --------------------------------------------------------------------------
# argument handling
# --------------------------------------------------------------------------


def _config_from_args(args) -> RunConfig:
    overrides = dict(parse_assignment(s) for s in (args.set or []))
    for name in ("strategy", "k", "bottom_frozen", "rounds", "seed", "lr", "prune_fraction"):
        val = getattr(args, name, None)
        if val is not None:
            overrides[name] = val
    if getattr(args, "out", None):
        overrides["output_dir"] = args.out
    return load_config(args.config, **overrides).validate()


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config field")
    p.add_argument("--strategy", choices=["safl", "fedavg", "static_skip", "random_k"])
    p.add_argument("--k", type=int)
    p.add_argument("--bottom-frozen", dest="bottom_frozen", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--prune-fraction", dest="prune_fraction", type=float)
    p.add_argument("--out", help="output directory (overrides config and $SAFL_OUTPUT_DIR)")
    p.add_argument("--force", action="store_true", help="overwrite existing outputs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safl", description="Selective-attention federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one federated simulation")
    _add_config_args(run)

    sweep = sub.add_parser("sweep", help="repeat a run over values of one axis")
    _add_config_args(sweep)
    sweep.add_argument("--axis", required=True, choices=["k", "sigma", "alpha"])
    sweep.add_argument("--values", required=True, help="comma-separated axis values")

    rep = sub.add_parser("report", help="layer-frequency table from a run directory")
    rep.add_argument("run_dir")

    gen = sub.add_parser("gen-data", help="write the synthetic corpus and client partition")
    _add_config_args(gen)

    bnd = sub.add_parser("bound", help="convergence bound, optionally checked on the quadratic harness")
    bnd.add_argument("--eta", type=float, required=True)
    bnd.add_argument("--mu", type=float, required=True)
    bnd.add_argument("--num-layers", type=int, required=True)
    bnd.add_argument("--k", type=int, required=True)
    bnd.add_argument("--rounds", type=int, required=True)
    bnd.add_argument("--gap", type=float, default=1.0)
    bnd.add_argument("--simulate", type=int, default=0, metavar="SEEDS")
    bnd.add_argument("--dim", type=int, default=4, help="coordinates per layer block in the harness")
    bnd.add_argument("--out", help="CSV path")
    return parser


def _cmd_run(args) -> int:
    cfg = _config_from_args(args)
    result = execute_run(cfg, cfg.output_dir, args.force)
    m = result.final_metrics
    print(
        f"seed={cfg.seed} strategy={cfg.strategy_obj().label} rounds={cfg.rounds} "
        f"f1={m['f1']:.4f} reduction={100 * result.comm.reduction:.2f}% "
        f"layer_reduction={100 * result.comm.layer_reduction:.2f}% eps_total={result.privacy.epsilon_total:g} "
        f"-> {cfg.output_dir}"
    )
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = _config_from_args(args)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values: cannot parse {args.values!r}") from None
    if not values:
        raise ConfigError("--values: empty list")
    rows = execute_sweep(cfg, args.axis, values, cfg.output_dir, args.force)
    print(f"seed={cfg.seed} sweep over {args.axis}:")
    for r in rows:
        print(f"  {args.axis}={r['value']:g} f1={float(r['final_f1']):.4f} bytes={r['total_bytes_up']} eps={r['epsilon_total']}")
    return EXIT_OK


def _cmd_report(args) -> int:
    table = report_run(args.run_dir)
    print(table.to_text())
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    cfg = _config_from_args(args)
    out = Path(cfg.output_dir)
    if (out / "corpus.jsonl").exists() and not args.force:
        raise OutputExistsError(f"{out / 'corpus.jsonl'} exists; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    corpus = generate(cfg.corpus_spec())
    train, evl = train_eval_split(corpus, cfg.eval_fraction, cfg.seed)
    shards = partition(train, cfg.partition_spec())
    corpus.to_jsonl(out / "corpus.jsonl")
    train.to_jsonl(out / "train.jsonl")
    evl.to_jsonl(out / "eval.jsonl")
    save_partition(shards, out / "partition.json")
    cfg.save(out / "resolved_config.ini")
    print(f"seed={cfg.seed} wrote {len(corpus)} sequences, {len(shards)} shards -> {out}")
    return EXIT_OK


def _cmd_bound(args) -> int:
    try:
        p = convergence.ConvergenceParams(args.eta, args.mu, args.num_layers, args.k, args.rounds, args.gap)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    b = convergence.bound(p)
    print(f"factor={b.factor:.6g} status={b.status} final_bound={b.gaps[-1]:.6g}")
    if args.simulate:
        q = convergence.QuadraticProblem.isotropic(args.num_layers, args.dim, args.mu)
        sim = convergence.simulate_quadratic(p, q, args.simulate)
        print(f"empirical_final={sim.mean_gap[-1]:.6g} se={sim.std_error[-1]:.3g} diverged={sim.diverged}")
        if args.out:
            sim.to_csv(args.out, b.gaps)
    elif args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "bound"])
            w.writerows([t, repr(float(g))] for t, g in enumerate(b.gaps))
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "sweep": _cmd_sweep, "report": _cmd_report, "gen-data": _cmd_gen_data, "bound": _cmd_bound}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, FileNotFoundError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
