"""``autoview`` command line: train, baselines, ablations, evaluation, export and plots.

Every subcommand writes its artifacts under ``--out`` and prints a
tab-delimited summary table on stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import yaml

from .checkpoint import CheckpointError
from .config import ConfigError, ConfigParseError, RunConfig, from_dict, load_config, with_overrides

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_UNREADABLE = 3
EXIT_SCHEMA = 4
EXIT_PARSE = 5
EXIT_ABORTED = 6
EXIT_CHECKPOINT = 7


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


class _UsageError(Exception):
    pass


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration (defaults when omitted)")
    p.add_argument("--out", required=True, help="output directory for every artifact")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config field by dotted name, e.g. policy.levels=3")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="autoview", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train student, teacher and policy")
    _add_config_args(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--eval", action="store_true", help="run k-NN evaluation after training")

    p = sub.add_parser("baseline", help="RandAug-style (N, M) grid baseline")
    _add_config_args(p)
    p.add_argument("--n", default="1,2", help="comma list of ops per view (0 = crop/flip only)")
    p.add_argument("--m", default="low,mid,high", help="comma list of magnitude bins")
    p.add_argument("--seeds", help="comma list of seeds (default: config seed)")

    p = sub.add_parser("ablate", help="run ablation switch sets next to the full method")
    _add_config_args(p)
    p.add_argument("names", nargs="+", help="switch names or 'all'")
    p.add_argument("--no-full", action="store_true", help="skip the unablated reference run")

    p = sub.add_parser("alpha-sweep", help="regularizer-weight trade-off runs")
    _add_config_args(p)
    p.add_argument("--alphas", default="0,0.3,0.5,0.8,1,3", help="comma list of alpha values")

    p = sub.add_parser("eval", help="k-NN evaluation of a checkpoint's teacher backbone")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--linear", action="store_true", help="also fit a logistic-regression probe")

    p = sub.add_parser("export-policy", help="write the learned policy as text")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("plot", help="render loss and sampling-probability SVGs")
    p.add_argument("--run", help="run directory holding metrics.jsonl and policy_trajectory.csv")
    p.add_argument("--metrics")
    p.add_argument("--trajectory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ops", help="print the expanded operation set")
    p.add_argument("--config")
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare", help="join evaluation reports into one table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out", required=True)
    return parser


# ---------------------------------------------------------------------------

def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else from_dict({})
    overrides = {"out_dir": str(args.out)}
    for flag, key in (("seed", "seed"), ("steps", "steps"), ("batch_size", "batch_size")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise ConfigError(item, "override must look like KEY=VALUE")
        key, raw = item.split("=", 1)
        overrides[key.strip()] = yaml.safe_load(raw)
    return with_overrides(cfg, overrides)


def _print_table(rows: Sequence[dict], out=None) -> None:
    out = out or sys.stdout
    if not rows:
        return
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [c for c in r if c not in cols]
    print("\t".join(cols), file=out)
    for r in rows:
        print("\t".join(_fmt(r.get(c, "")) for c in cols), file=out)


def _fmt(v) -> str:
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def _write_tsv(path: Path, rows: Sequence[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        _print_table(rows, fh)


def _cmd_train(args) -> int:
    from .train import CHECKPOINT_NAME, train

    cfg = _config_from_args(args)
    trainer = train(cfg, args.out, resume=args.resume)
    out = Path(args.out)
    row = {"steps": trainer.step_index, "checkpoint": str(out / CHECKPOINT_NAME),
           "exec_prob": float(trainer.policies[0].exec_probs()[0]),
           "max_op_prob": float(trainer.policy_probs().max())}
    if args.eval:
        from .evaluate import write_report

        report = trainer.evaluate()
        write_report(out / "eval.json", report)
        row["knn_best"] = report["knn"]["best"]
        row["best_k"] = report["knn"]["best_k"]
    _print_table([row])
    return EXIT_OK


def _cmd_baseline(args) -> int:
    from .train import randaug_grid_baseline

    cfg = _config_from_args(args)
    ns = [int(v) for v in args.n.split(",") if v]
    ms = [v if not v.isdigit() else int(v) for v in args.m.split(",") if v]
    seeds = [int(v) for v in args.seeds.split(",")] if args.seeds else None
    rows = randaug_grid_baseline(cfg, ns, ms, args.out, seeds)
    _write_tsv(Path(args.out) / "baseline.tsv", rows)
    _print_table(rows)
    return EXIT_OK


def _cmd_ablate(args) -> int:
    from .plotting import plot_comparison
    from .train import ABLATIONS, run_ablations

    names = list(ABLATIONS) if args.names == ["all"] else args.names
    unknown = [n for n in names if n not in ABLATIONS]
    if unknown:
        raise _UsageError(f"unknown ablation {unknown[0]!r}; choose from {', '.join(ABLATIONS)}")
    cfg = _config_from_args(args)
    rows = run_ablations(cfg, names, args.out, include_full=not args.no_full)
    out = Path(args.out)
    _write_tsv(out / "ablation.tsv", rows)
    plot_comparison(rows, "setting", "knn_best", out / "ablation.svg")
    _print_table(rows)
    return EXIT_OK


def _cmd_alpha(args) -> int:
    from .plotting import plot_comparison
    from .train import alpha_sweep

    try:
        alphas = [float(v) for v in args.alphas.split(",") if v]
    except ValueError:
        raise _UsageError(f"--alphas must be a comma list of numbers, got {args.alphas!r}") from None
    if not alphas or min(alphas) < 0:
        raise _UsageError("--alphas needs at least one non-negative value")
    rows = alpha_sweep(_config_from_args(args), alphas, args.out)
    out = Path(args.out)
    _write_tsv(out / "alpha_sweep.tsv", rows)
    plot_comparison([dict(r, label=f"{r['alpha']:g}") for r in rows], "label", "knn_best",
                    out / "alpha_sweep.svg")
    _print_table(rows)
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .evaluate import write_report
    from .train import Trainer

    trainer = Trainer.from_checkpoint(args.checkpoint)
    report = trainer.evaluate(linear=args.linear)
    report["name"] = Path(args.checkpoint).parent.name or "checkpoint"
    write_report(Path(args.out) / "eval.json", report)
    row = {"step": report["step"], "best_k": report["knn"]["best_k"], "knn_best": report["knn"]["best"]}
    row.update({f"knn@{k}": v for k, v in report["knn"]["per_k"].items()})
    if "linear" in report:
        row["linear"] = report["linear"]
    _print_table([row])
    return EXIT_OK


def _cmd_export(args) -> int:
    from . import checkpoint as ckpt
    from .augment import AugOp
    from .policy import PolicyParams, export_policy
    from .tensor import Tensor

    arrays, meta = ckpt.load(args.checkpoint)
    cfg = from_dict(meta["config"])
    ops = []
    for line in meta["ops"]:
        kind, level, mag = line.split()
        ops.append(AugOp(kind, None if level == "-" else int(level), None if mag == "-" else float(mag)))
    params = PolicyParams(Tensor(arrays["policy0.pi"]), Tensor(arrays["policy0.p_logit"]),
                          cfg.policy.lambda_cat, cfg.policy.lambda_bern, cfg.policy.gumbel)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "policy.txt"
    path.write_text(export_policy(params, ops))
    probs = params.probs()
    rows = [{"op": op.name, "probability": float(p)} for op, p in zip(ops, probs)]
    rows.sort(key=lambda r: -r["probability"])
    _print_table(rows)
    return EXIT_OK


def _cmd_plot(args) -> int:
    from .plotting import (plot_loss_curves, plot_sampling_probabilities, read_metrics,
                           read_trajectory)

    run = Path(args.run) if args.run else None
    metrics = args.metrics or (run / "metrics.jsonl" if run else None)
    traj = args.trajectory or (run / "policy_trajectory.csv" if run else None)
    if metrics is None and traj is None:
        raise _UsageError("plot needs --run, --metrics or --trajectory")
    out = Path(args.out)
    rows = []
    if metrics is not None:
        path = plot_loss_curves(read_metrics(metrics), out / "loss_curves.svg")
        rows.append({"figure": "loss", "path": str(path)})
    if traj is not None:
        names, steps, probs = read_trajectory(traj)
        path = plot_sampling_probabilities(names, steps, probs, out / "sampling_probability.svg")
        rows.append({"figure": "sampling_probability", "path": str(path), "lines": len(names)})
    _print_table(rows)
    return EXIT_OK


def _cmd_ops(args) -> int:
    from .augment import build_operation_set, dump_operation_set

    cfg = load_config(args.config) if args.config else from_dict({})
    p = cfg.policy
    ops = build_operation_set(p.levels, p.magnitudes, p.kinds, p.include_geometric, p.ops)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "operations.txt").write_text(dump_operation_set(ops))
    _print_table([{"index": i, "name": op.name, "kind": op.kind,
                   "level": "-" if op.level is None else op.level,
                   "magnitude": "-" if op.magnitude is None else op.magnitude} for i, op in enumerate(ops)])
    return EXIT_OK


def _cmd_compare(args) -> int:
    from .evaluate import compare_reports
    from .plotting import plot_comparison

    rows = compare_reports(args.reports)
    out = Path(args.out)
    _write_tsv(out / "comparison.tsv", rows)
    plot_comparison(rows, "run", "knn_best", out / "comparison.svg")
    _print_table(rows)
    return EXIT_OK


COMMANDS = {"train": _cmd_train, "baseline": _cmd_baseline, "ablate": _cmd_ablate, "alpha-sweep": _cmd_alpha, "eval": _cmd_eval,
            "export-policy": _cmd_export, "plot": _cmd_plot, "ops": _cmd_ops, "compare": _cmd_compare}


def main(argv: Optional[List[str]] = None) -> int:
    from .train import TrainingAborted

    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(f"autoview: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"autoview: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigParseError as exc:
        print(f"autoview: config parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except ConfigError as exc:
        print(f"autoview: invalid config field {exc.field!r}: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except TrainingAborted as exc:
        print(f"autoview: training aborted at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    except CheckpointError as exc:
        print(f"autoview: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (OSError, UnicodeDecodeError) as exc:
        print(f"autoview: cannot read input: {exc}", file=sys.stderr)
        return EXIT_UNREADABLE


if __name__ == "__main__":
    sys.exit(main())
