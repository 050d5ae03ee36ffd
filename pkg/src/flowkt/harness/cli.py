"""Command-line entry point: ``flowkt <subcommand> ...``.

Exit codes: 0 success, 1 validation error (bad flags, config, inputs),
2 runtime failure (divergence, numerical failure, anything unexpected).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import torch

from .. import analysis
from ..errors import (CheckpointVersionError, ConfigurationError, DatasetMissingError, DivergenceError,
                      DomainError, NumericalFailure, ShapeError)
from .checkpoint import Checkpoint
from .config import load_config
from .data import make_dataset
from .metrics import plot_accuracy_vs_k, read_metrics_csv, write_metrics_csv
from .studies import schedule_stability, write_stability_csv
from .training import distill, evaluate, restore_system, train_teacher

log = logging.getLogger("flowkt")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


_VALIDATION = (UsageError, ConfigurationError, DatasetMissingError, CheckpointVersionError, ShapeError,
               DomainError, FileNotFoundError)
_RUNTIME = (DivergenceError, NumericalFailure)


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("empty list")
    return values


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one dotted config key (repeatable)")
    p.add_argument("--out", type=Path, default=Path("runs/latest"), help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowkt", description="Flow-matching knowledge transfer experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-teacher", help="pretrain the teacher with cross-entropy")
    _add_config_flags(p)

    p = sub.add_parser("distill", help="train a student under the configured method")
    _add_config_flags(p)
    p.add_argument("--teacher", type=Path, help="teacher checkpoint (trained on the fly if omitted)")
    p.add_argument("--wall-time", action="store_true", help="write measured wall time into the CSV")

    p = sub.add_parser("eval", help="evaluate a student checkpoint at fixed K")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--k", type=_int_list, help="comma-separated sampling steps (default: config K_eval)")
    p.add_argument("--out", type=Path, help="write an eval CSV here")

    p = sub.add_parser("analyze", help="numerical studies")
    asub = p.add_subparsers(dest="study", required=True, parser_class=_Parser)
    a = asub.add_parser("truncation", help="Euler endpoint error against K on an analytic field")
    a.add_argument("--k", type=_int_list, default=[4, 8, 16, 32, 64, 128, 256])
    a.add_argument("--field", choices=["linear", "time_varying", "constant"], default="linear")
    a.add_argument("--dim", type=int, default=16)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", type=Path, default=Path("runs/analysis"))
    a = asub.add_parser("reliability", help="reliability histograms along a student's sampling trajectory")
    a.add_argument("checkpoint", type=Path)
    a.add_argument("--k", type=int, default=None)
    a.add_argument("--bins", type=int, default=10)
    a.add_argument("--split", choices=["train", "val", "test"], default="test")
    a.add_argument("--out", type=Path, default=Path("runs/analysis"))
    a = asub.add_parser("stability", help="train each noise schedule and record non-finite losses")
    _add_config_flags(a)
    a.add_argument("--warmups", type=_int_list, default=[0])

    p = sub.add_parser("report", help="summarise the test rows of one or more metrics CSVs")
    p.add_argument("metrics", type=Path, nargs="+")
    p.add_argument("--out", type=Path, help="write the summary CSV here")
    return parser


def _config(args):
    return load_config(args.config, args.overrides)


def _cmd_train_teacher(args) -> int:
    cfg = _config(args)
    ckpt, records = train_teacher(cfg)
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt.save(args.out / "teacher.ckpt")
    write_metrics_csv(records, args.out / "teacher_metrics.csv")
    print(f"teacher test top1 {ckpt.metadata['test_top1']:.4f} -> {args.out / 'teacher.ckpt'}")
    return 0


def _cmd_distill(args) -> int:
    cfg = _config(args)
    teacher = Checkpoint.load(args.teacher) if args.teacher else None
    ckpt, records = distill(cfg, teacher)
    args.out.mkdir(parents=True, exist_ok=True)
    ckpt.save(args.out / "student.ckpt")
    write_metrics_csv(records, args.out / "metrics.csv", wall_time=args.wall_time or cfg.log_wall_time)
    (args.out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    test = records[-1]
    if test.per_K_accuracy:
        plot_accuracy_vs_k(test, args.out / "accuracy_vs_k.png")
    ks = " ".join(f"K={k}:{v:.4f}" for k, v in sorted(test.per_K_accuracy.items()))
    print(f"{cfg.method.value} test top1 {test.top1_accuracy:.4f} {ks}".rstrip())
    return 0


def _cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    system = restore_system(ckpt)
    data = make_dataset(system.cfg.dataset)
    # the head-deployed methods have no K dependence: one evaluation suffices
    ks = (args.k or system.cfg.K_eval) if system.deploys_flow else [None]
    records = [evaluate(ckpt, args.split, k, data) for k in ks]
    for k, r in zip(ks, records):
        label = "head" if k is None else f"K={k}"
        print(f"{args.split} {label} top1 {r.top1_accuracy:.4f} loss {r.loss:.4f}")
    if args.out:
        _write_eval_csv(ks, records, args.out)
    return 0


def _write_eval_csv(ks, records, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "k", "top1", "loss"])
        for k, r in zip(ks, records):
            w.writerow([r.split, k or 0, repr(r.top1_accuracy), repr(r.loss)])


_FIELDS = {"linear": lambda z: analysis.LinearField(1.0),
           "time_varying": lambda z: analysis.TimeVaryingField(),
           "constant": lambda z: analysis.ConstantField(z, torch.zeros_like(z))}


def _cmd_analyze(args) -> int:
    args.out.mkdir(parents=True, exist_ok=True)
    if args.study == "truncation":
        gen = torch.Generator().manual_seed(args.seed)
        z1 = torch.randn(1, args.dim, generator=gen, dtype=torch.float64)
        report = analysis.truncation_error_study(_FIELDS[args.field](z1), args.k, z1)
        csv_path = analysis.write_error_csv(report, args.out / "truncation.csv")
        if not report.exact:
            analysis.plot_error_vs_k(report, args.out / "error_vs_k.svg")
        print(f"fitted order {report.fitted_order:.4f} -> {csv_path}")
        return 0
    if args.study == "reliability":
        ckpt = Checkpoint.load(args.checkpoint)
        system = restore_system(ckpt)
        part = make_dataset(system.cfg.dataset).split(args.split)
        K = args.k or max(system.cfg.K_eval)
        with torch.no_grad():
            traj = system.flow_trajectory(part.x, K)
        hists = analysis.trajectory_reliability(traj.per_step_predictions, part.y, args.bins)
        hists.append(analysis.reliability_histogram(torch.softmax(traj.ensemble.double(), -1), part.y,
                                                    args.bins, step_index=K))
        analysis.write_reliability_csv(hists, args.out / "reliability.csv")
        analysis.plot_reliability(hists, args.out / "reliability.png")
        print(" ".join(f"step{h.step_index}:ece={h.ece:.4f}" for h in hists))
        return 0
    cfg = _config(args)
    outcomes = schedule_stability(cfg, warmups=args.warmups)
    write_stability_csv(outcomes, args.out / "stability.csv")
    for o in outcomes:
        state = "completed" if o.completed else f"diverged at epoch {o.diverged_epoch}"
        print(f"{o.schedule} warmup={o.warmup_epochs}: {state}")
    return 0


def _cmd_report(args) -> int:
    rows = []
    for path in args.metrics:
        for r in read_metrics_csv(path):
            if r["split"] == "test":
                rows.append({"run": str(path), "k": r["k"], "top1": r["top1"], "loss": r["loss"]})
    if not rows:
        raise ConfigurationError("no test rows found in the given metrics files")
    for r in rows:
        label = "head" if r["k"] == 0 else f"K={r['k']}"
        print(f"{r['run']}\t{label}\t{r['top1']:.4f}")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        with args.out.open("w", newline="") as fh:
            w = csv.DictWriter(fh, ["run", "k", "top1", "loss"], lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return 0


_COMMANDS = {"train-teacher": _cmd_train_teacher, "distill": _cmd_distill, "eval": _cmd_eval,
             "analyze": _cmd_analyze, "report": _cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _COMMANDS[args.command](args)
    except _RUNTIME as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2
    except _VALIDATION as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
