"""Metrics CSV: one row per (epoch, split, K).

``k = 0`` marks a prediction made without flow sampling (the student head).
Wall time is written as ``0`` unless timing is requested, so that repeated
runs with one seed produce byte-identical files.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable

from .training import MetricsRecord

HEADER = ["epoch", "split", "loss", "top1", "k", "wall_time_s"]


def _fmt(x: float) -> str:
    return repr(float(x))


def record_rows(rec: MetricsRecord, wall_time: bool = False) -> list[list[str]]:
    wall = f"{rec.wall_time_seconds:.3f}" if wall_time else "0"
    rows = []
    if rec.deployed_k is None:
        rows.append([str(rec.epoch), rec.split, _fmt(rec.loss), _fmt(rec.top1_accuracy), "0", wall])
    for k in sorted(rec.per_K_accuracy):
        loss = rec.per_K_loss.get(k, float("nan"))
        rows.append([str(rec.epoch), rec.split, _fmt(loss), _fmt(rec.per_K_accuracy[k]), str(k), wall])
    return rows


def write_metrics_csv(records: Iterable[MetricsRecord], path: str | Path, wall_time: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HEADER)
        for rec in records:
            w.writerows(record_rows(rec, wall_time))
    return path


def read_metrics_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows and Path(path).read_text().strip() != ",".join(HEADER):
        raise ValueError(f"{path} is not a metrics CSV")
    for r in rows:
        r["epoch"], r["k"] = int(r["epoch"]), int(r["k"])
        r["loss"], r["top1"], r["wall_time_s"] = float(r["loss"]), float(r["top1"]), float(r["wall_time_s"])
    return rows


def plot_accuracy_vs_k(rec: MetricsRecord, path: str | Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ks = sorted(rec.per_K_accuracy)
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(ks, [rec.per_K_accuracy[k] for k in ks], "o-")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("K (sampling steps)")
    ax.set_ylabel(f"{rec.split} top-1")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
