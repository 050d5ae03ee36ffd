"""Schedule-stability study: does training stay finite at a given warm-up?"""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from ..errors import DivergenceError
from ..schedules import NoiseSchedule, ScheduleKind
from .checkpoint import Checkpoint
from .config import ExperimentConfig
from .data import Dataset, make_dataset
from .training import distill, train_teacher


@dataclass
class StabilityOutcome:
    schedule: str
    warmup_epochs: int
    completed: bool
    diverged_epoch: int | None
    test_top1: float

    @property
    def needs_warmup(self) -> bool:
        return not self.completed


def schedule_stability(cfg: ExperimentConfig, schedules: Sequence[ScheduleKind | str] = tuple(ScheduleKind),
                       warmups: Sequence[int] = (0,), teacher: Checkpoint | None = None,
                       data: Dataset | None = None) -> list[StabilityOutcome]:
    """Train ``cfg.method`` once per (schedule, warm-up) pair and record whether it finished."""
    data = data or make_dataset(cfg.dataset)
    if teacher is None and cfg.method.uses_teacher:
        teacher, _ = train_teacher(cfg, data)
    out = []
    for kind in schedules:
        for w in warmups:
            run = dataclasses.replace(cfg, schedule=NoiseSchedule(ScheduleKind(kind)), warmup_epochs=int(w))
            try:
                _, records = distill(run, teacher, data)
            except DivergenceError as exc:
                out.append(StabilityOutcome(ScheduleKind(kind).value, int(w), False, exc.epoch, float("nan")))
                continue
            out.append(StabilityOutcome(ScheduleKind(kind).value, int(w), True, None, records[-1].top1_accuracy))
    return out


def write_stability_csv(outcomes: Sequence[StabilityOutcome], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["schedule", "warmup_epochs", "completed", "diverged_epoch", "test_top1"])
        for o in outcomes:
            w.writerow([o.schedule, o.warmup_epochs, int(o.completed),
                        "" if o.diverged_epoch is None else o.diverged_epoch, repr(o.test_top1)])
    return path
