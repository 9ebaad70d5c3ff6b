"""Step-wise result tables and parameter-growth accounting."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..experts import ExpertRegistry, begin_task, TaskSpec
from ..nn import build_net
from .metrics import delta_p, format_delta_p

CSV_COLUMNS = ("step", "task", "miou", "delta_p", "average", "params_total")


@dataclass
class StepResult:
    step: int
    miou: dict[int, float]  # task -> mIoU in percent
    params_total: int
    delta_p: dict[int, float] = field(default_factory=dict)

    @property
    def average(self) -> float:
        return float(np.mean([self.miou[t] for t in sorted(self.miou)]))


@dataclass
class SequenceReport:
    strategy: str
    task_names: list[str]
    steps: list[StepResult] = field(default_factory=list)

    def miou(self, task: int, step: int) -> float:
        return self.steps[step].miou[task]

    def forgetting(self, task: int) -> float:
        """Drop in a task's mIoU from the step it was learned to the last step."""
        return self.miou(task, task) - self.miou(task, len(self.steps) - 1)

    def final_average(self) -> float:
        return self.steps[-1].average

    def attach_reference(self, reference: "SequenceReport") -> "SequenceReport":
        """Fill ΔP against a single-task report (whose final row holds every task)."""
        ref = reference.steps[-1].miou
        for step in self.steps:
            step.delta_p = {t: delta_p(v, ref[t]) for t, v in step.miou.items() if t in ref}
        return self

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for s in self.steps:
            avg = f"{s.average:.4f}"
            for t in sorted(s.miou):
                dp = format_delta_p(s.delta_p[t]) if t in s.delta_p else ""
                w.writerow([s.step, self.task_names[t], f"{s.miou[t]:.4f}", dp, avg, s.params_total])
        return out.getvalue()

    def to_text(self) -> str:
        """Aligned table: one line per step, one mIoU (ΔP) cell per seen task."""
        width = max(16, *(len(n) + 2 for n in self.task_names))
        header = "".join(f"{n:>{width}}" for n in self.task_names)
        lines = [self.strategy, f"{'step':<6}{header}{'average':>10}{'params':>10}"]
        for s in self.steps:
            row = ""
            for t in range(len(self.task_names)):
                cell = "-"
                if t in s.miou:
                    cell = f"{s.miou[t]:.2f}"
                    if t in s.delta_p:
                        cell += f" ({format_delta_p(s.delta_p[t])})"
                row += f"{cell:>{width}}"
            lines.append(f"{s.step:<6}{row}{s.average:>10.2f}{s.params_total:>10d}")
        return "\n".join(lines) + "\n"


def read_report_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


# -- parameter growth ----------------------------------------------------------


GROWTH_STRATEGIES = ("single_task", "fine_tune", "joint_train", "ewc", "mile")


def _strategy_key(name: str) -> str:
    return "mile" if name.startswith("mile") else name


def expert_sizes(class_counts: Sequence[int], in_channels: int, width: int, rank: int) -> list[int]:
    """Per-task MILE storage: instantiated adapter factors + head + prototype floats."""
    base = build_net(in_channels, width, class_counts[0])
    registry = ExpertRegistry(base, rank)
    sizes = []
    for c in class_counts:
        expert = begin_task(registry, TaskSpec(0, "probe", c), rank, seed=0)
        sizes.append(expert.num_params + base.width)
    return sizes


def param_growth_report(strategies: Sequence[str], n_tasks: int, in_channels: int = 3,
                        width: int = 32, num_classes: int = 4, rank: int = 4,
                        class_counts: Sequence[int] | None = None) -> list[dict[str, int]]:
    """Total stored parameters after n = 1..n_tasks tasks, per strategy.

    Single-model strategies use one head wide enough for every task's classes.
    """
    if n_tasks < 1:
        raise ValueError("n_tasks must be >= 1")
    counts = list(class_counts) if class_counts is not None else [num_classes] * n_tasks
    counts = (counts + [counts[-1]] * n_tasks)[:n_tasks]
    base = build_net(in_channels, width, counts[0]).num_params
    shared = build_net(in_channels, width, max(counts)).num_params
    single = [build_net(in_channels, width, c).num_params for c in counts]
    experts = expert_sizes(counts, in_channels, width, rank)
    rows = []
    for n in range(1, n_tasks + 1):
        totals = {
            "single_task": sum(single[:n]),
            "fine_tune": shared,
            "joint_train": shared,
            "ewc": 3 * shared,
            "mile": base + sum(experts[:n]),
        }
        row = {"n": n}
        for s in strategies:
            row[s] = totals[_strategy_key(s)]
        rows.append(row)
    return rows


def growth_csv(rows: list[dict[str, int]]) -> str:
    out = io.StringIO()
    w = csv.DictWriter(out, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return out.getvalue()


def first_exceeding(rows: list[dict[str, int]], a: str, b: str) -> int | None:
    """Smallest n at which strategy ``a`` stores more parameters than ``b``."""
    for row in rows:
        if row[a] > row[b]:
            return row["n"]
    return None


def experts_to_match_base(in_channels: int = 3, width: int = 32, num_classes: int = 4,
                          rank: int = 4) -> int:
    """How many homogeneous experts it takes for their storage to reach one full model."""
    base = build_net(in_channels, width, num_classes).num_params
    size = expert_sizes([num_classes], in_channels, width, rank)[0]
    return math.ceil(base / size)
