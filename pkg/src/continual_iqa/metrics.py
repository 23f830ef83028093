"""Rank correlation and the lifelong correlation / forgetting indices."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


class UndefinedCorrelation(ValueError):
    pass


def srcc(preds, targets) -> float:
    """Spearman correlation: Pearson correlation of average ranks (ties share ranks)."""
    preds = np.asarray(preds, dtype=np.float64).ravel()
    targets = np.asarray(targets, dtype=np.float64).ravel()
    if preds.shape != targets.shape:
        raise ValueError(f"length mismatch: {preds.size} vs {targets.size}")
    if preds.size < 3:
        raise UndefinedCorrelation(f"SRCC needs at least 3 pairs, got {preds.size}")
    rp, rt = rankdata(preds), rankdata(targets)
    rp -= rp.mean()
    rt -= rt.mean()
    denom = np.sqrt((rp @ rp) * (rt @ rt))
    if denom == 0.0:
        raise UndefinedCorrelation("SRCC is undefined for constant input")
    return float(np.clip((rp @ rt) / denom, -1.0, 1.0))


@dataclass
class EvalLedger:
    """SRCC after each task on every distortion seen so far."""

    srcc: dict[int, dict[int, float]] = field(default_factory=dict)
    intro_task: dict[int, int] = field(default_factory=dict)

    def add_row(self, t: int, values: dict[int, float], new_ids=()) -> None:
        if t in self.srcc:
            raise ValueError(f"ledger already has a row for task {t}")
        if self.srcc and t != max(self.srcc) + 1:
            raise ValueError(f"rows must be appended in task order; expected {max(self.srcc) + 1}, got {t}")
        for j in new_ids:
            self.intro_task.setdefault(int(j), t)
        for j in values:
            self.intro_task.setdefault(int(j), t)
        missing = [j for j, t0 in self.intro_task.items() if t0 <= t and j not in values]
        if missing:
            raise ValueError(f"task {t} row lacks seen distortions {sorted(missing)}")
        self.srcc[t] = {int(j): float(v) for j, v in sorted(values.items())}

    @property
    def tasks(self) -> list[int]:
        return sorted(self.srcc)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task_index", "distortion_id", "srcc", "abs_srcc"])
        for t in self.tasks:
            for j, v in self.srcc[t].items():
                w.writerow([t, j, repr(v), repr(abs(v))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> EvalLedger:
        ledger = cls()
        rows: dict[int, dict[int, float]] = {}
        for row in csv.DictReader(io.StringIO(text)):
            rows.setdefault(int(row["task_index"]), {})[int(row["distortion_id"])] = float(row["srcc"])
        for t in sorted(rows):
            ledger.add_row(t, rows[t])
        return ledger

    def summary_rows(self) -> list[tuple[int, float, float | None]]:
        return [(t, correlation_index(self, t), forgetting_index(self, t) if t > 0 else None) for t in self.tasks]


def correlation_index(ledger: EvalLedger, T: int) -> float:
    if T not in ledger.srcc:
        raise KeyError(f"no evaluation recorded for task {T}")
    expected = [j for j, t0 in ledger.intro_task.items() if t0 <= T]
    row = ledger.srcc[T]
    missing = [j for j in expected if j not in row]
    if missing or not row:
        raise KeyError(f"task {T} lacks SRCC entries for distortions {missing}")
    return float(np.mean([abs(row[j]) for j in expected]))


def forgetting_of(ledger: EvalLedger, T: int, j: int) -> float:
    """Best earlier |SRCC| on distortion ``j`` minus its current |SRCC|.

    Only evaluations from the task that introduced ``j`` onwards exist, so the
    maximum runs over those.
    """
    if T <= 0:
        raise ValueError("forgetting is defined for T > 0")
    intro = ledger.intro_task.get(j)
    if intro is None or intro >= T:
        raise ValueError(f"distortion {j} has no evaluation before task {T}")
    history = [abs(ledger.srcc[t][j]) for t in range(intro, T)]
    return max(history) - abs(ledger.srcc[T][j])


def forgetting_index(ledger: EvalLedger, T: int) -> float:
    if T <= 0:
        raise ValueError("the forgetting index is undefined for the base task")
    previous = [j for j, t0 in ledger.intro_task.items() if t0 < T]
    return float(np.mean([forgetting_of(ledger, T, j) for j in previous]))


def averaged_indices(ledger: EvalLedger) -> tuple[float, float]:
    """Task-averaged correlation index (all tasks) and forgetting index (tasks >= 1)."""
    tasks = ledger.tasks
    if len(tasks) < 2:
        raise ValueError("the averaged forgetting index needs at least two tasks")
    c_bar = float(np.mean([correlation_index(ledger, t) for t in tasks]))
    f_bar = float(np.mean([forgetting_index(ledger, t) for t in tasks if t > 0]))
    return c_bar, f_bar
