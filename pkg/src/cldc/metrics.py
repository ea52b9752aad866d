"""Continual-learning metrics over a performance matrix.

``p[i, j]`` is the normalised return on task j (1-based) after training task i;
row 0 holds the evaluation before any training. Task indices in the public
functions are 1-based, matching the row/column labels.

    continual return  R_i = mean_{j<=i} p[i, j]
    forgetting        F_i = mean_{j<i} (p[i-1, j] - p[i, j]),      i = 2..N
    forward transfer  T_i = mean_{j>i} (p[i, j] - p[i-1, j]),      i = 1..N-1
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

ROW0_NOTE = (
    "row 0 is the evaluation before training; it supplies p[0, j] for the "
    "forward transfer of task 1"
)


class MissingEntryError(ValueError):
    pass


@dataclass
class PerfMatrix:
    values: np.ndarray  # (N+1, N), NaN = absent

    @classmethod
    def empty(cls, n_tasks: int) -> "PerfMatrix":
        return cls(np.full((n_tasks + 1, n_tasks), np.nan))

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float | None]]) -> "PerfMatrix":
        arr = np.array([[np.nan if v is None else v for v in r] for r in rows], dtype=np.float64)
        if arr.shape[0] != arr.shape[1] + 1:
            raise ValueError("need N+1 rows of N entries (row 0 = before training)")
        return cls(arr)

    @property
    def n_tasks(self) -> int:
        return self.values.shape[1]

    def __getitem__(self, ij: tuple[int, int]) -> float:
        i, j = ij
        return float(self.values[i, j - 1])

    def set(self, trained_after: int, task: int, value: float) -> None:
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"performance {value} outside [0, 1]")
        self.values[trained_after, task - 1] = value

    def _row(self, i: int, cols: range) -> np.ndarray:
        vals = np.array([self.values[i, j - 1] for j in cols])
        if np.isnan(vals).any():
            raise MissingEntryError(f"row {i} is missing entries for tasks {list(cols)}")
        return vals

    def is_complete(self) -> bool:
        return not np.isnan(self.values).any()


def continual_return(P: PerfMatrix, i: int) -> float:
    return float(np.mean(P._row(i, range(1, i + 1))))


def continual_returns(P: PerfMatrix) -> list[float]:
    return [continual_return(P, i) for i in range(1, P.n_tasks + 1)]


def forgetting(P: PerfMatrix) -> tuple[dict[int, float], float | None]:
    """Per-task F_i for i >= 2 and their mean (None when N < 2)."""
    per = {}
    for i in range(2, P.n_tasks + 1):
        cols = range(1, i)
        per[i] = float(np.mean(P._row(i - 1, cols) - P._row(i, cols)))
    return per, (float(np.mean(list(per.values()))) if per else None)


def forward_transfer(P: PerfMatrix) -> tuple[dict[int, float], float | None]:
    """Per-task T_i for i <= N-1 and their mean (None when N < 2)."""
    per = {}
    n = P.n_tasks
    for i in range(1, n):
        cols = range(i + 1, n + 1)
        per[i] = float(np.mean(P._row(i, cols) - P._row(i - 1, cols)))
    return per, (float(np.mean(list(per.values()))) if per else None)


@dataclass
class Summary:
    mean: float | None
    sd: float | None
    sem: float | None
    ci95: float | None
    n: int
    values: list[float] = field(default_factory=list)

    @property
    def flag(self) -> str:
        return "n=1" if self.n == 1 else ""


def summarize(values: Sequence[float | None]) -> Summary:
    vals = [float(v) for v in values if v is not None and not math.isnan(v)]
    n = len(vals)
    if n == 0:
        return Summary(None, None, None, None, 0, [])
    mean = float(np.mean(vals))
    sd = float(np.std(vals, ddof=1)) if n > 1 else 0.0
    sem = sd / math.sqrt(n)
    return Summary(mean, sd, sem, 1.96 * sem, n, vals)


@dataclass
class SeedMetrics:
    returns: list[float]
    forgetting: dict[int, float]
    forgetting_mean: float | None
    transfer: dict[int, float]
    transfer_mean: float | None

    @property
    def final_return(self) -> float:
        return self.returns[-1]


def seed_metrics(P: PerfMatrix, transfer_defined: bool = True) -> SeedMetrics:
    f_per, f_mean = forgetting(P)
    if transfer_defined:
        t_per, t_mean = forward_transfer(P)
    else:
        t_per, t_mean = {}, None
    return SeedMetrics(continual_returns(P), f_per, f_mean, t_per, t_mean)


@dataclass
class MetricReport:
    method: str
    seeds: list[int]
    ret: Summary
    forgetting: Summary
    transfer: Summary
    per_seed: list[SeedMetrics]
    notes: list[str] = field(default_factory=lambda: [ROW0_NOTE])

    def to_dict(self) -> dict:
        def s(x: Summary) -> dict:
            return {"mean": x.mean, "sd": x.sd, "sem": x.sem, "ci95": x.ci95, "n": x.n, "flag": x.flag, "values": x.values}

        return {
            "method": self.method,
            "seeds": self.seeds,
            "notes": self.notes,
            "continual_return": s(self.ret),
            "forgetting": s(self.forgetting),
            "forward_transfer": s(self.transfer),
            "per_seed": [
                {
                    "seed": seed,
                    "continual_return_per_task": m.returns,
                    "continual_return": m.final_return,
                    "forgetting_per_task": {str(k): v for k, v in m.forgetting.items()},
                    "forgetting": m.forgetting_mean,
                    "forward_transfer_per_task": {str(k): v for k, v in m.transfer.items()},
                    "forward_transfer": m.transfer_mean,
                }
                for seed, m in zip(self.seeds, self.per_seed)
            ],
        }


def aggregate(method: str, seeds: Sequence[int], per_seed: Sequence[SeedMetrics]) -> MetricReport:
    """Cross-seed mean, sample sd, SEM and 1.96*SEM for R (=R_N), F and T."""
    if not per_seed:
        raise ValueError("need at least one seed")
    return MetricReport(
        method,
        list(seeds),
        summarize([m.final_return for m in per_seed]),
        summarize([m.forgetting_mean for m in per_seed]),
        summarize([m.transfer_mean for m in per_seed]),
        list(per_seed),
    )
