"""Per-iteration metrics records and their CSV serialization."""

from __future__ import annotations

import csv
from dataclasses import dataclass

METRICS_COLUMNS = (
    "iteration",
    "scope",
    "mean_return",
    "success_rate",
    "mean_kl_penalty",
    "timesteps_consumed",
    "wall_seconds",
)

DIAGNOSTICS_COLUMNS = (
    "iteration",
    "scope",
    "surrogate_before",
    "surrogate_after",
    "mean_kl",
    "cg_residual",
    "backtracks",
    "accepted",
)


@dataclass(frozen=True)
class MetricsRow:
    """One evaluation record.

    scope is "global", "oracle", or "context:<i>".  For context rows the
    KL column is that context's rho-weighted mean divergence from its
    peers; for global/oracle rows it is the full weighted pairwise
    penalty.  timesteps_consumed counts cumulative *training* env steps
    for the row's scope (evaluation rollouts are excluded from budgets).
    """

    iteration: int
    scope: str
    mean_return: float
    success_rate: float
    mean_kl_penalty: float
    timesteps_consumed: int
    wall_seconds: float

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 1.0:
            raise ValueError(f"success_rate {self.success_rate} outside [0, 1]")

    def to_csv_values(self) -> list[str]:
        return [
            str(self.iteration),
            self.scope,
            repr(float(self.mean_return)),
            repr(float(self.success_rate)),
            repr(float(self.mean_kl_penalty)),
            str(self.timesteps_consumed),
            repr(float(self.wall_seconds)),
        ]

    @classmethod
    def from_csv_row(cls, row: dict) -> "MetricsRow":
        return cls(
            iteration=int(row["iteration"]),
            scope=row["scope"],
            mean_return=float(row["mean_return"]),
            success_rate=float(row["success_rate"]),
            mean_kl_penalty=float(row["mean_kl_penalty"]),
            timesteps_consumed=int(row["timesteps_consumed"]),
            wall_seconds=float(row["wall_seconds"]),
        )


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_COLUMNS)
        for row in rows:
            writer.writerow(row.to_csv_values())


def read_metrics_csv(path) -> list[MetricsRow]:
    with open(path, newline="") as fh:
        return [MetricsRow.from_csv_row(r) for r in csv.DictReader(fh)]


def write_diagnostics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DIAGNOSTICS_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    str(row["iteration"]),
                    row["scope"],
                    repr(float(row["surrogate_before"])),
                    repr(float(row["surrogate_after"])),
                    repr(float(row["mean_kl"])),
                    repr(float(row["cg_residual"])),
                    str(row["backtracks"]),
                    str(bool(row["accepted"])),
                ]
            )


def read_diagnostics_csv(path) -> list[dict]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                {
                    "iteration": int(row["iteration"]),
                    "scope": row["scope"],
                    "surrogate_before": float(row["surrogate_before"]),
                    "surrogate_after": float(row["surrogate_after"]),
                    "mean_kl": float(row["mean_kl"]),
                    "cg_residual": float(row["cg_residual"]),
                    "backtracks": int(row["backtracks"]),
                    "accepted": row["accepted"] == "True",
                }
            )
    return out
