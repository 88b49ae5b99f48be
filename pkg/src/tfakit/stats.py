"""Repeated-run statistics: mean, sample std, 95% CI and cumulative series."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Sequence

from .exceptions import ValidationError

Z_95 = 1.96


@dataclass(frozen=True)
class RunSeries:
    metric_name: str
    values: tuple[float, ...]

    def __post_init__(self):
        vals = tuple(float(v) for v in self.values)
        if not vals:
            raise ValidationError(f"{self.metric_name}: empty run series")
        if not all(math.isfinite(v) for v in vals):
            raise ValidationError(f"{self.metric_name}: non-finite value in run series")
        object.__setattr__(self, "values", vals)


@dataclass(frozen=True)
class CumulativePoint:
    k: int
    mean: float
    ci: float | None


@dataclass(frozen=True)
class RunStatistics:
    n: int
    mean: float
    std: float | None
    ci95: float | None
    cumulative: tuple[CumulativePoint, ...]


def _mean_std(values: Sequence[float]):
    n = len(values)
    mean = math.fsum(values) / n
    if n < 2:
        return mean, None
    return mean, math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1))


def ci95(std: float | None, n: int) -> float | None:
    return None if std is None else Z_95 * std / math.sqrt(n)


def summarize(series: RunSeries | Sequence[float]) -> RunStatistics:
    """Mean, sample std (n-1), ``1.96 * s / sqrt(n)`` and prefix statistics.

    With a single run only the mean is defined; std and CI are ``None``.
    """
    if not isinstance(series, RunSeries):
        series = RunSeries("", tuple(series))
    values = series.values
    cumulative = []
    for k in range(1, len(values) + 1):
        m, s = _mean_std(values[:k])
        cumulative.append(CumulativePoint(k, m, ci95(s, k)))
    mean, std = _mean_std(values)
    return RunStatistics(len(values), mean, std, ci95(std, len(values)), tuple(cumulative))


def stabilization_check(stats: RunStatistics, k_small: int, k_large: int) -> bool:
    """True when the CI over the first ``k_large`` runs is strictly narrower
    than over the first ``k_small``."""
    if not 2 <= k_small < k_large <= stats.n:
        raise ValidationError(
            f"need 2 <= k_small < k_large <= {stats.n}, got {k_small}, {k_large}")
    return stats.cumulative[k_large - 1].ci < stats.cumulative[k_small - 1].ci


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def aggregate_csv(named: dict[str, RunStatistics]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "n", "mean", "std", "ci95"])
    for name, st in named.items():
        writer.writerow([name, st.n, _fmt(st.mean), _fmt(st.std), _fmt(st.ci95)])
    return buf.getvalue()


def cumulative_csv(named: dict[str, RunStatistics]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "k", "mean_k", "ci_k"])
    for name, st in named.items():
        for pt in st.cumulative:
            writer.writerow([name, pt.k, _fmt(pt.mean), _fmt(pt.ci)])
    return buf.getvalue()


def read_aggregate_csv(text: str) -> dict[str, dict]:
    """Parse an aggregate CSV back into ``{metric: {n, mean, std, ci95}}``."""
    rows = {}
    for row in csv.DictReader(io.StringIO(text)):
        rows[row["metric"]] = {
            "n": int(row["n"]),
            **{k: (float(row[k]) if row[k] else None) for k in ("mean", "std", "ci95")},
        }
    return rows
