"""Seed-group summaries and the Kruskal-Wallis H test.

The chi-square tail is computed here from the regularized incomplete gamma
function rather than pulled from scipy, so the package runtime needs only
numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

__all__ = [
    "GroupSample",
    "HTestResult",
    "Significance",
    "summarize",
    "midranks",
    "kruskal_wallis",
    "chi_square_sf",
    "regularized_gamma_q",
    "significance_flag",
]

_EPS = 1e-16
_TINY = 1e-300
_MAX_ITER = 100_000


@dataclass(frozen=True)
class GroupSample:
    group_label: str
    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        if not self.values:
            raise ValueError(f"group {self.group_label!r} has no values")


@dataclass(frozen=True)
class HTestResult:
    H: float
    df: int
    p_value: float
    tie_correction: float


class Significance(str, Enum):
    SIGNIFICANT = "*"
    NOT_SIGNIFICANT = "ns"


def summarize(values: Sequence[float], sample_std: bool = False) -> tuple[float, float, float]:
    """(mean, max, standard deviation); population divisor unless ``sample_std``."""
    vals = [float(v) for v in values]
    n = len(vals)
    if n == 0:
        raise ValueError("cannot summarize an empty sequence")
    mean = math.fsum(vals) / n
    ss = math.fsum((v - mean) ** 2 for v in vals)
    divisor = n - 1 if sample_std else n
    std = math.sqrt(ss / divisor) if divisor > 0 else 0.0
    return mean, max(vals), std


def midranks(values: Sequence[float]) -> tuple[list[float], list[int]]:
    """1-based ranks with ties sharing their average rank, plus the tie-run lengths."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    runs = []
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        # positions i..j (0-based) share the mean of ranks i+1..j+1
        avg = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        runs.append(j - i + 1)
        i = j + 1
    return ranks, runs


def kruskal_wallis(groups: Sequence[GroupSample | Sequence[float]]) -> HTestResult:
    """Tie-corrected Kruskal-Wallis H with a chi-square p-value on ``groups - 1`` df.

    When every pooled value is identical the statistic is taken as 0 with
    p = 1 (the tie correction would otherwise divide by zero).
    """
    samples = [g.values if isinstance(g, GroupSample) else tuple(float(v) for v in g) for g in groups]
    if len(samples) < 2:
        raise ValueError("the H test needs at least two groups")
    if any(len(s) == 0 for s in samples):
        raise ValueError("every group needs at least one value")
    pooled = [v for s in samples for v in s]
    n = len(pooled)
    if n < 3:
        raise ValueError(f"the H test needs at least 3 observations, got {n}")
    df = len(samples) - 1

    ranks, runs = midranks(pooled)
    correction = 1.0 - math.fsum(t**3 - t for t in runs) / (n**3 - n)
    if correction <= 0.0:
        return HTestResult(0.0, df, 1.0, 1.0)

    total, start = 0.0, 0
    for s in samples:
        r = math.fsum(ranks[start : start + len(s)])
        total += r * r / len(s)
        start += len(s)
    h_raw = 12.0 / (n * (n + 1)) * total - 3.0 * (n + 1)
    h = max(h_raw / correction, 0.0)
    return HTestResult(h, df, chi_square_sf(h, df), correction)


def _gamma_p_series(a: float, x: float) -> float:
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_contfrac(a: float, x: float) -> float:
    # Modified Lentz evaluation of the continued fraction for Q(a, x).
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def regularized_gamma_q(a: float, x: float) -> float:
    """Upper regularized incomplete gamma Q(a, x) = 1 - P(a, x)."""
    if a <= 0.0 or x < 0.0:
        raise ValueError(f"need a > 0 and x >= 0, got a={a}, x={x}")
    if x == 0.0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_p_series(a, x)
    return _gamma_q_contfrac(a, x)


def chi_square_sf(x: float, df: int) -> float:
    """P(X > x) for X ~ chi-square with ``df`` degrees of freedom."""
    if df < 1:
        raise ValueError(f"df must be >= 1, got {df}")
    if x < 0.0:
        raise ValueError(f"x must be >= 0, got {x}")
    return regularized_gamma_q(df / 2.0, x / 2.0)


def significance_flag(result: HTestResult, alpha: float = 0.05) -> Significance:
    return Significance.SIGNIFICANT if result.p_value < alpha else Significance.NOT_SIGNIFICANT
