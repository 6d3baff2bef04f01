"""Pearson and Spearman correlation with two-sided p-values."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateInputError, DomainError
from .numcore import student_t_two_sided_p

SIGNIFICANCE_LEVEL = 0.05


@dataclass(frozen=True)
class CorrelationResult:
    r: float
    p_value: float
    n: int
    method: str

    @property
    def significant(self) -> bool:
        return self.p_value < SIGNIFICANCE_LEVEL

    def cell(self) -> str:
        return f"{self.r:.3f}({self.p_value:.3f})"


def _as_pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise DomainError("x and y must be 1-D sequences of equal length")
    if len(x) < 3:
        raise DomainError(f"correlation needs n >= 3, got {len(x)}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DomainError("inputs contain non-finite values")
    return x, y


def _pearson_r(x: np.ndarray, y: np.ndarray) -> float:
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateInputError("correlation is undefined for a constant input")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    if abs(r) > 1.0 - 1e-12:
        r = math.copysign(1.0, r)
    return r


def _t_test_p(r: float, n: int) -> float:
    if abs(r) == 1.0:
        return 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return student_t_two_sided_p(t, n - 2)


def pearson(x: Sequence[float], y: Sequence[float]) -> CorrelationResult:
    x, y = _as_pair(x, y)
    r = _pearson_r(x, y)
    return CorrelationResult(r, _t_test_p(r, len(x)), len(x), "pearson")


def rank_average_ties(x: Sequence[float]) -> np.ndarray:
    """Ranks 1..n; tied values share the mean of the positions they occupy."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or len(x) == 0:
        raise DomainError("ranking needs a non-empty 1-D sequence")
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float], exact: bool = False) -> CorrelationResult:
    """Pearson on average ranks; p-value by the t approximation.

    ``exact=True`` (n <= 10) replaces the p-value by the exact permutation
    probability of a rank correlation at least as extreme.
    """
    x, y = _as_pair(x, y)
    rx, ry = rank_average_ties(x), rank_average_ties(y)
    r = _pearson_r(rx, ry)
    p = _exact_permutation_p(rx, ry, r) if exact else _t_test_p(r, len(x))
    return CorrelationResult(r, p, len(x), "spearman")


def _exact_permutation_p(rx: np.ndarray, ry: np.ndarray, r_obs: float) -> float:
    # DP over subsets of y-ranks assigned to the first popcount(mask) x-ranks,
    # tracking the distribution of sum(2*rx * 2*ry) (integral with half-ranks).
    n = len(rx)
    if n > 10:
        raise DomainError(f"exact permutation p-value supported for n <= 10, got {n}")
    a = np.rint(2 * rx).astype(np.int64)
    b = np.rint(2 * ry).astype(np.int64)
    max_s = int(np.sort(a) @ np.sort(b))
    counts = np.zeros((1 << n, max_s + 1), dtype=np.int64)
    counts[0, 0] = 1
    for mask in range(1 << n):
        row = counts[mask]
        if not row.any():
            continue
        pos = bin(mask).count("1")
        if pos == n:
            continue
        for j in range(n):
            bit = 1 << j
            if mask & bit:
                continue
            shift = int(a[pos] * b[j])
            counts[mask | bit, shift:] += row[: max_s + 1 - shift]
    dist = counts[(1 << n) - 1]
    s_vals = np.arange(max_s + 1)
    mean_x, mean_y = rx.mean(), ry.mean()
    sd = math.sqrt(float(((rx - mean_x) ** 2).sum() * ((ry - mean_y) ** 2).sum()))
    rho = (s_vals / 4.0 - n * mean_x * mean_y) / sd
    extreme = np.abs(rho) >= abs(r_obs) - 1e-12
    return float(dist[extreme].sum() / dist.sum())
