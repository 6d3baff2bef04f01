"""Deterministic numeric substrate.

Seeded counter-based random streams, the special functions behind the
Student-t tail probability, and Gamma / Dirichlet sampling.
"""

from __future__ import annotations

import math
import zlib
from typing import Sequence

import numpy as np

from .errors import DomainError

__all__ = [
    "Rng",
    "log_gamma",
    "reg_inc_beta",
    "student_t_two_sided_p",
    "gamma_sample",
    "dirichlet_sample",
]


def _label_to_int(label: int | str) -> int:
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError(f"stream label must be non-negative, got {label}")
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


class Rng:
    """Seeded Philox stream addressed by ``(seed, stream)``.

    ``derive`` appends labels to the stream key, so every (experiment seed,
    client id, round) triple gets its own independent generator. An ``Rng``
    is single-owner; concurrent callers must derive their own streams.
    """

    def __init__(self, seed: int, stream: Sequence[int | str] = ()):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.stream = tuple(_label_to_int(s) for s in stream)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.stream)
        self.gen = np.random.Generator(np.random.Philox(ss))

    @property
    def stream_id(self) -> int:
        return self.stream[-1] if self.stream else 0

    def derive(self, *labels: int | str) -> "Rng":
        return Rng(self.seed, self.stream + tuple(_label_to_int(x) for x in labels))

    def random(self, size=None):
        return self.gen.random(size)

    def normal(self, size=None):
        return self.gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, in draw order."""
        return self.gen.permutation(n)[:k]

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"


def log_gamma(x: float) -> float:
    if not x > 0 or not math.isfinite(x):
        raise DomainError(f"log_gamma requires a finite positive argument, got {x}")
    return math.lgamma(x)


_CF_EPS = 1e-16
_CF_TINY = 1e-300
_CF_MAX_ITER = 10_000


def _beta_cf(a: float, b: float, x: float) -> float:
    # Modified Lentz evaluation of the incomplete-beta continued fraction.
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def reg_inc_beta(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if not (a > 0 and b > 0):
        raise DomainError(f"reg_inc_beta requires a > 0 and b > 0, got a={a}, b={b}")
    if not 0.0 <= x <= 1.0:
        raise DomainError(f"reg_inc_beta requires 0 <= x <= 1, got x={x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    front = math.exp(
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    if x > (a + 1.0) / (a + b + 2.0):
        val = 1.0 - front * _beta_cf(b, a, 1.0 - x) / b
    else:
        val = front * _beta_cf(a, b, x) / a
    return min(1.0, max(0.0, val))


def student_t_two_sided_p(t: float, dof: int) -> float:
    """P(|T| >= |t|) for Student's t with ``dof`` degrees of freedom."""
    if dof < 1:
        raise DomainError(f"degrees of freedom must be >= 1, got {dof}")
    if math.isnan(t):
        raise DomainError("t statistic is NaN")
    if math.isinf(t):
        return 0.0
    t2 = t * t
    if t2 == 0.0:
        return 1.0
    return reg_inc_beta(dof / 2.0, 0.5, dof / (dof + t2))


def _log_gamma_sample(shape: float, rng: Rng) -> float:
    # Marsaglia-Tsang squeeze; shape < 1 boosted via G(a) = G(a+1) * U^(1/a).
    # Returned in log space so tiny shapes cannot underflow to zero.
    boost = 0.0
    if shape < 1.0:
        u = rng.random()
        while u == 0.0:
            u = rng.random()
        boost = math.log(u) / shape
        shape += 1.0
    d = shape - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = rng.normal()
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = rng.random()
        x2 = x * x
        if u < 1.0 - 0.0331 * x2 * x2:
            break
        if u > 0.0 and math.log(u) < 0.5 * x2 + d * (1.0 - v + math.log(v)):
            break
    return math.log(d * v) + boost


def gamma_sample(shape: float, rng: Rng) -> float:
    """One draw from Gamma(shape, scale=1)."""
    if not shape > 0 or not math.isfinite(shape):
        raise DomainError(f"gamma shape must be positive, got {shape}")
    return math.exp(_log_gamma_sample(shape, rng))


def dirichlet_sample(concentration: Sequence[float], rng: Rng) -> np.ndarray:
    """Point on the simplex from normalized independent Gamma draws."""
    conc = [float(a) for a in concentration]
    if not conc:
        raise DomainError("dirichlet concentration must be non-empty")
    for a in conc:
        if not a > 0 or not math.isfinite(a):
            raise DomainError(f"dirichlet concentration entries must be positive, got {a}")
    logs = np.array([_log_gamma_sample(a, rng) for a in conc])
    w = np.exp(logs - logs.max())
    return w / w.sum()
