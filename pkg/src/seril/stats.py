"""Paired t-test with a hand-rolled Student-t CDF.

The two-sided p-value of a t statistic with ``df`` degrees of freedom is
``I_x(df/2, 1/2)`` with ``x = df / (df + t^2)``, where ``I`` is the
regularized incomplete beta function, evaluated here by Lentz's method on
its continued fraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

SIGNIFICANCE = 0.05

_MAX_ITER = 500
_EPS = 1e-15
_TINY = 1e-300


def _beta_cf(a: float, b: float, x: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _TINY if abs(d) < _TINY else d
        c = 1.0 + aa / c
        c = _TINY if abs(c) < _TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # the continued fraction converges fastest on this side of the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def _two_tail(t: float, df: float) -> float:
    """P(|T| > |t|), using the complementary argument near zero to keep precision."""
    if t * t < df:
        return 1.0 - betainc(0.5, df / 2.0, t * t / (df + t * t))
    return betainc(df / 2.0, 0.5, df / (df + t * t))


def t_cdf(t: float, df: float) -> float:
    if t * t < df:
        half = 0.5 * betainc(0.5, df / 2.0, t * t / (df + t * t))
        return 0.5 + half if t > 0 else 0.5 - half
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t))
    return 1.0 - tail if t > 0 else tail


def t_two_sided_p(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    return min(1.0, _two_tail(t, df))


@dataclass(frozen=True)
class TTestResult:
    p_value: float
    t: float
    df: int
    mean_diff: float
    degenerate: bool = False
    threshold: float = SIGNIFICANCE

    @property
    def significant(self) -> bool:
        return not self.degenerate and self.p_value <= self.threshold


def paired_ttest(a, b, threshold: float = SIGNIFICANCE) -> TTestResult:
    """Two-sided paired t-test of ``a - b``.

    Zero variance of the differences gives p = 1 with ``degenerate`` set.
    """
    a, b = list(map(float, a)), list(map(float, b))
    if len(a) != len(b):
        raise ValueError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise ValueError("paired t-test needs at least two pairs")
    diffs = [x - y for x, y in zip(a, b)]
    mean = math.fsum(diffs) / n
    var = math.fsum((d - mean) ** 2 for d in diffs) / (n - 1)
    if var <= 1e-24 * max(1.0, mean * mean):
        return TTestResult(1.0, 0.0, n - 1, mean, degenerate=True, threshold=threshold)
    t = mean / math.sqrt(var / n)
    return TTestResult(t_two_sided_p(t, n - 1), t, n - 1, mean, threshold=threshold)
