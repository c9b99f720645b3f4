"""Two-sample t-tests and Pearson correlation for the rating study.

p-values come from the t CDF evaluated through the regularized
incomplete beta function (continued fraction, absolute tolerance well
below 1e-10). The "student" variant is the classical pooled-variance
unpaired test; "welch" uses the Satterthwaite degrees of freedom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DataError, NumericError

_CF_MAX_ITER = 300
_CF_EPS = 1e-15
_CF_FPMIN = 1e-300


def _beta_cf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_FPMIN:
        d = _CF_FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_FPMIN:
            d = _CF_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _CF_FPMIN:
            c = _CF_FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_FPMIN:
            d = _CF_FPMIN
        c = 1.0 + aa / c
        if abs(c) < _CF_FPMIN:
            c = _CF_FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise NumericError(f"incomplete beta continued fraction did not converge "
                       f"(a={a}, b={b}, x={x})")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise DataError(f"incomplete beta needs a, b > 0, got a={a}, b={b}")
    if not 0.0 <= x <= 1.0:
        raise DataError(f"incomplete beta needs x in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_cf(a, b, x) / a
    return 1.0 - front * _beta_cf(b, a, 1.0 - x) / b


def t_two_tailed_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for a t distribution with df degrees of freedom."""
    if df <= 0:
        raise DataError(f"degrees of freedom must be > 0, got {df}")
    if t == 0.0:
        return 1.0
    x = df / (df + t * t)
    return regularized_incomplete_beta(df / 2.0, 0.5, x)


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: float
    p: float
    variant: str


def _mean(values: list[float]) -> float:
    return math.fsum(values) / len(values)


def _sample_var(values: list[float], mean: float) -> float:
    return math.fsum((v - mean) ** 2 for v in values) / (len(values) - 1)


def _t_from_summary(mean_a: float, var_a: float, n_a: int,
                    mean_b: float, var_b: float, n_b: int,
                    variant: str) -> TTestResult:
    if variant not in ("student", "welch"):
        raise DataError(f"t-test variant must be 'student' or 'welch', got {variant!r}")
    if n_a < 2 or n_b < 2:
        raise DataError(f"each sample needs n >= 2, got {n_a} and {n_b}")
    if variant == "student":
        df = float(n_a + n_b - 2)
        pooled = ((n_a - 1) * var_a + (n_b - 1) * var_b) / df
        se2 = pooled * (1.0 / n_a + 1.0 / n_b)
    else:
        se2 = var_a / n_a + var_b / n_b
        if se2 > 0.0:
            df = se2 ** 2 / ((var_a / n_a) ** 2 / (n_a - 1) + (var_b / n_b) ** 2 / (n_b - 1))
        else:
            df = float(n_a + n_b - 2)
    if se2 <= 0.0:
        if mean_a == mean_b:
            # zero variance in both samples with equal means: p = 1 by convention
            return TTestResult(t=0.0, df=df, p=1.0, variant=variant)
        raise DataError("zero variance in both samples with unequal means: t undefined")
    t = (mean_a - mean_b) / math.sqrt(se2)
    return TTestResult(t=t, df=df, p=t_two_tailed_p(t, df), variant=variant)


def t_test_samples(a, b, variant: str = "student") -> TTestResult:
    """Two-sample unpaired t test on raw values, two-tailed p."""
    a = [float(v) for v in a]
    b = [float(v) for v in b]
    if len(a) < 2 or len(b) < 2:
        raise DataError(f"each sample needs n >= 2, got {len(a)} and {len(b)}")
    mean_a, mean_b = _mean(a), _mean(b)
    return _t_from_summary(mean_a, _sample_var(a, mean_a), len(a),
                           mean_b, _sample_var(b, mean_b), len(b), variant)


def t_test_summary(mean_a: float, sd_a: float, n_a: int,
                   mean_b: float, sd_b: float, n_b: int,
                   variant: str = "student") -> TTestResult:
    """Same test driven by summary statistics (sds are sample sds)."""
    if sd_a < 0 or sd_b < 0:
        raise DataError(f"standard deviations must be >= 0, got {sd_a}, {sd_b}")
    return _t_from_summary(float(mean_a), float(sd_a) ** 2, int(n_a),
                           float(mean_b), float(sd_b) ** 2, int(n_b), variant)


def pearson_r(x, y) -> float:
    """Product-moment correlation; both series must be non-constant."""
    x = [float(v) for v in x]
    y = [float(v) for v in y]
    if len(x) != len(y):
        raise DataError(f"series lengths differ: {len(x)} vs {len(y)}")
    if len(x) < 2:
        raise DataError(f"correlation needs at least 2 pairs, got {len(x)}")
    mx, my = _mean(x), _mean(y)
    sxx = math.fsum((v - mx) ** 2 for v in x)
    syy = math.fsum((v - my) ** 2 for v in y)
    if sxx == 0.0 or syy == 0.0:
        raise DataError("correlation undefined for a constant series")
    sxy = math.fsum((u - mx) * (v - my) for u, v in zip(x, y))
    return sxy / math.sqrt(sxx * syy)
