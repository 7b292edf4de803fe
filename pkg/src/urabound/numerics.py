"""Log-domain special functions used by the bound terms.

Every probability-like quantity in the bound is carried as a natural log
(``M = 2**k`` overflows linear scale long before k = 100), and only turned
back into a linear number at output time.
"""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

# Below this many factors log C(n, k) is summed term by term instead of via
# lgamma differences, which cancel catastrophically once n exceeds ~2**53.
_DIRECT_SUM_LIMIT = 4096
_LGAMMA_CANCEL_LIMIT = 2.0**30
_VECTOR_SUM_LIMIT = 10**7

_MAX_ITER = 200_000
_EPS = 1e-16
_TINY = 1e-300


class DomainError(ValueError):
    """Argument outside the mathematical domain of a numerics kernel."""


def clamp_to_prob(log_value: float) -> float:
    """Clamp a log-probability to the probability range, i.e. ``min(value, 0)``."""
    return min(log_value, 0.0)


def to_linear(log_value: float) -> float:
    return math.exp(clamp_to_prob(log_value))


def log_binomial(n_total: int, k_choose: int) -> float:
    """Natural log of the binomial coefficient C(n_total, k_choose).

    ``n_total`` may be an arbitrary-precision Python int (e.g. ``2**100 - 25``);
    small ``k`` uses an exact product of ratios so huge ``n_total`` stays exact
    to double precision.
    """
    if n_total < 0 or k_choose < 0:
        raise DomainError(f"log_binomial needs nonnegative arguments, got ({n_total}, {k_choose})")
    if k_choose > n_total:
        raise DomainError(f"log_binomial: k={k_choose} exceeds n={n_total}")
    k = min(k_choose, n_total - k_choose)
    if k == 0:
        return 0.0
    if k <= _DIRECT_SUM_LIMIT:
        # ln C(n,k) = sum_{i<k} ln(n - i) - ln(i + 1)
        if isinstance(n_total, int) and n_total > 2**52:
            log_n = math.log(n_total)
            inv = 1.0 / float(n_total)
            return math.fsum(log_n + math.log1p(-i * inv) - math.log(i + 1) for i in range(k))
        return math.fsum(math.log(n_total - i) - math.log(i + 1) for i in range(k))
    nf = float(n_total)
    if nf > _LGAMMA_CANCEL_LIMIT and k <= _VECTOR_SUM_LIMIT:
        # lgamma(n) differences cancel catastrophically for huge n
        i = np.arange(k, dtype=float)
        return k * math.log(nf) + math.fsum(np.log1p(-i / nf)) - math.lgamma(k + 1.0)
    return math.lgamma(nf + 1.0) - math.lgamma(k + 1.0) - math.lgamma(nf - k + 1.0)


def log_binomial_or_neginf(n_total: int, k_choose: int) -> float:
    """Like :func:`log_binomial` but returns ``-inf`` for an empty choice (k > n)."""
    if 0 <= n_total < k_choose:
        return -math.inf
    return log_binomial(n_total, k_choose)


def log_sum_exp(terms: Iterable[float]) -> float:
    """Overflow-free ``ln(sum(exp(t)))``; ``-inf`` entries are allowed."""
    values = list(terms)
    if not values:
        raise DomainError("log_sum_exp of an empty list")
    top = max(values)
    if top == -math.inf:
        return -math.inf
    if top == math.inf:
        return math.inf
    return top + math.log(math.fsum(math.exp(v - top) for v in values))


def _check_gamma_args(shape: float, x: float) -> None:
    if not shape > 0:
        raise DomainError(f"incomplete gamma needs shape > 0, got {shape}")
    if not x >= 0:
        raise DomainError(f"incomplete gamma needs x >= 0, got {x}")


def _log_prefactor(shape: float, x: float) -> float:
    # ln(x^a e^-x / Gamma(a))
    return shape * math.log(x) - x - math.lgamma(shape)


def _log_lower_series(shape: float, x: float) -> float:
    """ln P(a, x) from the power series; converges for all x but fast only for x < a + 1."""
    ap = shape
    term = 1.0 / shape
    total = term
    for _ in range(_MAX_ITER):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    else:
        raise ArithmeticError(f"lower gamma series did not converge (a={shape}, x={x})")
    return _log_prefactor(shape, x) + math.log(total)


def _log_upper_cf(shape: float, x: float) -> float:
    """ln Q(a, x) from the continued fraction (modified Lentz); valid for x > a - 1."""
    b = x + 1.0 - shape
    c = 1.0 / _TINY
    d = 1.0 / b if b != 0 else 1.0 / _TINY
    h = d
    for i in range(1, _MAX_ITER):
        an = -i * (i - shape)
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
    else:
        raise ArithmeticError(f"upper gamma continued fraction did not converge (a={shape}, x={x})")
    return _log_prefactor(shape, x) + math.log(h)


def log_reg_upper_gamma(shape: float, x: float) -> float:
    """ln Q(shape, x) with Q = Gamma(shape, x) / Gamma(shape).

    Stays finite where Q itself underflows, e.g. Q(30000, 37500) ~ e^-800.
    """
    _check_gamma_args(shape, x)
    if x == 0:
        return 0.0
    if x < shape + 1.0:
        log_p = _log_lower_series(shape, x)
        return math.log1p(-math.exp(log_p)) if log_p < -0.693 else math.log(-math.expm1(log_p))
    return _log_upper_cf(shape, x)


def log_reg_lower_gamma(shape: float, x: float) -> float:
    """ln P(shape, x) = ln(1 - Q(shape, x))."""
    _check_gamma_args(shape, x)
    if x == 0:
        return -math.inf
    if x < shape + 1.0:
        return _log_lower_series(shape, x)
    log_q = _log_upper_cf(shape, x)
    return math.log1p(-math.exp(log_q)) if log_q < -0.693 else math.log(-math.expm1(log_q))


def reg_upper_gamma(shape: float, x: float) -> float:
    return math.exp(log_reg_upper_gamma(shape, x))


def reg_lower_gamma(shape: float, x: float) -> float:
    return math.exp(log_reg_lower_gamma(shape, x))
