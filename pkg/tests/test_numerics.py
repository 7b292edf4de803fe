import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from urabound.numerics import (
    DomainError,
    clamp_to_prob,
    log_binomial,
    log_binomial_or_neginf,
    log_reg_lower_gamma,
    log_reg_upper_gamma,
    log_sum_exp,
    reg_lower_gamma,
    reg_upper_gamma,
    to_linear,
)


def test_log_binomial_examples():
    assert log_binomial(10, 0) == 0.0
    assert log_binomial(10, 3) == pytest.approx(math.log(120), rel=1e-14)
    assert log_binomial(10, 3) == pytest.approx(4.78749, abs=1e-5)


def test_log_binomial_huge_n_matches_mpmath():
    n = 2**100
    mpmath.mp.dps = 60
    ref = mpmath.log(mpmath.binomial(n, 5))
    assert log_binomial(n, 5) == pytest.approx(float(ref), rel=1e-12)
    ref2 = mpmath.log(mpmath.binomial(n - 25, 300))
    assert log_binomial(n - 25, 300) == pytest.approx(float(ref2), rel=1e-12)


def test_log_binomial_exact_integer_oracle_up_to_60():
    for n in range(61):
        for k in range(n + 1):
            exact = math.log(math.comb(n, k))
            got = log_binomial(n, k)
            assert abs(got - exact) <= 1e-10 * max(abs(exact), 1e-300) or abs(got - exact) < 1e-14


def test_log_binomial_large_k_uses_lgamma_consistently():
    mpmath.mp.dps = 40
    for n, k in [(30000, 5000), (10**6, 250000), (2**60, 10000)]:
        ref = float(mpmath.log(mpmath.binomial(n, k)))
        assert log_binomial(n, k) == pytest.approx(ref, rel=1e-10)


@given(st.integers(min_value=1, max_value=200), st.data())
@settings(max_examples=300, deadline=None)
def test_pascal_identity_in_log_scale(n, data):
    k = data.draw(st.integers(min_value=1, max_value=n))
    lhs = log_sum_exp([log_binomial(n - 1, k - 1), log_binomial_or_neginf(n - 1, k)])
    assert lhs == pytest.approx(log_binomial(n, k), abs=1e-9)


@given(st.integers(min_value=0, max_value=10**7), st.data())
@settings(max_examples=200, deadline=None)
def test_log_binomial_symmetric(n, data):
    k = data.draw(st.integers(min_value=0, max_value=n))
    assert log_binomial(n, k) == log_binomial(n, n - k)


def test_log_binomial_domain_errors():
    with pytest.raises(DomainError):
        log_binomial(3, 4)
    with pytest.raises(DomainError):
        log_binomial(-1, 0)
    assert log_binomial_or_neginf(3, 4) == -math.inf


def test_reg_upper_gamma_examples():
    for a in (0.5, 1.0, 7.0, 30000.0):
        assert reg_upper_gamma(a, 0.0) == 1.0
    assert reg_upper_gamma(1.0, 2.0) == pytest.approx(math.exp(-2.0), rel=1e-14)
    assert abs(reg_upper_gamma(2.0, 1.0) - 2.0 * math.exp(-1.0)) <= 1e-12


def test_q1_closed_form_on_grid():
    xs = np.linspace(0.0, 50.0, 2001)
    err = max(abs(reg_upper_gamma(1.0, x) - math.exp(-x)) for x in xs)
    assert err <= 1e-12


@pytest.mark.parametrize(
    "a,x",
    [(0.5, 0.1), (3.0, 2.5), (3.0, 4.5), (50.0, 40.0), (50.0, 70.0), (256.0, 284.4), (30000.0, 29000.0), (30000.0, 31000.0)],
)
def test_reg_upper_gamma_matches_scipy(a, x):
    assert reg_upper_gamma(a, x) == pytest.approx(special.gammaincc(a, x), rel=1e-10, abs=1e-300)
    assert reg_lower_gamma(a, x) == pytest.approx(special.gammainc(a, x), rel=1e-10, abs=1e-300)


@pytest.mark.parametrize("x", [30000.0, 33333.3, 37500.0, 45000.0])
def test_log_upper_gamma_large_shape_mpmath(x):
    # Q(n, nP/P') for n = 30000; deep tails underflow in linear scale
    mpmath.mp.dps = 50
    ref = float(mpmath.log(mpmath.gammainc(30000, x, mpmath.inf, regularized=True)))
    assert log_reg_upper_gamma(30000.0, x) == pytest.approx(ref, rel=1e-9, abs=1e-12)


def test_q_at_shape_equals_x_near_half():
    mpmath.mp.dps = 30
    ref = float(mpmath.gammainc(30000, 30000, mpmath.inf, regularized=True))
    assert reg_upper_gamma(30000.0, 30000.0) == pytest.approx(ref, rel=1e-9)
    assert abs(ref - 0.5) < 0.01


@given(st.floats(min_value=0.05, max_value=500.0), st.floats(min_value=0.0, max_value=800.0))
@settings(max_examples=300, deadline=None)
def test_upper_plus_lower_is_one(a, x):
    total = reg_upper_gamma(a, x) + reg_lower_gamma(a, x)
    assert total == pytest.approx(1.0, abs=1e-12)


@given(st.floats(min_value=0.05, max_value=300.0), st.floats(min_value=0.0, max_value=400.0), st.floats(min_value=0.0, max_value=50.0))
@settings(max_examples=300, deadline=None)
def test_upper_gamma_non_increasing_in_x(a, x, dx):
    assert log_reg_upper_gamma(a, x + dx) <= log_reg_upper_gamma(a, x) + 1e-12


def test_gamma_domain_errors():
    with pytest.raises(DomainError):
        reg_upper_gamma(0.0, 1.0)
    with pytest.raises(DomainError):
        reg_upper_gamma(1.0, -1.0)
    with pytest.raises(DomainError):
        log_reg_lower_gamma(-2.0, 1.0)


def test_log_sum_exp_examples():
    assert log_sum_exp([0.0, 0.0]) == pytest.approx(math.log(2.0), rel=1e-15)
    assert log_sum_exp([-1000.0, -1000.0]) == pytest.approx(-1000.0 + math.log(2.0), rel=1e-15)
    assert log_sum_exp([3.25]) == 3.25
    assert log_sum_exp([-math.inf, 1.0]) == 1.0
    assert log_sum_exp([-math.inf]) == -math.inf
    with pytest.raises(DomainError):
        log_sum_exp([])


@given(st.lists(st.floats(min_value=-700, max_value=700), min_size=1, max_size=20), st.floats(min_value=-1e4, max_value=1e4))
@settings(max_examples=200, deadline=None)
def test_log_sum_exp_shift_invariance(terms, shift):
    base = log_sum_exp(terms)
    assert log_sum_exp([t + shift for t in terms]) == pytest.approx(base + shift, rel=1e-12, abs=1e-9)
    assert base >= max(terms)


def test_clamp_and_linear():
    assert clamp_to_prob(0.3) == 0.0
    assert clamp_to_prob(-2.0) == -2.0
    assert to_linear(5.0) == 1.0
    assert to_linear(-math.inf) == 0.0
