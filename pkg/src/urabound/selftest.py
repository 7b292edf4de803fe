"""Fast built-in checks run by ``urabound selftest``.

Each check recomputes a quantity with an independent closed form or a
brute-force search.  The full suites live in the test directory; these
are the subset that needs no test framework and runs in seconds.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable

import numpy as np

from .bound import q1_grid_search, q1_term, _q1_corner
from .constants import estimate_J, estimate_K_E
from .diffusion import analytic_model, denoise
from .infodensity import InfoDensityEstimator, sample_information_density, subset_terms
from .numerics import log_binomial, log_sum_exp, reg_upper_gamma
from .sysmodel import SystemConfig, sample_channel_output


def _check_gamma():
    worst = max(abs(reg_upper_gamma(1.0, x) - math.exp(-x)) for x in np.linspace(0.0, 50.0, 501))
    worst = max(worst, abs(reg_upper_gamma(2.0, 1.0) - 2.0 * math.exp(-1.0)))
    return worst <= 1e-12, f"max |Q - closed form| = {worst:.2e}"


def _check_binomial():
    worst = 0.0
    for n in range(61):
        for k in range(n + 1):
            exact = math.log(math.comb(n, k))
            got = log_binomial(n, k)
            worst = max(worst, abs(got - exact) / max(abs(exact), 1.0))
    for n in range(1, 201):
        for k in range(1, n):
            lhs = log_sum_exp([log_binomial(n - 1, k - 1), log_binomial(n - 1, k)])
            worst = max(worst, abs(lhs - log_binomial(n, k)))
    return worst <= 1e-9, f"max error (exact and Pascal) = {worst:.2e}"


def _check_q1():
    cfg = SystemConfig(ka=2, n=100, k=2, p=2.0, p_prime=1.0)
    got = q1_term(cfg, 1, 1.0).log_q1
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(50):
        a = rng.uniform(0.0, 20.0)
        b = rng.uniform(-40.0, 10.0)
        worst = max(worst, abs(_q1_corner(a, b).log_q1 - q1_grid_search(a, b).log_q1))
    ok = abs(got + 10.4476) <= 1e-4 and worst <= 1e-9
    return ok, f"worked log q1 = {got:.5f}, corner vs grid = {worst:.1e}"


def _check_idens():
    cfg = SystemConfig(ka=4, n=32, k=6, p=1.2, p_prime=1.0)
    sample = sample_channel_output(cfg, seed=7)
    terms = subset_terms(sample, list(itertools.combinations(range(4), 2)), 1.0, 2)
    znorm2 = float(sample.noise @ sample.noise)
    err = float(np.max(np.abs(terms["quad2"] - znorm2)) / znorm2)
    greedy_ok = True
    for seed in range(50):
        cfg6 = SystemConfig(ka=6, n=8, k=6, p=1.2, p_prime=1.0)
        ex = sample_information_density(cfg6, 2, seed)
        gr = sample_information_density(cfg6, 2, seed, force_greedy=True)
        greedy_ok &= gr.i_t >= ex.i_t - 1e-9
    est = InfoDensityEstimator(3, 16, samples=200, seed=1)
    finite = all(np.all(np.isfinite(v)) for v in est.draws(0.5, [1, 2, 3]).values())
    return err <= 1e-9 and greedy_ok and finite, f"quad2 identity rel err = {err:.1e}, greedy >= exact: {greedy_ok}"


def _check_constants():
    cfg = SystemConfig(ka=4, n=32, k=8, p=1.2, p_prime=1.0)
    model = analytic_model(cfg.output_variance, cfg.n)
    j = estimate_J(model, cfg, N=20_000, seed=0)
    k_e = estimate_K_E(model, cfg, N=2000, seed=0, denoiser=lambda y: denoise(model, y))
    ok = abs(j - 0.2) / 0.2 <= 0.1 and k_e <= 1e-8
    return ok, f"J* = {j:.4f} (expect ~0.2), K_E = {k_e:.1e}"


CHECKS: dict[str, Callable[[], tuple[bool, str]]] = {
    "incomplete_gamma": _check_gamma,
    "log_binomial": _check_binomial,
    "q1_optimizer": _check_q1,
    "information_density": _check_idens,
    "denoiser_constants": _check_constants,
}


def run(stream=None) -> bool:
    all_ok = True
    for name, fn in CHECKS.items():
        ok, detail = fn()
        all_ok &= ok
        line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
        if stream is not None:
            print(line, file=stream)
    return all_ok
