"""Achievability bound for the unsourced Gaussian MAC with a denoiser.

    eps <= sum_t (t/K_a) min(q1(t), q2(t)) + q0

* q0: change of measure (message collisions plus codewords outside the
  power ball), computed exactly in log scale.
* q1: two-level Gallager rho-trick over a pairwise Chernoff kernel whose
  variance is inflated by v* = 1 + J* + K_E^2.
* q2: Monte Carlo over the information density I_t.

Everything probability-like is a natural log until :func:`epsilon_bound`
assembles the final number.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np

from .constants import DenoiserConstants
from .infodensity import (
    DEFAULT_SUBSET_BUDGET,
    IDENS_VARIANTS,
    InfoDensityEstimator,
    InfoDensitySample,
    sample_information_density,
)
from .numerics import log_binomial, log_binomial_or_neginf, log_reg_upper_gamma, log_sum_exp
from .sysmodel import SystemConfig, ebn0_db_to_power

__all__ = [
    "BaselineLabel",
    "BoundBreakdown",
    "BoundOptions",
    "BracketError",
    "EstimatorPool",
    "InfoDensitySample",
    "KERNELS",
    "TermBreakdown",
    "baseline_epsilon_bound",
    "epsilon_bound",
    "log_pairwise_kernel",
    "pairwise_bound",
    "q0_term",
    "q1_grid_search",
    "q1_term",
    "q2_from_draws",
    "q2_term",
    "required_ebn0",
    "sample_information_density",
]

KERNELS = ("printed", "rederived", "baseline")
Q2_VARIANTS = ("product", "theorem")
DEFAULT_RATIOS = (0.80, 0.85, 0.90, 0.95, 0.99)
BaselineLabel = "baseline (rederived)"


class BracketError(ArithmeticError):
    def __init__(self, lo_db, hi_db, eps_lo, eps_hi, target):
        self.lo_db, self.hi_db, self.eps_lo, self.eps_hi, self.target = lo_db, hi_db, eps_lo, eps_hi, target
        super().__init__(
            f"bracket failure: eps({lo_db} dB)={eps_lo:.6g}, eps({hi_db} dB)={eps_hi:.6g}, target={target:g}"
        )


# -- q0 ------------------------------------------------------------------------


def q0_term(config: SystemConfig) -> float:
    """ln( C(K_a,2)/M + K_a Q(n, nP/P') ), not clamped."""
    collide = log_binomial(config.ka, 2) - config.log_m if config.ka >= 2 else -math.inf
    shape = float(config.n)
    outside = math.log(config.ka) + log_reg_upper_gamma(shape, shape * config.p / config.p_prime)
    return log_sum_exp([collide, outside])


# -- q1 ------------------------------------------------------------------------


def log_pairwise_kernel(t: int, p_prime: float, v_star: float, n: int, kernel: str = "printed") -> float:
    """Log of the single-pair Chernoff bound on P(||h + R|| < ||R||), h ~ N(0, 2tP' I).

    printed:   -1/(2tP' + 16v) - n ln(1 + tP'/(8v))
    rederived: -(n/2) ln(1 + tP'/(4v))      (Gaussian average of exp(-||h||^2/(16v)))
    baseline:  -(n/2) ln(1 + tP'/2)         (no denoiser split, gamma = 1/4)
    """
    if kernel == "printed":
        return -1.0 / (2.0 * t * p_prime + 16.0 * v_star) - n * math.log1p(t * p_prime / (8.0 * v_star))
    if kernel == "rederived":
        return -0.5 * n * math.log1p(t * p_prime / (4.0 * v_star))
    if kernel == "baseline":
        return -0.5 * n * math.log1p(t * p_prime / 2.0)
    raise ValueError(f"unknown pairwise kernel {kernel!r}")


def pairwise_bound(t: int, p_prime: float, v_star: float, n: float) -> float:
    return math.exp(log_pairwise_kernel(t, p_prime, v_star, n, "printed"))


@lru_cache(maxsize=65536)
def _log_binomials(ka: int, k: int, t: int) -> tuple[float, float]:
    """(ln C(K_a, t), ln C(M - K_a, t)); the second is -inf when M - K_a < t."""
    return log_binomial(ka, t), log_binomial_or_neginf(2**k - ka, t)


@dataclass(frozen=True)
class Q1Result:
    log_q1: float
    rho0: float
    rho1: float


def _q1_corner(a: float, b: float) -> Q1Result:
    # min over [0,1]^2 of rho1*a + rho0*rho1*b with a >= 0: zero (rho1 = 0)
    # or the (1, 1) corner
    total = a + b
    if total < 0:
        return Q1Result(total, 1.0, 1.0)
    return Q1Result(0.0, 0.0, 0.0)


def q1_term(config: SystemConfig, t: int, v_star: float, kernel: str = "printed") -> Q1Result:
    """Tightest rho-trick value of ln q1(t) over (rho0, rho1) in [0,1]^2."""
    if not 1 <= t <= config.ka:
        raise ValueError(f"t={t} outside [1, {config.ka}]")
    if v_star < 1:
        raise ValueError(f"v* must be >= 1, got {v_star}")
    a, log_comp = _log_binomials(config.ka, config.k, t)
    b = log_comp + log_pairwise_kernel(t, config.p_prime, v_star, config.n, kernel)
    return _q1_corner(a, b)


def q1_grid_search(a: float, b: float, steps: int = 101) -> Q1Result:
    """Brute-force minimum of rho1*a + rho0*rho1*b on a (steps x steps) grid, clamped to <= 0."""
    rho = np.linspace(0.0, 1.0, steps)
    r0, r1 = np.meshgrid(rho, rho, indexing="ij")
    with np.errstate(invalid="ignore"):
        vals = r1 * a + r0 * r1 * b
    vals = np.where(np.isnan(vals), 0.0, vals)
    i, j = np.unravel_index(np.argmin(vals), vals.shape)
    return Q1Result(min(float(vals[i, j]), 0.0), float(rho[i]), float(rho[j]))


# -- q2 ------------------------------------------------------------------------


@dataclass(frozen=True)
class Q2Result:
    log_q2: float
    prob: float
    psi: float
    mc_halfwidth: float
    samples: int


def q2_log_competitors(config: SystemConfig, t: int, variant: str = "product") -> float:
    """ln of the competitor mass multiplying e^-psi (-inf when M - K_a < t)."""
    a, log_comp = _log_binomials(config.ka, config.k, t)
    total = a + log_comp
    if variant == "product":
        return total
    if variant == "theorem":
        # n (t R1 + R2) / 2 with R1 = ln C(M-K_a,t)/(nt), R2 = ln C(K_a,t)/n
        return 0.5 * total
    raise ValueError(f"unknown q2 variant {variant!r}")


def q2_from_draws(draws: np.ndarray, log_competitors: float) -> Q2Result:
    """inf over psi of F_hat(psi) + exp(L - psi) from i.i.d. draws of I_t.

    Between consecutive order statistics the empirical CDF is flat while the
    second term decreases, so the candidates are psi -> s_(j) from below
    (value (j-1)/N + e^(L - s_(j))), psi = +inf (value 1) and the stationary
    point L + ln N of the smooth part.
    """
    s = np.sort(np.asarray(draws, dtype=float))
    count = s.size
    if count == 0:
        raise ValueError("no draws")
    below = np.arange(count) / count
    if log_competitors == -math.inf:
        tail = np.zeros(count)
    else:
        with np.errstate(over="ignore"):
            tail = np.exp(np.minimum(log_competitors - s, 700.0))
    vals = below + tail
    j = int(np.argmin(vals))
    best, psi, frac = float(vals[j]), float(s[j]), float(below[j])
    if log_competitors > -math.inf:
        stat = log_competitors + math.log(count)
        frac_stat = np.searchsorted(s, stat, side="right") / count
        value = frac_stat + 1.0 / count
        if value < best:
            best, psi, frac = float(value), stat, float(frac_stat)
    if best >= 1.0:
        best, psi, frac = 1.0, math.inf, 1.0
    half = 1.96 * math.sqrt(frac * (1.0 - frac) / count)
    log_q2 = math.log(best) if best > 0 else -math.inf
    return Q2Result(log_q2=log_q2, prob=best, psi=psi, mc_halfwidth=half, samples=count)


class EstimatorPool:
    """Shares one :class:`InfoDensityEstimator` per (K_a, n) and caches q2 results.

    Reusing the estimator gives common random numbers across powers, t and
    bound variants.
    """

    def __init__(self, samples: int = 10_000, seed: int = 0, subset_budget: int = DEFAULT_SUBSET_BUDGET, idens: str = "literal"):
        if samples < 100:
            raise ValueError("q2 needs at least 100 Monte Carlo samples")
        self.samples, self.seed, self.subset_budget, self.idens = samples, seed, subset_budget, idens
        self._estimators: dict[tuple[int, int], InfoDensityEstimator] = {}
        self._q2: dict[tuple, Q2Result] = {}
        self._draws: dict[tuple, dict[int, np.ndarray]] = {}

    def estimator(self, ka: int, n: int) -> InfoDensityEstimator:
        key = (ka, n)
        if key not in self._estimators:
            self._estimators[key] = InfoDensityEstimator(
                ka, n, samples=self.samples, seed=self.seed, subset_budget=self.subset_budget, idens=self.idens
            )
        return self._estimators[key]

    def set_range(self, ka: int, n: int, p_lo: float, p_hi: float) -> None:
        self.estimator(ka, n).set_range(math.sqrt(p_lo), math.sqrt(p_hi))

    def q2(self, config: SystemConfig, ts, variant: str = "product") -> dict[int, Q2Result]:
        ts = [int(t) for t in ts]
        dkey = (config.ka, config.n, config.p_prime)
        out, todo = {}, []
        for t in ts:
            key = (config.ka, config.n, config.k, config.p_prime, t, variant)
            if key in self._q2:
                out[t] = self._q2[key]
            else:
                todo.append(t)
        if todo:
            cached = self._draws.get(dkey, {})
            need = [t for t in todo if t not in cached]
            if need:
                cached.update(self.estimator(config.ka, config.n).draws(config.p_prime, need))
                # only the latest power is kept: callers sweep power, not t
                self._draws = {dkey: cached}
            for t in todo:
                res = q2_from_draws(cached[t], q2_log_competitors(config, t, variant))
                self._q2[(config.ka, config.n, config.k, config.p_prime, t, variant)] = res
                out[t] = res
        return out


def q2_term(
    config: SystemConfig,
    t: int,
    variant: str = "product",
    samples: int = 10_000,
    seed: int = 0,
    subset_budget: int = DEFAULT_SUBSET_BUDGET,
    idens: str = "literal",
) -> Q2Result:
    """q2(t) = inf_psi P_hat[I_t <= psi] + (competitor mass) e^-psi, clamped to <= 1."""
    if not 1 <= t <= config.ka:
        raise ValueError(f"t={t} outside [1, {config.ka}]")
    pool = EstimatorPool(samples=samples, seed=seed, subset_budget=subset_budget, idens=idens)
    return pool.q2(config, [t], variant)[t]


# -- assembly ------------------------------------------------------------------


@dataclass(frozen=True)
class BoundOptions:
    kernel: str = "printed"
    use_q1: bool = True
    use_q2: bool = True
    q2_variant: str = "product"
    idens: str = "literal"
    mc_samples: int = 10_000
    seed: int = 0
    subset_budget: int = DEFAULT_SUBSET_BUDGET
    # skip q2 where (t/K_a) q1 <= q2_skip_rel * eps_target / K_a; using q1
    # alone there is still a valid bound and loosens eps by at most
    # q2_skip_rel * eps_target in total.  Off by default so that orderings
    # between variants hold exactly.
    q2_skip_rel: float = 0.0

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ValueError(f"unknown pairwise kernel {self.kernel!r}")
        if self.q2_variant not in Q2_VARIANTS:
            raise ValueError(f"unknown q2 variant {self.q2_variant!r}")
        if self.idens not in IDENS_VARIANTS:
            raise ValueError(f"unknown information-density variant {self.idens!r}")
        if not (self.use_q1 or self.use_q2):
            raise ValueError("at least one of q1, q2 must be enabled")
        if self.mc_samples < 100:
            raise ValueError("q2 needs at least 100 Monte Carlo samples")

    def to_dict(self) -> dict:
        return asdict(self)

    def pool(self) -> EstimatorPool:
        return EstimatorPool(self.mc_samples, self.seed, self.subset_budget, self.idens)


@dataclass(frozen=True)
class TermBreakdown:
    t: int
    log_q1: float | None
    log_q2: float | None
    rho0: float | None
    rho1: float | None
    psi: float | None
    R1: float
    R2: float
    mc_samples: int
    mc_halfwidth: float | None
    exact: bool | None
    q2_skipped: bool = False

    @property
    def log_min(self) -> float:
        vals = [v for v in (self.log_q1, self.log_q2) if v is not None]
        return min(min(vals), 0.0)

    def contribution(self, ka: int) -> float:
        return self.t / ka * math.exp(self.log_min)


@dataclass(frozen=True)
class BoundBreakdown:
    config: SystemConfig
    v_star: float
    log_q0: float
    per_t: tuple
    eps_total: float
    options: BoundOptions
    label: str = "theorem1"
    extras: dict = field(default_factory=dict)

    @property
    def q0(self) -> float:
        return math.exp(min(self.log_q0, 0.0))

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "config": asdict(self.config),
            "v_star": self.v_star,
            "eps_total": self.eps_total,
            "log_q0": self.log_q0,
            "q0": self.q0,
            "variants": self.options.to_dict(),
            "per_t": [asdict(term) for term in self.per_t],
            **self.extras,
        }


def _v_star(constants) -> float:
    if isinstance(constants, DenoiserConstants):
        return constants.v_star
    return float(constants)


def epsilon_bound(
    config: SystemConfig,
    constants: DenoiserConstants | float = 1.0,
    options: BoundOptions = BoundOptions(),
    pool: EstimatorPool | None = None,
    label: str = "theorem1",
) -> BoundBreakdown:
    """Assemble eps = sum_t (t/K_a) min(q1, q2) + q0, clamped to <= 1."""
    v = _v_star(constants)
    ka = config.ka
    log_q0 = q0_term(config)
    ts = range(1, ka + 1)
    q1 = {t: q1_term(config, t, v, options.kernel) for t in ts} if options.use_q1 else {}
    skipped = set()
    if options.use_q1 and options.use_q2:
        floor = options.q2_skip_rel * config.eps_target / ka
        skipped = {t for t in ts if t / ka * math.exp(q1[t].log_q1) <= floor}
    q2 = {}
    need = [t for t in ts if t not in skipped] if options.use_q2 else []
    if need:
        if pool is None:
            pool = options.pool()
        q2 = pool.q2(config, need, options.q2_variant)
    terms = []
    for t in ts:
        a, log_comp = _log_binomials(ka, config.k, t)
        r1 = q1.get(t)
        r2 = q2.get(t)
        terms.append(
            TermBreakdown(
                t=t,
                log_q1=r1.log_q1 if r1 else None,
                log_q2=r2.log_q2 if r2 else None,
                rho0=r1.rho0 if r1 else None,
                rho1=r1.rho1 if r1 else None,
                psi=r2.psi if r2 else None,
                R1=log_comp / (config.n * t),
                R2=a / config.n,
                mc_samples=r2.samples if r2 else 0,
                mc_halfwidth=r2.mc_halfwidth if r2 else None,
                exact=(pool.estimator(ka, config.n).is_exact(t) if r2 else None),
                q2_skipped=t in skipped,
            )
        )
    total = math.fsum([term.contribution(ka) for term in terms] + [math.exp(min(log_q0, 0.0))])
    return BoundBreakdown(
        config=config,
        v_star=v,
        log_q0=log_q0,
        per_t=tuple(terms),
        eps_total=min(total, 1.0),
        options=options,
        label=label,
    )


def baseline_epsilon_bound(
    config: SystemConfig, options: BoundOptions = BoundOptions(), pool: EstimatorPool | None = None
) -> BoundBreakdown:
    """Same assembly with the no-denoiser pairwise kernel (1 + tP'/2)^(-n/2)."""
    return epsilon_bound(config, 1.0, replace(options, kernel="baseline"), pool=pool, label=BaselineLabel)


# -- required Eb/N0 -------------------------------------------------------------


def required_ebn0(
    ka: int,
    n: int,
    k: int,
    target_eps: float,
    constants: DenoiserConstants | float = 1.0,
    options: BoundOptions = BoundOptions(),
    lo_db: float = -2.0,
    hi_db: float = 20.0,
    tol_db: float = 0.01,
    ratios=DEFAULT_RATIOS,
    pool: EstimatorPool | None = None,
    label: str = "theorem1",
) -> tuple[float, BoundBreakdown]:
    """Smallest Eb/N0 on the grid lo_db + j*tol_db with min over P'/P of eps <= target.

    Bisection assumes eps is non-increasing in power (true for q0 and q1;
    q2 uses common random numbers).  Returns ``(ebn0_db, witness)`` where the
    witness is the best P' at the returned point.
    """
    if not 0 < target_eps <= 1:
        raise ValueError("target_eps must lie in (0, 1]")
    if hi_db <= lo_db or tol_db <= 0:
        raise ValueError("need lo_db < hi_db and tol_db > 0")
    ratios = sorted(ratios, reverse=True)
    if not ratios or ratios[0] >= 1 or ratios[-1] <= 0:
        raise ValueError("P'/P ratios must lie in (0, 1)")
    eps_cfg = min(target_eps, 0.999999)
    if pool is None:
        pool = options.pool()
    p_lo, p_hi = ebn0_db_to_power(lo_db, n, k), ebn0_db_to_power(hi_db, n, k)
    pool.set_range(ka, n, ratios[-1] * p_lo, ratios[0] * p_hi)
    steps = int(math.ceil((hi_db - lo_db) / tol_db - 1e-9))

    def db_at(j):
        return hi_db if j >= steps else round(lo_db + j * tol_db, 9)

    def bound_at(db, ratio):
        p = ebn0_db_to_power(db, n, k)
        cfg = SystemConfig(ka=ka, n=n, k=k, p=p, p_prime=ratio * p, eps_target=eps_cfg)
        return epsilon_bound(cfg, constants, options, pool=pool, label=label)

    memo: dict[int, tuple[bool, float]] = {}

    def feasible(j):
        if j not in memo:
            db = db_at(j)
            best = math.inf
            ok = False
            for ratio in ratios:
                p = ebn0_db_to_power(db, n, k)
                cfg = SystemConfig(ka=ka, n=n, k=k, p=p, p_prime=ratio * p, eps_target=eps_cfg)
                if math.exp(min(q0_term(cfg), 0.0)) > target_eps:
                    continue
                eps = bound_at(db, ratio).eps_total
                best = min(best, eps)
                if eps <= target_eps:
                    ok = True
                    break
            memo[j] = (ok, best)
        return memo[j]

    def witness(j):
        db = db_at(j)
        cands = [(bound_at(db, r), r) for r in ratios]
        best, ratio = min(cands, key=lambda c: c[0].eps_total)
        return db, replace(best, extras={"ebn0_db": db, "best_p_prime_ratio": ratio})

    if feasible(0)[0]:
        return witness(0)
    if not feasible(steps)[0]:

        def full(j):
            return min(bound_at(db_at(j), r).eps_total for r in ratios)

        raise BracketError(lo_db, hi_db, full(0), full(steps), target_eps)
    lo, hi = 0, steps
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if feasible(mid)[0]:
            hi = mid
        else:
            lo = mid
    return witness(hi)
