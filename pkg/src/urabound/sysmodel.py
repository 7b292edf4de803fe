"""System configuration, Eb/N0 conversions and the Gaussian MAC sampler.

Eb/N0 convention used everywhere in this package::

    Eb/N0 = n * P / (2 * k)

i.e. real-channel energy per information bit with unit noise variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

# Rows drawn per seeded block; fixed so results never depend on worker count.
SAMPLE_BLOCK = 256


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SystemConfig:
    """Channel and code parameters.

    ``M = 2**k`` is never materialized as a float; use :attr:`m` (exact int)
    or :attr:`log_m`.
    """

    ka: int
    n: int
    k: int
    p: float
    p_prime: float
    eps_target: float = 1e-3

    def __post_init__(self):
        if self.ka < 1:
            raise ConfigError(f"ka must be >= 1, got {self.ka}")
        if self.n < 1 or self.k < 1:
            raise ConfigError(f"n and k must be >= 1, got n={self.n}, k={self.k}")
        if not 0 < self.p_prime < self.p:
            raise ConfigError(f"need 0 < p_prime < p, got p_prime={self.p_prime}, p={self.p}")
        if not 0 < self.eps_target < 1:
            raise ConfigError(f"eps_target must be in (0, 1), got {self.eps_target}")

    @property
    def m(self) -> int:
        return 2**self.k

    @property
    def log_m(self) -> float:
        return self.k * math.log(2.0)

    @property
    def competitors(self) -> int:
        """Number of codewords not sent by anyone, M - K_a (may be 0 in toy configs)."""
        return max(self.m - self.ka, 0)

    @property
    def output_variance(self) -> float:
        """Per-dimension variance of y under the random-coding ensemble."""
        return 1.0 + self.ka * self.p_prime

    @property
    def ebn0_db(self) -> float:
        return power_to_ebn0_db(self.p, self.n, self.k)

    def with_power(self, p: float, ratio: float) -> "SystemConfig":
        return replace(self, p=p, p_prime=ratio * p)

    @classmethod
    def from_ebn0(cls, ka, n, k, ebn0_db, ratio=0.9, eps_target=1e-3) -> "SystemConfig":
        p = ebn0_db_to_power(ebn0_db, n, k)
        return cls(ka=ka, n=n, k=k, p=p, p_prime=ratio * p, eps_target=eps_target)


def ebn0_db_to_power(ebn0_db: float, n: int, k: int) -> float:
    if n < 1 or k < 1:
        raise ConfigError("n and k must be >= 1")
    return 2.0 * k / n * 10.0 ** (ebn0_db / 10.0)


def power_to_ebn0_db(p: float, n: int, k: int) -> float:
    if n < 1 or k < 1:
        raise ConfigError("n and k must be >= 1")
    if p <= 0:
        raise ConfigError(f"power must be positive, got {p}")
    return 10.0 * math.log10(n * p / (2.0 * k))


def block_rng(seed: int, *stream: int) -> np.random.Generator:
    """Generator for one seeded block; ``stream`` mixes in block/stream indices."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, *stream])))


@dataclass(frozen=True)
class ChannelSample:
    codewords: np.ndarray  # (ka, n)
    noise: np.ndarray  # (n,)
    y: np.ndarray  # (n,)
    seed: int

    def sum_codeword(self, idx=None) -> np.ndarray:
        """c(S) for an index set S (all users when ``idx`` is None)."""
        if idx is None:
            return self.codewords.sum(axis=0)
        return self.codewords[list(idx)].sum(axis=0)


def sample_channel_output(config: SystemConfig, seed: int, ka: int | None = None) -> ChannelSample:
    """One draw of y = sum_i c_i + Z with c_i ~ N(0, P' I_n), Z ~ N(0, I_n).

    Codewords are never truncated to the power ball; that event is charged
    analytically to q0. ``ka`` overrides the active-user count (0 allowed,
    for testing the noise-only channel).
    """
    users = config.ka if ka is None else ka
    if users < 0:
        raise ConfigError("ka override must be >= 0")
    rng = block_rng(seed, 0)
    codewords = rng.standard_normal((users, config.n)) * math.sqrt(config.p_prime)
    noise = rng.standard_normal(config.n)
    y = codewords.sum(axis=0) + noise
    return ChannelSample(codewords=codewords, noise=noise, y=y, seed=seed)


def sample_y_marginal(config: SystemConfig, count: int, seed: int, dims: int | None = None) -> np.ndarray:
    """``count`` i.i.d. draws of y ~ N(0, (1 + K_a P') I_n), shape (count, n).

    ``dims`` restricts the draw to the first ``dims`` coordinates; since the
    coordinates are i.i.d. this is exactly the marginal of those coordinates.
    """
    if count < 1:
        raise ConfigError("count must be >= 1")
    width = config.n if dims is None else dims
    sd = math.sqrt(config.output_variance)
    out = np.empty((count, width))
    for block, start in enumerate(range(0, count, SAMPLE_BLOCK)):
        stop = min(start + SAMPLE_BLOCK, count)
        out[start:stop] = block_rng(seed, 1, block).standard_normal((stop - start, width))
    out *= sd
    return out
