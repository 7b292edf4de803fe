"""Empirical denoiser constants J*, K_E and v* = 1 + J* + K_E**2.

Both constants are top eigenvalues of n x n sample second-moment matrices.
n can be 30000, so the matrices are never formed: power iteration only needs
``v -> (1/N) sum_k r_k (r_k . v)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .diffusion import CLOSED_FORM_KINDS, ScoreModel, denoise
from .sysmodel import SAMPLE_BLOCK, SystemConfig, block_rng, sample_y_marginal

DEFAULT_POWER_ITERS = 100


def moment_matvec(rows: np.ndarray, center: bool = False, chunk: int = SAMPLE_BLOCK) -> Callable[[np.ndarray], np.ndarray]:
    """Matrix-free product with ``(1/N) sum_k r_k r_k^T`` (optionally mean-centered rows).

    The sum runs over fixed-size chunks in a fixed order, so the result does
    not depend on how the chunks would be distributed over workers.
    """
    rows = np.asarray(rows, dtype=float)
    if center:
        rows = rows - rows.mean(axis=0)
    count = rows.shape[0]

    def matvec(v):
        acc = np.zeros(rows.shape[1])
        for start in range(0, count, chunk):
            block = rows[start : start + chunk]
            acc += block.T @ (block @ v)
        return acc / count

    return matvec


def top_eigenvalue(
    matvec: Callable[[np.ndarray], np.ndarray],
    dim: int,
    iters: int = DEFAULT_POWER_ITERS,
    seed: int = 0,
    tol: float = 1e-9,
) -> tuple[float, np.ndarray]:
    """Largest eigenvalue of a PSD operator by power iteration.

    Stops when successive Rayleigh quotients agree to ``tol`` (relative) or
    after ``iters`` products.  A zero operator yields ``(0.0, v0)``.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    v = block_rng(seed, 7).standard_normal(dim)
    v /= np.linalg.norm(v)
    lam_prev = None
    lam = 0.0
    for _ in range(iters):
        w = matvec(v)
        lam = float(v @ w)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        v = w / norm
        if lam_prev is not None and abs(lam - lam_prev) <= tol * abs(lam):
            break
        lam_prev = lam
    return max(lam, 0.0), v


def v_star(j_star: float, k_e: float) -> float:
    if j_star < 0 or k_e < 0:
        raise ValueError(f"J* and K_E must be nonnegative, got {j_star}, {k_e}")
    return 1.0 + j_star + k_e * k_e


@dataclass(frozen=True)
class DenoiserConstants:
    j_star: float
    k_e: float
    v_star: float
    n_samples: int = 0
    power_iters: int = DEFAULT_POWER_ITERS
    seed: int = 0
    model_checksum: str = ""
    reference: str = "self"
    ke_convention: str = "sqrt"

    @classmethod
    def ideal(cls) -> "DenoiserConstants":
        """v* = 1: a denoiser with no score energy and no mismatch."""
        return cls(j_star=0.0, k_e=0.0, v_star=1.0)

    @classmethod
    def from_values(cls, j_star: float, k_e: float, **meta) -> "DenoiserConstants":
        return cls(j_star=j_star, k_e=k_e, v_star=v_star(j_star, k_e), **meta)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "DenoiserConstants":
        fields = cls.__dataclass_fields__
        return cls(**{k: v for k, v in doc.items() if k in fields})


def _restrict(model: ScoreModel, dims: int | None) -> ScoreModel:
    # coordinates are i.i.d., so the first ``dims`` of them carry the same law
    if dims is None or dims == model.n:
        return model
    if dims > model.n:
        raise ValueError(f"dims={dims} exceeds model dimension {model.n}")
    params = model.params[: dims + 1] if model.kind == "linear" else model.params
    return ScoreModel(
        kind=model.kind,
        n=dims,
        params=params,
        l_star=model.l_star,
        alpha_bar=model.alpha_bar,
        data_scale=model.data_scale,
        sigma2=model.sigma2,
        seed=model.seed,
    )


def _draws(model, config, N, seed, dims):
    if N < 2:
        raise ValueError("need N >= 2 samples")
    if model.n != config.n:
        raise ValueError(f"model dimension {model.n} does not match config n={config.n}")
    sub = _restrict(model, dims)
    return sub, sample_y_marginal(config, N, seed, dims=sub.n)


def estimate_J(
    model: ScoreModel,
    config: SystemConfig,
    N: int,
    iters: int = DEFAULT_POWER_ITERS,
    seed: int = 0,
    dims: int | None = None,
    chunk: int = SAMPLE_BLOCK,
) -> float:
    """J* = top eigenvalue of the uncentered score second moment (1/N) sum s s^T."""
    sub, ys = _draws(model, config, N, seed, dims)
    scores = sub.score(ys)
    lam, _ = top_eigenvalue(moment_matvec(scores, chunk=chunk), sub.n, iters, seed)
    return lam


def mismatch_residuals(
    model: ScoreModel,
    ys: np.ndarray,
    denoiser: Callable[[np.ndarray], np.ndarray] | None = None,
    reference: Callable[[np.ndarray], np.ndarray] | None = None,
) -> np.ndarray:
    """E(y) = D(y) - (y + s_ref(y)); defaults use the model for both D and s_ref."""
    d = denoise(model, ys) if denoiser is None else denoiser(ys)
    s = model.score(ys) if reference is None else reference(ys)
    return d - (ys + s)


def estimate_K_E(
    model: ScoreModel,
    config: SystemConfig,
    N: int,
    iters: int = DEFAULT_POWER_ITERS,
    seed: int = 0,
    denoiser: Callable[[np.ndarray], np.ndarray] | None = None,
    reference: str | Callable[[np.ndarray], np.ndarray] = "self",
    convention: str = "sqrt",
    dims: int | None = None,
    chunk: int = SAMPLE_BLOCK,
) -> float:
    """Scalar K_E from the top eigenvalue of the centered mismatch covariance.

    ``reference`` picks the score the denoiser is compared against: "self"
    (the model's own s_theta), "analytic" (the exact channel-output score
    -y / (1 + K_a P')), "auto" (self for closed-form models, analytic for
    trained ones), or any callable.  ``convention="sqrt"`` returns
    sqrt(lambda_max) so that K_E**2 is a variance; "eig" returns lambda_max.
    """
    if convention not in ("sqrt", "eig"):
        raise ValueError(f"unknown K_E convention {convention!r}")
    sub, ys = _draws(model, config, N, seed, dims)
    if reference == "auto":
        reference = "self" if model.kind in CLOSED_FORM_KINDS else "analytic"
    if reference == "self":
        ref = None
    elif reference == "analytic":
        sigma2 = config.output_variance
        ref = lambda y: (-1.0 / sigma2) * y  # noqa: E731
    elif callable(reference):
        ref = reference
    else:
        raise ValueError(f"unknown residual reference {reference!r}")
    resid = mismatch_residuals(sub, ys, denoiser=denoiser, reference=ref)
    lam, _ = top_eigenvalue(moment_matvec(resid, center=True, chunk=chunk), sub.n, iters, seed + 1)
    return math.sqrt(lam) if convention == "sqrt" else lam


def estimate_constants(
    model: ScoreModel,
    config: SystemConfig,
    N: int,
    iters: int = DEFAULT_POWER_ITERS,
    seed: int = 0,
    reference: str = "auto",
    convention: str = "sqrt",
    dims: int | None = None,
) -> DenoiserConstants:
    j = estimate_J(model, config, N, iters, seed, dims=dims)
    k = estimate_K_E(model, config, N, iters, seed, reference=reference, convention=convention, dims=dims)
    return DenoiserConstants.from_values(
        j,
        k,
        n_samples=N,
        power_iters=iters,
        seed=seed,
        model_checksum=model.checksum(),
        reference=reference,
        ke_convention=convention,
    )
