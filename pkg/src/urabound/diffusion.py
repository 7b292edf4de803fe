"""Discrete-time diffusion pieces: schedule, forward corruption, score heads.

The channel output is identified with the diffusion state at a single level
``l*``.  With clean-signal power S = K_a P' and unit channel noise, the
normalized output ``y / sqrt(1 + S)`` has exactly the law of
``sqrt(abar) x0 + sqrt(1 - abar) eps`` for unit-variance ``x0`` when
``abar = S / (1 + S)`` (see :func:`matched_schedule`).  Under that matching
the learned score maps back to the channel-output score and the one-step
denoiser ``D(y) = y + s(y)`` is Tweedie's rule at unit noise variance.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .sysmodel import block_rng

KINDS = ("analytic", "zero", "linear", "mlp")
# kinds whose score is fixed in closed form rather than fitted
CLOSED_FORM_KINDS = ("analytic", "zero")
DEFAULT_LR = {"linear": 0.05, "mlp": 0.01}
CHECKPOINT_FORMAT = "urabound-score/1"


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class DiffusionSchedule:
    """Variance schedule; ``alpha_bars[0] == 1`` and ``alpha_bars[l]`` for l = 1..T."""

    betas: np.ndarray
    alpha_bars: np.ndarray
    l_star: int

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, level: int) -> float:
        if not 0 <= level <= self.T:
            raise ValueError(f"level {level} outside [0, {self.T}]")
        return float(self.alpha_bars[level])


def build_schedule(T: int, beta: float | tuple[float, float] = 0.02, l_star: int | None = None) -> DiffusionSchedule:
    """Constant schedule (``beta`` a float) or linear ``(beta_1, beta_T)``."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if isinstance(beta, tuple):
        betas = np.linspace(beta[0], beta[1], T)
    else:
        betas = np.full(T, float(beta))
    if np.any(betas <= 0) or np.any(betas >= 1):
        raise ValueError("every beta must lie in (0, 1)")
    alpha_bars = np.empty(T + 1)
    alpha_bars[0] = 1.0
    for level in range(1, T + 1):
        alpha_bars[level] = (1.0 - betas[level - 1]) * alpha_bars[level - 1]
    l_star = T if l_star is None else l_star
    if not 1 <= l_star <= T:
        raise ValueError(f"l_star {l_star} outside [1, {T}]")
    return DiffusionSchedule(betas=betas, alpha_bars=alpha_bars, l_star=l_star)


def matched_schedule(signal_power: float, T: int = 100) -> DiffusionSchedule:
    """Constant-beta schedule whose final level has abar = S / (1 + S)."""
    if signal_power <= 0:
        raise ValueError("signal_power must be positive")
    target = signal_power / (1.0 + signal_power)
    beta = 1.0 - target ** (1.0 / T)
    return build_schedule(T, beta, l_star=T)


def forward_sample(x0: np.ndarray, level: int, sched: DiffusionSchedule, seed: int):
    """Draw ``(x_l, eps)`` with ``x_l = sqrt(abar_l) x0 + sqrt(1 - abar_l) eps``."""
    if not 1 <= level <= sched.T:
        raise ValueError(f"level {level} outside [1, {sched.T}]")
    x0 = np.asarray(x0, dtype=float)
    eps = block_rng(seed, 2).standard_normal(x0.shape)
    ab = sched.alpha_bar(level)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps, eps


def analytic_gaussian_score(y: np.ndarray, sigma2: float) -> np.ndarray:
    """Score of N(0, sigma2 I): ``-y / sigma2``."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be positive")
    return (-1.0 / sigma2) * np.asarray(y, dtype=float)


@dataclass
class ScoreModel:
    """Score head s_theta(y) at the working level l*.

    ``params`` layout per kind:

    * analytic: empty; the score is ``-y / sigma2``.
    * zero: empty; the score is identically zero.
    * linear: ``[a, b_1..b_n]`` with ``s(y) = a*y + b`` in channel-output units.
    * mlp: ``[w(H), c(H), v(H), d]``, a noise predictor shared by every
      coordinate, ``eps(x) = v . tanh(w x + c) + d`` on ``x = y / data_scale``.
    """

    kind: str
    n: int
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))
    l_star: int = 1
    alpha_bar: float = 0.0
    data_scale: float = 1.0
    sigma2: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown score model kind {self.kind!r}")
        self.params = np.asarray(self.params, dtype=float)
        if self.kind == "analytic" and not (self.sigma2 and self.sigma2 > 0):
            raise ValueError("analytic model needs sigma2 > 0")
        if self.kind == "linear" and self.params.shape != (self.n + 1,):
            raise ValueError(f"linear model needs {self.n + 1} params, got {self.params.shape}")
        if self.kind == "mlp" and (self.params.size - 1) % 3:
            raise ValueError("mlp params must have length 3H + 1")

    @property
    def hidden(self) -> int:
        return (self.params.size - 1) // 3 if self.kind == "mlp" else 0

    def _mlp_parts(self):
        h = self.hidden
        p = self.params
        return p[:h], p[h : 2 * h], p[2 * h : 3 * h], p[3 * h]

    def score(self, y: np.ndarray) -> np.ndarray:
        """Evaluate s_theta on one vector (n,) or a batch (N, n)."""
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.n:
            raise ValueError(f"model dimension {self.n} does not match input length {y.shape[-1]}")
        if self.kind == "analytic":
            return analytic_gaussian_score(y, self.sigma2)
        if self.kind == "zero":
            return np.zeros_like(y)
        if self.kind == "linear":
            return self.params[0] * y + self.params[1:]
        w, c, v, d = self._mlp_parts()
        x = y / self.data_scale
        eps_hat = np.tanh(x[..., None] * w + c) @ v + d
        return -eps_hat / (math.sqrt(1.0 - self.alpha_bar) * self.data_scale)

    __call__ = score

    def to_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "kind": self.kind,
            "n": self.n,
            "l_star": self.l_star,
            "alpha_bar_lstar": self.alpha_bar,
            "data_scale": self.data_scale,
            "sigma2": self.sigma2,
            "params": self.params.tolist(),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ScoreModel":
        return cls(
            kind=doc["kind"],
            n=int(doc["n"]),
            params=np.asarray(doc["params"], dtype=float),
            l_star=int(doc["l_star"]),
            alpha_bar=float(doc["alpha_bar_lstar"]),
            data_scale=float(doc.get("data_scale", 1.0)),
            sigma2=doc.get("sigma2"),
            seed=int(doc.get("seed", 0)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ScoreModel":
        return cls.from_dict(json.loads(text))

    def checksum(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def analytic_model(sigma2: float, n: int) -> ScoreModel:
    return ScoreModel(kind="analytic", n=n, sigma2=sigma2)


def zero_model(n: int) -> ScoreModel:
    return ScoreModel(kind="zero", n=n)


def linear_model(slope: float, bias: np.ndarray | float, n: int) -> ScoreModel:
    b = np.broadcast_to(np.asarray(bias, dtype=float), (n,))
    return ScoreModel(kind="linear", n=n, params=np.concatenate([[slope], b]))


def denoise(model: ScoreModel, y: np.ndarray) -> np.ndarray:
    """One-step Tweedie denoiser at unit noise variance: ``D(y) = y + s(y)``."""
    y = np.asarray(y, dtype=float)
    return y + model.score(y)


@dataclass(frozen=True)
class TrainHyper:
    epochs: int = 20
    lr: float | None = None  # per-kind default, see DEFAULT_LR
    batch: int = 256
    seed: int = 0
    hidden: int = 64
    decay: float = 0.2


@dataclass
class TrainReport:
    final_loss: float
    loss_trace: list[float]
    sample_count: int
    seed: int
    smoothed_monotone: bool = True

    def to_dict(self) -> dict:
        return {
            "final_loss": self.final_loss,
            "loss_trace": list(self.loss_trace),
            "sample_count": self.sample_count,
            "seed": self.seed,
            "smoothed_monotone": self.smoothed_monotone,
        }


def noise_prediction_loss(eps: np.ndarray, eps_hat: np.ndarray) -> float:
    """Per-coordinate mean of ``||eps - eps_hat||^2``."""
    return float(np.mean((np.asarray(eps) - np.asarray(eps_hat)) ** 2))


def _smoothed_monotone(trace: Sequence[float], window: int = 10, slack: float = 0.01) -> bool:
    """Flag (never fail) a loss trace whose moving average climbs above its running minimum."""
    w = min(window, len(trace))
    smooth = np.convolve(trace, np.ones(w) / w, mode="valid")
    running_min = np.minimum.accumulate(smooth)
    return bool(np.all(smooth <= running_min * (1.0 + slack)))


def train_score(
    kind: str,
    samples: np.ndarray,
    sched: DiffusionSchedule,
    l_star: int | None = None,
    hyper: TrainHyper = TrainHyper(),
    data_scale: float = 1.0,
) -> tuple[ScoreModel, TrainReport]:
    """Fit a score head by minimizing E||eps - eps_theta(x_l*)||^2 with SGD.

    ``samples`` are clean draws (N, n); they are divided by ``data_scale``
    and corrupted to level ``l_star`` with fresh noise every epoch.  The
    returned parameters are the average of the iterates over the second half
    of training.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise TrainingError("need at least 2 training samples of shape (N, n)")
    if kind not in ("linear", "mlp"):
        raise TrainingError(f"cannot train a {kind!r} score head")
    base_lr = DEFAULT_LR[kind] if hyper.lr is None else hyper.lr
    if hyper.epochs < 1 or base_lr <= 0 or hyper.batch < 1:
        raise TrainingError("epochs, lr and batch must be positive")
    level = sched.l_star if l_star is None else l_star
    ab = sched.alpha_bar(level)
    if not 0 < ab < 1:
        raise TrainingError("abar at l* must lie strictly inside (0, 1)")
    sa, sb = math.sqrt(ab), math.sqrt(1.0 - ab)
    x0 = samples / data_scale
    count, n = x0.shape

    init_rng = block_rng(hyper.seed, 3)
    if kind == "linear":
        theta = np.zeros(n + 1)
        grad_fn = _linear_grad
    else:
        h = hyper.hidden
        theta = np.concatenate(
            [init_rng.standard_normal(h), 0.5 * init_rng.standard_normal(h), np.zeros(h), [0.0]]
        )
        grad_fn = _mlp_grad

    avg = np.zeros_like(theta)
    avg_count = 0
    trace = []
    for epoch in range(hyper.epochs):
        lr = base_lr / (1.0 + hyper.decay * epoch)
        order = block_rng(hyper.seed, 4, epoch).permutation(count)
        total, seen = 0.0, 0
        for step, start in enumerate(range(0, count, hyper.batch)):
            idx = order[start : start + hyper.batch]
            eps = block_rng(hyper.seed, 5, epoch, step).standard_normal((len(idx), n))
            xl = sa * x0[idx] + sb * eps
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grad = grad_fn(theta, xl, eps)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            theta -= lr * grad
            total += loss * len(idx)
            seen += len(idx)
            if 2 * epoch >= hyper.epochs - 1:
                avg += theta
                avg_count += 1
        trace.append(total / seen)
    theta = avg / avg_count

    if kind == "linear":
        # eps_hat = w x + u on x = y / scale  ->  s(y) = -(w y / scale + u) / (sb * scale)
        w, u = theta[0], theta[1:]
        params = np.concatenate([[-w / (sb * data_scale**2)], -u / (sb * data_scale)])
    else:
        params = theta
    model = ScoreModel(
        kind=kind, n=n, params=params, l_star=level, alpha_bar=ab, data_scale=data_scale, seed=hyper.seed
    )
    report = TrainReport(
        final_loss=trace[-1],
        loss_trace=trace,
        sample_count=count,
        seed=hyper.seed,
        smoothed_monotone=_smoothed_monotone(trace),
    )
    return model, report


def _linear_grad(theta, xl, eps):
    # shared slope w, per-coordinate bias u; each group is averaged over the
    # entries it touches
    w, u = theta[0], theta[1:]
    r = w * xl + u - eps
    grad = np.empty_like(theta)
    grad[0] = 2.0 * np.mean(r * xl)
    grad[1:] = 2.0 * r.mean(axis=0)
    return float(np.mean(r * r)), grad


def _mlp_grad(theta, xl, eps):
    h = (theta.size - 1) // 3
    w, c, v, d = theta[:h], theta[h : 2 * h], theta[2 * h : 3 * h], theta[3 * h]
    x = xl.reshape(-1, 1)
    target = eps.reshape(-1)
    act = np.tanh(x * w + c)
    r = act @ v + d - target
    m = r.size
    dact = (r[:, None] * v) * (1.0 - act * act)
    grad = np.concatenate(
        [
            2.0 * (dact * x).sum(axis=0) / m,
            2.0 * dact.sum(axis=0) / m,
            2.0 * (r @ act) / m,
            [2.0 * r.mean()],
        ]
    )
    return float(np.mean(r * r)), grad


def gaussian_eps_fn(data_var: float, sched: DiffusionSchedule) -> Callable[[np.ndarray, int], np.ndarray]:
    """Exact noise predictor at every level for N(0, data_var I) clean data."""

    def eps_fn(x, level):
        ab = sched.alpha_bar(level)
        return math.sqrt(1.0 - ab) * x / (ab * data_var + 1.0 - ab)

    return eps_fn


def ancestral_sample(
    eps_fn: Callable[[np.ndarray, int], np.ndarray],
    sched: DiffusionSchedule,
    x_start: np.ndarray,
    seed: int,
    start_level: int | None = None,
) -> np.ndarray:
    """Multi-step reverse sampler from ``start_level`` down to level 0.

    Optional machinery; the bound pipeline only ever uses the one-step
    denoiser at l*.
    """
    level = sched.T if start_level is None else start_level
    x = np.array(x_start, dtype=float)
    for step, l in enumerate(range(level, 0, -1)):
        beta = sched.betas[l - 1]
        ab = sched.alpha_bar(l)
        mean = (x - beta / math.sqrt(1.0 - ab) * eps_fn(x, l)) / math.sqrt(1.0 - beta)
        if l > 1:
            # posterior variance of the Gaussian reverse kernel
            var = beta * (1.0 - sched.alpha_bar(l - 1)) / (1.0 - ab)
            mean = mean + math.sqrt(var) * block_rng(seed, 6, step).standard_normal(x.shape)
        x = mean
    return x


def training_samples(config, count: int, seed: int, dims: int | None = None) -> tuple[np.ndarray, float]:
    """Channel-output draws for training plus the matching ``data_scale``."""
    from .sysmodel import sample_y_marginal

    ys = sample_y_marginal(config, count, seed, dims=dims)
    return ys, math.sqrt(config.output_variance)


__all__ = [
    "DiffusionSchedule",
    "ScoreModel",
    "TrainHyper",
    "TrainReport",
    "TrainingError",
    "analytic_gaussian_score",
    "analytic_model",
    "ancestral_sample",
    "build_schedule",
    "denoise",
    "forward_sample",
    "gaussian_eps_fn",
    "linear_model",
    "matched_schedule",
    "noise_prediction_loss",
    "train_score",
    "training_samples",
]
