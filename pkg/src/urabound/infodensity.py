"""Information-density samples I_t and their Monte Carlo estimator.

For a t-subset S0 of the active users,

    i_t(S0) = (n/2) ln(1 + P't) + ||y - c(S0^c)||^2 / (1 + P't) - ||y - c(S0) - c(S0^c)||^2

("literal" form; the "canonical" log-likelihood ratio halves both squared
norms).  Since y - c(S0^c) = Z + c(S0) and the last norm is ||Z||^2 for every
S0, minimizing over S0 means minimizing ||Z + c(S0)||^2.

:func:`sample_information_density` works on a full n-dimensional channel
draw.  :class:`InfoDensityEstimator` draws the same law from sufficient
statistics only, which is what makes n = 30000 with hundreds of users
tractable:

* exact enumeration uses the Gram matrix of (Z, g_1..g_K), sampled with the
  Bartlett decomposition (g_i = c_i / sqrt(P'));
* the greedy heuristic uses a scalar representation: each g_i splits into
  its component along Z (standard normal) and an orthogonal part whose
  norm^2 is chi^2_{n-1} and whose direction is uniform and independent of
  everything else.  Prefix sums of the orthogonal parts are then an
  isotropic random walk, whose squared length follows a scalar recursion.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .numerics import log_binomial
from .sysmodel import SAMPLE_BLOCK, SystemConfig, block_rng, sample_channel_output

DEFAULT_SUBSET_BUDGET = 100_000
IDENS_VARIANTS = ("literal", "canonical")

# memory cap (floats) for one Gram block
_GRAM_BLOCK_FLOATS = 4_000_000
_N_PROBES = 12
# relative slack so rounding never drops the true minimizer from the kept set
_SLACK = 1e-9


def log_term(n: int, p_prime: float, t: int) -> float:
    return 0.5 * n * math.log1p(p_prime * t)


def info_density_value(n, p_prime, t, quad1, quad2, idens="literal"):
    """i_t from its two squared norms (works elementwise on arrays)."""
    if idens == "literal":
        return log_term(n, p_prime, t) + quad1 / (1.0 + p_prime * t) - quad2
    if idens == "canonical":
        return log_term(n, p_prime, t) + 0.5 * (quad1 / (1.0 + p_prime * t) - quad2)
    raise ValueError(f"unknown information-density variant {idens!r}")


def use_exact(ka: int, t: int, subset_budget: int) -> bool:
    return log_binomial(ka, t) <= math.log(subset_budget) + 1e-9


@dataclass(frozen=True)
class InfoDensitySample:
    i_t: float
    t: int
    log_term: float
    quad1: float
    quad2: float
    subset: tuple
    exact: bool
    seed: int


def subset_terms(sample, subsets, p_prime: float, t: int) -> dict:
    """Per-subset (log_term, quad1, quad2) computed literally from the vectors."""
    cw = sample.codewords
    everyone = set(range(cw.shape[0]))
    quad1, quad2 = [], []
    for s0 in subsets:
        rest = sorted(everyone - set(s0))
        c_s0 = cw[list(s0)].sum(axis=0)
        c_rest = cw[rest].sum(axis=0) if rest else np.zeros(cw.shape[1])
        quad1.append(float(np.sum((sample.y - c_rest) ** 2)))
        quad2.append(float(np.sum((sample.y - c_s0 - c_rest) ** 2)))
    return {
        "log_term": log_term(cw.shape[1], p_prime, t),
        "quad1": np.array(quad1),
        "quad2": np.array(quad2),
    }


def greedy_subset(noise: np.ndarray, codewords: np.ndarray, t: int) -> tuple:
    """The t users with the smallest marginal score ||Z + c_i||^2 - ||Z||^2."""
    scores = 2.0 * codewords @ noise + np.einsum("ij,ij->i", codewords, codewords)
    return tuple(sorted(np.argsort(scores, kind="stable")[:t].tolist()))


def sample_information_density(
    config: SystemConfig,
    t: int,
    seed: int,
    subset_budget: int = DEFAULT_SUBSET_BUDGET,
    idens: str = "literal",
    force_greedy: bool = False,
) -> InfoDensitySample:
    """One draw of I_t = min over |S0| = t of i_t(S0) from a full channel sample."""
    if not 1 <= t <= config.ka:
        raise ValueError(f"t={t} outside [1, {config.ka}]")
    sample = sample_channel_output(config, seed)
    exact = use_exact(config.ka, t, subset_budget) and not force_greedy
    if exact:
        subsets = list(itertools.combinations(range(config.ka), t))
    else:
        subsets = [greedy_subset(sample.noise, sample.codewords, t)]
    terms = subset_terms(sample, subsets, config.p_prime, t)
    values = info_density_value(config.n, config.p_prime, t, terms["quad1"], terms["quad2"], idens)
    best = int(np.argmin(values))
    return InfoDensitySample(
        i_t=float(values[best]),
        t=t,
        log_term=terms["log_term"],
        quad1=float(terms["quad1"][best]),
        quad2=float(terms["quad2"][best]),
        subset=subsets[best],
        exact=exact,
        seed=seed,
    )


def _gram_block(rng, ka: int, n: int, count: int):
    """Gram data of (Z, g_1..g_K) for ``count`` independent draws.

    Returns ||Z||^2 (B,), Z.g_i (B, K) and G_ij = g_i.g_j (B, K, K).
    """
    if n > ka:
        # Bartlett: rows of a lower-triangular L with L L^T ~ Wishart(n, I)
        dim = ka + 1
        low = np.tril(rng.standard_normal((count, dim, dim)), -1)
        diag = np.sqrt(rng.chisquare(n - np.arange(dim), size=(count, dim)))
        low[:, np.arange(dim), np.arange(dim)] = diag
        z = low[:, 0, :]
        g = low[:, 1:, :]
    else:
        z = rng.standard_normal((count, n))
        g = rng.standard_normal((count, ka, n))
    znorm2 = np.einsum("bd,bd->b", z, z)
    zg = np.matmul(g, z[:, :, None])[:, :, 0]
    gram = np.matmul(g, g.transpose(0, 2, 1))
    return znorm2, zg, gram


def _extension_plan(ka: int, size: int):
    """How each (size)-subset (lexicographic) extends a (size - 1)-subset.

    Returns the parent index, the new element j and the flat Gram indices
    i * ka + j for every i in the parent.
    """
    if size == 1:
        return np.zeros(ka, dtype=np.intp), np.arange(ka, dtype=np.intp), np.zeros((ka, 0), dtype=np.intp)
    prev = np.array(list(itertools.combinations(range(ka), size - 1)), dtype=np.intp)
    last = prev[:, -1]
    counts = ka - 1 - last
    parent = np.repeat(np.arange(prev.shape[0]), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    new = (np.arange(parent.size) - np.repeat(starts, counts) + last[parent] + 1).astype(np.intp)
    flat = prev[parent] * ka + new[:, None]
    return parent, new, flat


def _level_lines(zg, gram, ka: int, sizes: set[int], plans: dict):
    """Intercepts 2 Z.g(S) and slopes ||g(S)||^2 for all subsets of each
    requested size and of the complementary size ka - size.

    Subset sums are grown one element at a time: for S' + {j},
    ||g(S')+g_j||^2 = ||g(S')||^2 + G_jj + 2 sum_{i in S'} G_ij.
    """
    out = {}
    count = zg.shape[0]
    diag = np.einsum("bii->bi", gram)
    row = gram.sum(axis=2)
    flat_gram = gram.reshape(count, ka * ka)
    a_all, total = zg.sum(axis=1), row.sum(axis=1)
    if 0 in sizes:
        zero = np.zeros((count, 1))
        out[0] = (zero, zero)
        out[ka] = (2.0 * a_all[:, None], total[:, None])
    a = b = w = None
    for s in range(1, max(sizes) + 1):
        parent, new, flat = plans[s]
        if s == 1:
            a, b, w = zg, diag, row
        else:
            cross = np.take(flat_gram, flat[:, 0], axis=1)
            for k in range(1, flat.shape[1]):
                cross += np.take(flat_gram, flat[:, k], axis=1)
            a = np.take(a, parent, axis=1) + np.take(zg, new, axis=1)
            b = np.take(b, parent, axis=1) + np.take(diag, new, axis=1) + 2.0 * cross
            w = np.take(w, parent, axis=1) + np.take(row, new, axis=1)
        if s in sizes:
            out[s] = (2.0 * a, b)
            out[ka - s] = (2.0 * (a_all[:, None] - a), total[:, None] - 2.0 * w + b)
    return out


def _envelope_mask(a, b, probes):
    """Lines that may reach the lower envelope of a + b x between the probes."""
    count = a.shape[0]
    rows = np.arange(count)
    best_a, best_b = [], []
    mask = np.zeros(a.shape, dtype=bool)
    buf = np.empty_like(a)
    for x in probes:
        np.multiply(b, x, out=buf)
        buf += a
        arg = np.argmin(buf, axis=1)
        mask[rows, arg] = True
        best_a.append(a[rows, arg])
        best_b.append(b[rows, arg])
    ok = np.empty(a.shape, dtype=bool)
    for p in range(len(probes) - 1):
        left, right = probes[p], probes[p + 1]
        at_right = best_a[p] + best_b[p] * right
        at_left = best_a[p + 1] + best_b[p + 1] * left
        np.multiply(b, right, out=buf)
        buf += a
        np.less_equal(buf, (at_right + _SLACK * (1.0 + np.abs(at_right)))[:, None], out=ok)
        np.multiply(b, left, out=buf)
        buf += a
        ok &= buf <= (at_left + _SLACK * (1.0 + np.abs(at_left)))[:, None]
        mask |= ok
    return mask


class InfoDensityEstimator:
    """Monte Carlo draws of I_t for one (K_a, n) pair, reusable across powers.

    All randomness is in standardized codewords g_i = c_i / sqrt(P'), so a
    single estimator provides common random numbers for every P' and t.
    Draws are generated in fixed-size seeded blocks, so the output never
    depends on how the work is split.
    """

    def __init__(
        self,
        ka: int,
        n: int,
        samples: int = 10_000,
        seed: int = 0,
        subset_budget: int = DEFAULT_SUBSET_BUDGET,
        idens: str = "literal",
    ):
        if samples < 1:
            raise ValueError("samples must be >= 1")
        if idens not in IDENS_VARIANTS:
            raise ValueError(f"unknown information-density variant {idens!r}")
        self.ka, self.n, self.samples, self.seed = ka, n, samples, seed
        self.subset_budget = subset_budget
        self.idens = idens
        self._walk = None
        self._lines: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._znorm2_exact = None
        self._x_range: tuple[float, float] | None = None

    # -- exact enumeration ------------------------------------------------

    def is_exact(self, t: int) -> bool:
        return use_exact(self.ka, t, self.subset_budget)

    def _level_sizes(self, ts) -> set[int]:
        return {min(t, self.ka - t) for t in ts}

    def _max_level(self) -> int:
        top = 0
        while top < self.ka // 2 and self.is_exact(top + 1):
            top += 1
        return top

    def _gram_block_size(self) -> int:
        # depends only on (ka, budget): the block layout fixes the draws
        top = self._max_level()
        per = 2 * (self.ka + 1) * (self.ka + 1) + 12 * math.comb(self.ka, top)
        return max(1, min(SAMPLE_BLOCK, _GRAM_BLOCK_FLOATS // per))

    def set_range(self, x_lo: float, x_hi: float) -> None:
        """Declare the sqrt(P') interval queries will come from (extends only)."""
        if self._x_range is not None and self._x_range[0] <= x_lo and x_hi <= self._x_range[1]:
            return
        if self._x_range is not None:
            x_lo, x_hi = min(x_lo, self._x_range[0]), max(x_hi, self._x_range[1])
        self._x_range = (x_lo, x_hi)
        self._lines.clear()

    def _ensure_x(self, x: float) -> None:
        if self._x_range is None:
            self.set_range(x, x)
        elif not self._x_range[0] <= x <= self._x_range[1]:
            lo, hi = self._x_range
            self.set_range(min(lo, x / 1.25), max(hi, x * 1.25))

    def _build_lines(self, ts: list[int]) -> None:
        """Per draw, keep only the subsets that can attain min_S ||Z + x g(S)||^2
        somewhere in the declared x range (a superset of the lower envelope).

        Lines are built for every t sharing a subset size, so the Gram draws
        (which are fixed by the seed) are generated once per call.
        """
        x_lo, x_hi = self._x_range
        probes = np.geomspace(x_lo, x_hi, _N_PROBES) if x_hi > x_lo else np.array([x_lo])
        sizes = self._level_sizes(ts)
        plans = {s: _extension_plan(self.ka, s) for s in range(1, max(sizes) + 1)}
        wanted = sorted({s for s in sizes} | {self.ka - s for s in sizes})
        kept = {t: ([], []) for t in wanted}
        znorms = []
        block = self._gram_block_size()
        for bi, start in enumerate(range(0, self.samples, block)):
            count = min(block, self.samples - start)
            rng = block_rng(self.seed, 10, bi)
            znorm2, zg, gram = _gram_block(rng, self.ka, self.n, count)
            znorms.append(znorm2)
            lines = _level_lines(zg, gram, self.ka, sizes, plans)
            for t in wanted:
                a, b = lines[t]
                if a.shape[1] == 1:
                    kept[t][0].append(a)
                    kept[t][1].append(b)
                    continue
                if len(probes) > 2:
                    # coarse pass over the whole range, fine probes on the survivors
                    mask = _envelope_mask(a, b, probes[[0, -1]])
                    a, b = _pad(a, mask, np.inf), _pad(b, mask, 0.0)
                mask = _envelope_mask(a, b, probes)
                kept[t][0].append(_pad(a, mask, np.inf))
                kept[t][1].append(_pad(b, mask, 0.0))
        self._znorm2_exact = np.concatenate(znorms)
        for t in wanted:
            if t == 0:
                continue
            width = max(part.shape[1] for part in kept[t][0])
            self._lines[t] = (
                np.concatenate([_widen(part, width, np.inf) for part in kept[t][0]]),
                np.concatenate([_widen(part, width, 0.0) for part in kept[t][1]]),
            )

    def _exact_min_quad(self, x: float, ts: list[int]) -> dict[int, np.ndarray]:
        self._ensure_x(x)
        missing = [t for t in ts if t not in self._lines]
        if missing:
            self._build_lines(missing)
        out = {}
        for t in ts:
            a, b = self._lines[t]
            out[t] = self._znorm2_exact + x * np.min(a + b * x, axis=1)
        return out

    # -- greedy heuristic ---------------------------------------------------

    def _walk_stats(self):
        if self._walk is None:
            parts = {"znorm2": [], "z": [], "r2": [], "cos": []}
            for bi, start in enumerate(range(0, self.samples, SAMPLE_BLOCK)):
                count = min(SAMPLE_BLOCK, self.samples - start)
                rng = block_rng(self.seed, 11, bi)
                parts["znorm2"].append(rng.chisquare(self.n, size=count))
                parts["z"].append(rng.standard_normal((count, self.ka)))
                parts["r2"].append(_chisquare(rng, self.n - 1, (count, self.ka)))
                head = rng.standard_normal((count, self.ka))
                tail = _chisquare(rng, self.n - 2, (count, self.ka))
                with np.errstate(invalid="ignore", divide="ignore"):
                    cos = head / np.sqrt(head * head + tail)
                parts["cos"].append(np.nan_to_num(cos))
            self._walk = {k: np.concatenate(v) for k, v in parts.items()}
        return self._walk

    def _greedy_min_quad(self, x: float, ts: list[int]) -> dict[int, np.ndarray]:
        w = self._walk_stats()
        znorm = np.sqrt(w["znorm2"])
        z, r2 = w["z"], w["r2"]
        scores = 2.0 * x * znorm[:, None] * z + x * x * (z * z + r2)
        order = np.argsort(scores, axis=1, kind="stable")
        z_sorted = np.take_along_axis(z, order, axis=1)
        r_sorted = np.sqrt(np.take_along_axis(r2, order, axis=1))
        cos = w["cos"]
        along = np.cumsum(z_sorted, axis=1)
        wanted = set(ts)
        out = {}
        perp2 = np.zeros(self.samples)
        for step in range(max(ts)):
            r = r_sorted[:, step]
            perp2 = perp2 + r * r + 2.0 * r * np.sqrt(perp2) * cos[:, step]
            t = step + 1
            if t in wanted:
                par = znorm + x * along[:, step]
                out[t] = par * par + x * x * np.maximum(perp2, 0.0)
        return out

    # -- public ---------------------------------------------------------------

    def draws(self, p_prime: float, ts) -> dict[int, np.ndarray]:
        """I_t draws (length ``samples``) for every t in ``ts``."""
        ts = sorted(set(int(t) for t in ts))
        for t in ts:
            if not 1 <= t <= self.ka:
                raise ValueError(f"t={t} outside [1, {self.ka}]")
        x = math.sqrt(p_prime)
        exact = [t for t in ts if self.is_exact(t)]
        greedy = [t for t in ts if not self.is_exact(t)]
        quad1 = {}
        if exact:
            quad1.update(self._exact_min_quad(x, exact))
            znorm2_e = self._znorm2_exact
        if greedy:
            quad1.update(self._greedy_min_quad(x, greedy))
            znorm2_g = self._walk_stats()["znorm2"]
        out = {}
        for t in ts:
            quad2 = znorm2_e if t in exact else znorm2_g
            out[t] = info_density_value(self.n, p_prime, t, quad1[t], quad2, self.idens)
        return out


def _chisquare(rng, df, size):
    if df <= 0:
        return np.zeros(size)
    return rng.chisquare(df, size=size)


def _pad(values: np.ndarray, mask: np.ndarray, fill: float) -> np.ndarray:
    """Left-pack the masked entries of each row into a dense (rows, max_count) array."""
    counts = mask.sum(axis=1)
    width = int(counts.max())
    out = np.full((values.shape[0], width), fill)
    rows, cols = np.nonzero(mask)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    pos = np.arange(rows.size) - np.repeat(starts, counts)
    out[rows, pos] = values[rows, cols]
    return out


def _widen(part: np.ndarray, width: int, fill: float) -> np.ndarray:
    if part.shape[1] == width:
        return part
    out = np.full((part.shape[0], width), fill)
    out[:, : part.shape[1]] = part
    return out
