"""Location-shift priors from data (pairwise meta-analyses) or expert opinion.

Both models have normal group means and one shared between-study (or
between-expert) SD ``sigma`` with a half-normal prior. Given sigma the group
means are conjugate normal, so the posterior is a scale mixture of normals
over sigma. It is evaluated on a fixed quadrature grid instead of by MCMC,
which makes every reported moment deterministic.
"""

from __future__ import annotations

import csv
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import brentq
from scipy.special import logsumexp, ndtr

from .borrowing import BetaPrior, BetaPriorSet, FALLBACK
from .core import DataError, Network, TreatmentSets, pooled_sd, smd
from .mcmc import PosteriorSummary
from .nma import FLAT_VARIANCE, LOG2PI

logger = logging.getLogger(__name__)

GRID_POINTS = 2001
GRID_WIDTH = 8.0  # grid covers [0, GRID_WIDTH * half-normal scale]


class FallbackError(LookupError):
    """No usable evidence for a comparison; the caller substitutes N(0, 10000)."""


# -- normal scale mixtures ---------------------------------------------------------

@dataclass
class NormalMixture:
    """Distribution sum_k p_k N(mean_k, var_k)."""

    probs: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.dot(self.probs, self.means))

    @property
    def variance(self) -> float:
        m = self.mean
        return float(np.dot(self.probs, self.variances + (self.means - m) ** 2))

    def cdf(self, x: float) -> float:
        sd = np.sqrt(self.variances)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(sd > 0, (x - self.means) / np.where(sd > 0, sd, 1.0), np.where(x >= self.means, np.inf, -np.inf))
        return float(np.dot(self.probs, ndtr(z)))

    def quantile(self, q: float) -> float:
        if not 0 < q < 1:
            raise ValueError("quantile level must lie in (0, 1)")
        sd = math.sqrt(self.variance)
        if sd == 0:
            return self.mean
        lo, hi = self.mean - 10 * sd, self.mean + 10 * sd
        while self.cdf(lo) > q:
            lo -= 10 * sd
        while self.cdf(hi) < q:
            hi += 10 * sd
        return float(brentq(lambda x: self.cdf(x) - q, lo, hi, xtol=1e-12, rtol=1e-12))

    def summary(self) -> PosteriorSummary:
        return PosteriorSummary(self.mean, math.sqrt(self.variance), self.quantile(0.025),
                                self.quantile(0.5), self.quantile(0.975))

    def difference(self, other: "NormalMixture") -> "NormalMixture":
        """``self - other`` for two variables that are independent given the mixing node.

        Both mixtures must share the node weights (same sigma grid).
        """
        return NormalMixture(self.probs, self.means - other.means, self.variances + other.variances)

    def draw(self, size: int, rng: np.random.Generator) -> np.ndarray:
        k = rng.choice(len(self.probs), size=size, p=self.probs)
        return rng.normal(self.means[k], np.sqrt(self.variances[k]))


@dataclass
class SharedSigmaPosterior:
    """Posterior of group means mu_g with y_gs ~ N(mu_g, v_gs + sigma^2).

    Priors: mu_g ~ N(0, prior_var) independently, sigma ~ HN(sigma_scale)
    (sigma = 0 when ``sigma_scale`` is 0).
    """

    grid: np.ndarray
    probs: np.ndarray
    means: np.ndarray  # (groups, nodes)
    variances: np.ndarray

    def group(self, g: int) -> NormalMixture:
        return NormalMixture(self.probs, self.means[g], self.variances[g])

    def contrast(self, g: int, h: int) -> NormalMixture:
        """Posterior of mu_g - mu_h (conditionally independent given sigma)."""
        if g == h:
            zero = np.zeros_like(self.probs)
            return NormalMixture(self.probs, zero, zero)
        return self.group(g).difference(self.group(h))

    @property
    def sigma_mean(self) -> float:
        return float(np.dot(self.probs, self.grid))


def shared_sigma_posterior(
    groups: Sequence[tuple[Sequence[float], Sequence[float]]],
    sigma_scale: float = 1.0,
    prior_var: float = FLAT_VARIANCE,
    points: int = GRID_POINTS,
) -> SharedSigmaPosterior:
    """Quadrature posterior for several groups of (estimates, variances) sharing sigma."""
    if sigma_scale < 0:
        raise ValueError("sigma scale must be non-negative")
    data = []
    for y, v in groups:
        y, v = np.asarray(y, dtype=float), np.asarray(v, dtype=float)
        if y.size == 0:
            raise ValueError("every group needs at least one estimate")
        if y.shape != v.shape or np.any(v <= 0):
            raise ValueError("variances must be positive and match the estimates")
        data.append((y, v))
    if sigma_scale == 0:
        grid = np.zeros(1)
        logw = np.zeros(1)
        dx = np.ones(1)
    else:
        grid = np.linspace(0.0, GRID_WIDTH * sigma_scale, points)
        dx = np.full(points, grid[1] - grid[0])
        dx[[0, -1]] *= 0.5  # trapezoid rule
        logw = -0.5 * (grid / sigma_scale) ** 2
    s2 = grid**2
    G = len(data)
    means = np.empty((G, grid.size))
    variances = np.empty((G, grid.size))
    loglik = np.zeros(grid.size)
    for g, (y, v) in enumerate(data):
        a = 1.0 / (v[:, None] + s2[None, :])
        prec = a.sum(axis=0) + 1.0 / prior_var
        ay = (a * y[:, None]).sum(axis=0)
        means[g] = ay / prec
        variances[g] = 1.0 / prec
        loglik += -0.5 * (
            np.sum(LOG2PI - np.log(a), axis=0)
            + np.log(prior_var * prec)
            + (a * y[:, None] ** 2).sum(axis=0)
            - ay**2 / prec
        )
    lp = logw + loglik + np.log(dx)
    probs = np.exp(lp - logsumexp(lp))
    return SharedSigmaPosterior(grid, probs, means, variances)


# -- data-based priors ------------------------------------------------------------

def _comparison_estimates(network: Network, treatment: str, reference: str):
    ys, vs, ids = [], [], []
    for s in network.studies:
        if treatment in s.treatments and reference in s.treatments:
            d, v = smd(s, treatment, reference)
            ys.append(d)
            vs.append(v)
            ids.append(s.id)
    return np.array(ys), np.array(vs), ids


@dataclass
class PairwiseResult:
    """Pooled SMDs of ``treatment`` vs ``reference`` in both subgroups (shared sigma)."""

    treatment: str
    reference: str
    u_p1: float
    u_p2: float
    var_p1: float
    var_p2: float
    sigma: float
    d_mean: float
    d_var: float
    n_p1: int
    n_p2: int
    posterior: Optional[SharedSigmaPosterior] = field(default=None, repr=False)

    def beta_prior(self) -> BetaPrior:
        return BetaPrior(self.d_mean, self.d_var, "data")


def pairwise_ma_shared_het(
    sparse: Network,
    dense: Network,
    treatment: str,
    reference: Optional[str] = None,
    sigma_scale: float = 1.0,
) -> PairwiseResult:
    """Joint random-effects meta-analysis of one comparison in both subgroups.

    Study SMDs of ``treatment`` vs ``reference`` get separate pooled means
    u_p1 (sparse) and u_p2 (dense) and one shared heterogeneity SD.
    ``d = u_p2 - u_p1`` is summarized from the joint posterior.
    """
    reference = reference or sparse.reference
    y1, v1, _ = _comparison_estimates(sparse, treatment, reference)
    y2, v2, _ = _comparison_estimates(dense, treatment, reference)
    if y1.size == 0 or y2.size == 0:
        where = "sparse" if y1.size == 0 else "dense"
        raise FallbackError(
            f"{treatment} vs {reference}: no {where}-network studies, fallback to non-informative"
        )
    post = shared_sigma_posterior([(y1, v1), (y2, v2)], sigma_scale)
    u1, u2 = post.group(0), post.group(1)
    d = post.contrast(1, 0)
    return PairwiseResult(treatment, reference, u1.mean, u2.mean, u1.variance, u2.variance,
                          post.sigma_mean, d.mean, d.variance, int(y1.size), int(y2.size), post)


@dataclass
class PairwiseMA:
    """Random-effects pairwise meta-analysis of ``treatment`` vs ``baseline``."""

    baseline: str
    treatment: str
    effect: PosteriorSummary
    sigma: float
    n_studies: int


def pairwise_meta_analysis(network: Network, baseline: str, treatment: str,
                           sigma_scale: float = 1.0) -> PairwiseMA:
    """Pool the direct SMDs of ``treatment`` relative to ``baseline`` in one network."""
    y, v, _ = _comparison_estimates(network, treatment, baseline)
    if y.size == 0:
        raise FallbackError(f"{treatment} vs {baseline}: no direct evidence")
    post = shared_sigma_posterior([(y, v)], sigma_scale)
    return PairwiseMA(baseline, treatment, post.group(0).summary(), post.sigma_mean, int(y.size))


def data_based_beta_priors(sparse: Network, dense: Network, sets: TreatmentSets,
                           sigma_scale: float = 1.0) -> BetaPriorSet:
    """One prior per common non-reference treatment; N(0, 10000) without two-sided evidence."""
    out = BetaPriorSet(sets.reference)
    for t in sets.t_c:
        if t == sets.reference:
            continue
        try:
            out.priors[t] = pairwise_ma_shared_het(sparse, dense, t, sets.reference, sigma_scale).beta_prior()
        except FallbackError as exc:
            out.priors[t] = FALLBACK
            out.notes[t] = str(exc)
            logger.info("%s", exc)
    return out


# -- expert opinion ----------------------------------------------------------------

@dataclass(frozen=True)
class ExpertResponse:
    expert_id: str
    treatment: str
    expected_change: float
    sd: float
    confidence: float

    def __post_init__(self):
        if not (self.sd > 0 and math.isfinite(self.sd)):
            raise ValueError(f"expert {self.expert_id!r}, {self.treatment!r}: sd must be positive")
        if not 1 <= self.confidence <= 10:
            raise ValueError(f"expert {self.expert_id!r}: confidence must lie in [1, 10]")
        if not math.isfinite(self.expected_change):
            raise ValueError(f"expert {self.expert_id!r}, {self.treatment!r}: change must be finite")

    @property
    def gamma(self) -> float:
        """Precision multiplier of the elicited variance, confidence / 10."""
        return self.confidence / 10.0


@dataclass
class ExpertPoolResult:
    """Pooled standardized expert expectations xi_j and contrasts u_j = xi_j - xi_ref."""

    reference: str
    treatments: tuple[str, ...]
    xi: dict[str, NormalMixture]
    u: dict[str, NormalMixture]
    sigma: float
    med_pooled_sd: float
    excluded: tuple[str, ...] = ()


def median_pooled_sd(network: Network) -> float:
    """Median of the study pooled SDs, the standardizer for elicited changes."""
    if not network.studies:
        raise DataError("cannot standardize expert responses without studies")
    return float(statistics.median(pooled_sd(s) for s in network.studies))


def pool_experts(
    responses: Iterable[ExpertResponse],
    med_pooled_sd: float,
    reference: str,
    treatments: Optional[Sequence[str]] = None,
    sigma_scale: float = 1.0,
) -> ExpertPoolResult:
    """Pool elicited changes: x/med ~ N(xi_j, sigma^2 + sd^2 / (gamma med^2)).

    This is the expert model with the latent change c_hj integrated out.
    Treatments (from ``treatments``) nobody answered are excluded with a
    warning; the reference must be answered.
    """
    if not med_pooled_sd > 0:
        raise ValueError("median pooled SD must be positive")
    by_t: dict[str, list[ExpertResponse]] = {}
    for r in responses:
        by_t.setdefault(r.treatment, []).append(r)
    wanted = list(treatments) if treatments is not None else sorted(by_t)
    if reference not in by_t:
        raise DataError(f"no expert responses for the reference {reference!r}; contrasts undefined")
    excluded = tuple(t for t in wanted if t not in by_t)
    for t in excluded:
        logger.warning("no expert responses for %r; excluded from pooling", t)
    kept = [t for t in wanted if t in by_t]
    if reference not in kept:
        kept.insert(0, reference)
    groups = []
    for t in kept:
        rs = by_t[t]
        y = np.array([r.expected_change / med_pooled_sd for r in rs])
        v = np.array([r.sd**2 / (r.gamma * med_pooled_sd**2) for r in rs])
        groups.append((y, v))
    post = shared_sigma_posterior(groups, sigma_scale)
    ri = kept.index(reference)
    xi = {t: post.group(g) for g, t in enumerate(kept)}
    u = {t: post.contrast(g, ri) for g, t in enumerate(kept)}
    return ExpertPoolResult(reference, tuple(kept), xi, u, post.sigma_mean, med_pooled_sd, excluded)


def expert_beta_priors(pool: ExpertPoolResult, dense: Network, sets: TreatmentSets,
                       sigma_scale: float = 1.0) -> BetaPriorSet:
    """beta_j ~ N(mean, var) of u_p2 - u_p1(expert), u_p2 from a dense pairwise MA.

    The two posteriors are independent, so the difference has the mean
    difference and the summed variances.
    """
    if pool.reference != sets.reference:
        raise DataError(f"expert pool uses reference {pool.reference!r}, networks use {sets.reference!r}")
    out = BetaPriorSet(sets.reference)
    for t in sets.t_c:
        if t == sets.reference:
            continue
        if t not in pool.u:
            out.priors[t] = FALLBACK
            out.notes[t] = f"{t} vs {sets.reference}: no expert responses, fallback to non-informative"
            continue
        try:
            ma = pairwise_meta_analysis(dense, sets.reference, t, sigma_scale)
        except FallbackError as exc:
            out.priors[t] = FALLBACK
            out.notes[t] = f"{exc}, fallback to non-informative"
            continue
        u1 = pool.u[t]
        out.priors[t] = BetaPrior(ma.effect.mean - u1.mean, ma.effect.sd**2 + u1.variance, "expert")
    return out


# -- expert CSV ----------------------------------------------------------------------

EXPERT_COLUMNS = ("expert_id", "treatment", "expected_change", "sd", "confidence")


def load_expert_responses(path, canon: Optional[dict] = None) -> list[ExpertResponse]:
    """Read the expert CSV; rows with a blank expected change are skipped drugs.

    ``canon`` maps lower-cased treatment names to their display form (shared
    with study ingestion so both files agree on spelling).
    """
    path = Path(path)
    out = []
    seen = set()
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.DictReader(fh)
        cols = [c.strip() for c in (reader.fieldnames or [])]
        missing = [c for c in EXPERT_COLUMNS if c not in cols]
        if missing:
            raise DataError(f"{path}:1: missing columns {missing}")
        for line, raw in enumerate(reader, start=2):
            row = {k.strip(): (v or "").strip() for k, v in raw.items() if k is not None}
            if not any(row.values()) or not row["expected_change"]:
                continue
            t = row["treatment"]
            if canon is not None:
                t = canon.setdefault(t.lower(), t)
            key = (row["expert_id"], t.lower())
            if key in seen:
                raise DataError(f"{path}:{line}: duplicate response for expert {row['expert_id']!r}, {t!r}")
            seen.add(key)
            try:
                out.append(ExpertResponse(row["expert_id"], t, float(row["expected_change"]),
                                          float(row["sd"]), float(row["confidence"])))
            except ValueError as exc:
                raise DataError(f"{path}:{line}: {exc}") from None
    return out


def write_expert_responses(responses: Iterable[ExpertResponse], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EXPERT_COLUMNS)
        for r in responses:
            conf = int(r.confidence) if float(r.confidence).is_integer() else r.confidence
            w.writerow([r.expert_id, r.treatment, repr(r.expected_change), repr(r.sd), conf])
    return path
