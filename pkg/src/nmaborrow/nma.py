"""Arm-level random-effects network meta-analysis on the SMD scale.

Observed arm means follow ``y_ik ~ N(theta_ik, (sd_ik^2 / n_ik) / w_i)``. Study
relative effects ``delta_i,1k = (theta_ik - theta_i1) / sd_i^pooled`` are
multivariate normal around the basic-parameter contrasts with the
compound-symmetric covariance (tau^2 on the diagonal, tau^2/2 off it).

The sampler state is centered: per-study baselines ``base`` (theta_i1) and
relative effects ``delta`` are sampled directly, with transported moves for
``mu`` and ``tau`` that carry the random effects along.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from numba import njit
from scipy.special import betaln

from .core import DataError, Network, Study, merge_networks, pooled_sd, require_connected
from .mcmc import ParameterBlock, PosteriorSamples, SamplerConfig, run_chains

LOG2PI = math.log(2.0 * math.pi)
FLAT_VARIANCE = 10_000.0
# Effect draws are stored on a grid of 2**-40 so sums and differences of them
# are exact in float64 (|values| < 2**12), which keeps transitivity exact.
GRID = 2.0**40


def snap(x):
    """Round draws to the 2**-40 grid used for stored effect parameters."""
    return np.rint(np.asarray(x, dtype=float) * GRID) / GRID


@dataclass(frozen=True)
class MuPrior:
    """Normal priors for basic parameters, keyed by non-reference treatment.

    Treatments not listed get N(default_mean, default_variance).
    """

    means: Mapping[str, float] = field(default_factory=dict)
    variances: Mapping[str, float] = field(default_factory=dict)
    default_mean: float = 0.0
    default_variance: float = FLAT_VARIANCE

    def __post_init__(self):
        if set(self.means) != set(self.variances):
            raise ValueError("means and variances must cover the same treatments")
        bad = [t for t, v in self.variances.items() if not v > 0]
        if bad or not self.default_variance > 0:
            raise ValueError(f"prior variances must be positive: {bad}")

    def arrays(self, treatments: Sequence[str]) -> tuple[np.ndarray, np.ndarray]:
        m = np.array([self.means.get(t, self.default_mean) for t in treatments], dtype=float)
        v = np.array([self.variances.get(t, self.default_variance) for t in treatments], dtype=float)
        return m, v


@dataclass(frozen=True)
class TauPrior:
    """Half-normal prior on the heterogeneity SD."""

    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("half-normal scale must be positive")

    def logpdf(self, tau):
        s = self.scale
        return math.log(2.0) - math.log(s) - 0.5 * LOG2PI - 0.5 * (tau / s) ** 2


@dataclass
class NmaState:
    mu: np.ndarray
    tau: float
    theta: list[np.ndarray]
    delta: list[np.ndarray]

    @classmethod
    def from_theta(cls, network: Network, mu, tau, theta) -> "NmaState":
        theta = [np.asarray(t, dtype=float) for t in theta]
        delta = [(t[1:] - t[0]) / pooled_sd(s) for s, t in zip(network.studies, theta)]
        return cls(np.asarray(mu, dtype=float), float(tau), theta, delta)

    @classmethod
    def from_delta(cls, network: Network, mu, tau, base, delta) -> "NmaState":
        delta = [np.asarray(d, dtype=float) for d in delta]
        theta = [np.concatenate([[b], b + d * pooled_sd(s)]) for s, b, d in zip(network.studies, base, delta)]
        return cls(np.asarray(mu, dtype=float), float(tau), theta, delta)


@njit(cache=True)
def _loglik_kernel(y, se2, n_arms, sdp, base, delta, w):
    S = y.shape[0]
    out = np.empty(S)
    for i in range(S):
        acc = 0.0
        b = base[i]
        for k in range(n_arms[i]):
            th = b if k == 0 else b + delta[i, k - 1] * sdp[i]
            var = se2[i, k] / w[i]
            r = y[i, k] - th
            acc += -0.5 * (LOG2PI + math.log(var) + r * r / var)
        out[i] = acc
    return out


@njit(cache=True)
def _slot(mu, direct, s):
    if s == 0:
        return 0.0
    if s <= mu.shape[0]:
        return mu[s - 1]
    return direct


@njit(cache=True)
def _re_study(delta, n_arms, pos, neg, mu, direct, i, t2, lh):
    d = n_arms[i] - 1
    s1 = 0.0
    s2 = 0.0
    for k in range(d):
        r = delta[i, k] - (_slot(mu, direct, pos[i, k]) - _slot(mu, direct, neg[i, k]))
        s1 += r * r
        s2 += r
    quad = (2.0 / t2) * (s1 - s2 * s2 / (d + 1.0))
    return -0.5 * (d * LOG2PI + math.log(d + 1.0) + d * lh + quad)


@njit(cache=True)
def _re_kernel(delta, n_arms, pos, neg, mu, direct, tau):
    S = delta.shape[0]
    out = np.empty(S)
    t2 = tau * tau
    lh = math.log(0.5 * t2)
    for i in range(S):
        out[i] = _re_study(delta, n_arms, pos, neg, mu, direct, i, t2, lh)
    return out


@njit(cache=True)
def _re_sum(delta, n_arms, pos, neg, mu, direct, tau):
    t2 = tau * tau
    lh = math.log(0.5 * t2)
    acc = 0.0
    for i in range(delta.shape[0]):
        acc += _re_study(delta, n_arms, pos, neg, mu, direct, i, t2, lh)
    return acc


@njit(cache=True)
def _ll_sum(y, se2, n_arms, sdp, base, delta, w):
    acc = 0.0
    for i in range(y.shape[0]):
        b = base[i]
        for k in range(n_arms[i]):
            th = b if k == 0 else b + delta[i, k - 1] * sdp[i]
            var = se2[i, k] / w[i]
            r = y[i, k] - th
            acc += -0.5 * (LOG2PI + math.log(var) + r * r / var)
    return acc


@njit(cache=True)
def _delta_terms(y, se2, n_arms, sdp, base, delta, w, pos, neg, mu, direct, tau):
    out = _loglik_kernel(y, se2, n_arms, sdp, base, delta, w)
    t2 = tau * tau
    lh = math.log(0.5 * t2)
    for i in range(delta.shape[0]):
        out[i] += _re_study(delta, n_arms, pos, neg, mu, direct, i, t2, lh)
    return out


@njit(cache=True)
def _normal_sum(x, mean, var):
    acc = 0.0
    for j in range(x.shape[0]):
        r = x[j] - mean[j]
        acc += -0.5 * (LOG2PI + math.log(var[j]) + r * r / var[j])
    return acc


@njit(cache=True)
def _shift_delta(delta, n_arms, pos, neg, mu0, dir0, mu1, dir1):
    out = delta.copy()
    for i in range(delta.shape[0]):
        for k in range(n_arms[i] - 1):
            m0 = _slot(mu0, dir0, pos[i, k]) - _slot(mu0, dir0, neg[i, k])
            m1 = _slot(mu1, dir1, pos[i, k]) - _slot(mu1, dir1, neg[i, k])
            out[i, k] += m1 - m0
    return out


@njit(cache=True)
def _scale_delta(delta, n_arms, pos, neg, mu, direct, ratio):
    out = delta.copy()
    for i in range(delta.shape[0]):
        for k in range(n_arms[i] - 1):
            m = _slot(mu, direct, pos[i, k]) - _slot(mu, direct, neg[i, k])
            out[i, k] = m + ratio * (delta[i, k] - m)
    return out


class NmaData:
    """Padded arrays describing one network for vectorized evaluation.

    ``split`` names a comparison (j, l) whose direct studies get their own
    effect parameter: those studies are re-based on j and their j-l contrast
    is centered on the extra ``direct`` parameter instead of mu_l - mu_j.
    """

    def __init__(self, network: Network, treatments: Optional[Sequence[str]] = None, split=None):
        if not network.studies:
            raise DataError(f"network {network.subgroup!r} has no studies")
        self.network = network
        self.reference = network.reference
        order = tuple(treatments) if treatments is not None else network.ordered_treatments()
        if order[0] != self.reference:
            raise DataError("treatment order must start with the reference")
        missing = set(network.treatments) - set(order)
        if missing:
            raise DataError(f"treatments without a parameter slot: {sorted(missing)}")
        self.treatments = order
        self.basic = order[1:]
        self.index = {t: i for i, t in enumerate(order)}
        studies = list(network.studies)
        self.split = tuple(split) if split is not None else None
        if self.split is not None:
            j, l = self.split
            studies = [s.with_baseline(j) if j in s.treatments and l in s.treatments else s for s in studies]
        self.studies = studies
        S = len(studies)
        K = max(s.n_arms for s in studies)
        self.n_studies, self.max_arms = S, K
        self.study_ids = [s.id for s in studies]
        self.y = np.zeros((S, K))
        self.se2 = np.ones((S, K))
        self.arm_mask = np.zeros((S, K), dtype=bool)
        self.sdp = np.array([pooled_sd(s) for s in studies])
        n_slots = len(order) + (1 if self.split is not None else 0)
        self.direct_slot = len(order) if self.split is not None else None
        self.pos = np.zeros((S, K - 1), dtype=np.int64)
        self.neg = np.zeros((S, K - 1), dtype=np.int64)
        self.arm_index = np.zeros((S, K), dtype=np.intp)
        for i, s in enumerate(studies):
            for k, a in enumerate(s.arms):
                self.y[i, k] = a.mean
                self.se2[i, k] = a.se2
                self.arm_mask[i, k] = True
                self.arm_index[i, k] = self.index[a.treatment]
            t1 = self.index[s.arms[0].treatment]
            for k in range(1, s.n_arms):
                tk = self.index[s.arms[k].treatment]
                if self.split is not None and (s.arms[0].treatment, s.arms[k].treatment) == self.split:
                    self.pos[i, k - 1], self.neg[i, k - 1] = self.direct_slot, 0
                else:
                    self.pos[i, k - 1], self.neg[i, k - 1] = tk, t1
        self.n_slots = n_slots
        self.d_mask = self.arm_mask[:, 1:].copy()
        self.d_maskf = self.d_mask.astype(float)
        self.n_dims = self.d_mask.sum(axis=1).astype(float)
        self.n_arms = self.arm_mask.sum(axis=1).astype(np.int64)
        self.unit_w = np.ones(S)
        self.n_free_delta = float(self.n_dims.sum())

    # -- vectorized kernels -------------------------------------------------

    def theta(self, base, delta):
        th = np.empty((self.n_studies, self.max_arms))
        th[:, 0] = base
        th[:, 1:] = base[:, None] + delta * self.sdp[:, None]
        return th

    def loglik_terms(self, base, delta, weights=None):
        """Per-study log-likelihood; ``weights=None`` means unit weights."""
        w = self.unit_w if weights is None else np.asarray(weights, dtype=float)
        return _loglik_kernel(self.y, self.se2, self.n_arms, self.sdp, base, delta, w)

    def re_means(self, mu, direct=0.0):
        """Mean of each study's relative effects (zero in padded slots)."""
        zero = np.zeros((self.n_studies, self.max_arms - 1))
        return _shift_delta(zero, self.n_arms, self.pos, self.neg, np.zeros(len(mu)), 0.0,
                            np.asarray(mu, dtype=float), float(direct))

    def re_terms(self, delta, mu, tau, direct=0.0):
        """Per-study log-density of delta_i under N(mu contrasts, CS(tau))."""
        return _re_kernel(delta, self.n_arms, self.pos, self.neg, np.asarray(mu, dtype=float),
                          float(direct), float(tau))

    def observed_delta(self):
        d = (self.y[:, 1:] - self.y[:, :1]) / self.sdp[:, None]
        return np.where(self.d_mask, d, 0.0)


def _state_arrays(network: Network, state: NmaState):
    data = NmaData(network)
    base = np.array([t[0] for t in state.theta])
    delta = np.zeros((data.n_studies, data.max_arms - 1))
    for i, d in enumerate(state.delta):
        delta[i, : len(d)] = d
    return data, base, delta


def log_likelihood(network: Network, state: NmaState, weights=None) -> float:
    """Arm-level normal log-likelihood, optionally variance-inflated by 1/w_i."""
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (len(network.studies),) or np.any(weights <= 0) or np.any(weights > 1):
            raise ValueError("weights must be one value in (0, 1] per study")
    data = NmaData(network)
    base = np.array([t[0] for t in state.theta])
    th = np.zeros((data.n_studies, data.max_arms))
    for i, t in enumerate(state.theta):
        th[i, : len(t)] = t
    delta = np.where(data.d_mask, (th[:, 1:] - base[:, None]) / data.sdp[:, None], 0.0)
    return float(data.loglik_terms(base, delta, weights).sum())


def log_random_effects(network: Network, state: NmaState) -> float:
    if not state.tau > 0:
        raise ValueError("tau must be positive")
    data, base, delta = _state_arrays(network, state)
    if len(state.mu) != len(data.basic):
        raise ValueError(f"expected {len(data.basic)} basic parameters, got {len(state.mu)}")
    return float(data.re_terms(delta, state.mu, state.tau).sum())


# -- posterior ----------------------------------------------------------------

@dataclass
class WeightSpec:
    """Per-study scale weights: fixed values plus Beta-distributed free ones.

    A free weight is ``lo + (hi - lo) * u`` with ``u ~ Beta(a, b)``; a uniform
    prior on (lo, hi) is ``a = b = 1``.
    """

    fixed: np.ndarray
    free_index: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    a: np.ndarray
    b: np.ndarray

    @classmethod
    def unit(cls, n_studies: int) -> "WeightSpec":
        e = np.zeros(0)
        return cls(np.ones(n_studies), np.zeros(0, dtype=np.intp), e, e, e, e)

    @property
    def n_free(self) -> int:
        return len(self.free_index)

    def prior_mean_u(self) -> np.ndarray:
        return self.a / (self.a + self.b)


class NmaPosterior:
    """Log posterior of the arm-level NMA, with optional per-study scale
    weights and a node-split direct parameter.

    Block ``mu`` holds the means of the random-effects distribution, with
    independent normal priors N(prior_mean, prior_var).
    """

    def __init__(
        self,
        data: NmaData,
        prior_mean: np.ndarray,
        prior_var: np.ndarray,
        tau_prior: TauPrior,
        weights: Optional[WeightSpec] = None,
        direct_prior_var: float = FLAT_VARIANCE,
    ):
        self.data = data
        P = len(data.basic)
        self.prior_mean = np.asarray(prior_mean, dtype=float)
        self.prior_var = np.asarray(prior_var, dtype=float)
        if self.prior_mean.shape != (P,) or self.prior_var.shape != (P,):
            raise ValueError("mu prior does not match the number of basic parameters")
        self.tau_prior = tau_prior
        self.weights = weights
        self.direct_prior_var = direct_prior_var
        self._w_free = weights is not None and weights.n_free > 0
        self._w_fixed_unit = weights is None or (weights.n_free == 0 and np.all(weights.fixed == 1.0))

    # -- pieces ----------------------------------------------------------------

    def _w(self, state):
        if self._w_fixed_unit:
            return self.data.unit_w
        w = self.weights.fixed.copy()
        if self._w_free:
            ws = self.weights
            w[ws.free_index] = ws.lo + (ws.hi - ws.lo) * state["w"]
        return w

    @staticmethod
    def _direct(state):
        d = state.get("direct")
        return 0.0 if d is None else d[0]

    def _loglik(self, state):
        d = self.data
        return _loglik_kernel(d.y, d.se2, d.n_arms, d.sdp, state["base"], state["delta"], self._w(state))

    def _loglik_sum(self, state):
        d = self.data
        return _ll_sum(d.y, d.se2, d.n_arms, d.sdp, state["base"], state["delta"], self._w(state))

    def _re_sum(self, state):
        d = self.data
        return _re_sum(state["delta"], d.n_arms, d.pos, d.neg, state["mu"], self._direct(state),
                       state["tau"][0])

    def _mu_prior_sum(self, state):
        return _normal_sum(state["mu"], self.prior_mean, self.prior_var)

    def _w_prior(self, state):
        ws = self.weights
        u = state["w"]
        return (ws.a - 1) * np.log(u) + (ws.b - 1) * np.log1p(-u) - betaln(ws.a, ws.b) - np.log(ws.hi - ws.lo)

    def _direct_prior(self, state):
        d = state["direct"][0]
        v = self.direct_prior_var
        return -0.5 * (LOG2PI + math.log(v) + d * d / v)

    # -- target protocol ---------------------------------------------------------

    def __call__(self, state) -> float:
        lp = self._loglik_sum(state) + self._re_sum(state) + self._mu_prior_sum(state)
        lp += self.tau_prior.logpdf(state["tau"][0])
        if "direct" in state:
            lp += self._direct_prior(state)
        if "w" in state:
            lp += float(self._w_prior(state).sum())
        return lp

    def conditional(self, state, name, transported=False) -> float:
        if name == "mu":
            lp = self._re_sum(state) + self._mu_prior_sum(state)
        elif name == "tau":
            lp = self._re_sum(state) + self.tau_prior.logpdf(state["tau"][0])
        elif name == "direct":
            lp = self._re_sum(state) + self._direct_prior(state)
        else:
            return self(state)
        if transported:
            lp += self._loglik_sum(state)
        return lp

    def block_terms(self, state, name) -> np.ndarray:
        if name == "base":
            return self._loglik(state)
        if name == "delta":
            d = self.data
            return _delta_terms(d.y, d.se2, d.n_arms, d.sdp, state["base"], state["delta"], self._w(state),
                                d.pos, d.neg, state["mu"], self._direct(state), state["tau"][0])
        if name == "w":
            return self._loglik(state)[self.weights.free_index] + self._w_prior(state)
        raise KeyError(name)

    def transport(self, state, name, new_value):
        d = self.data
        mu, direct = state["mu"], self._direct(state)
        if name == "mu":
            return {"delta": _shift_delta(state["delta"], d.n_arms, d.pos, d.neg, mu, direct, new_value, direct)}, 0.0
        if name == "direct":
            return {"delta": _shift_delta(state["delta"], d.n_arms, d.pos, d.neg, mu, direct, mu, new_value[0])}, 0.0
        if name == "tau":
            ratio = new_value[0] / state["tau"][0]
            delta = _scale_delta(state["delta"], d.n_arms, d.pos, d.neg, mu, direct, ratio)
            return {"delta": delta}, d.n_free_delta * math.log(ratio)
        raise KeyError(name)

    # -- blocks --------------------------------------------------------------------

    def blocks(self, keep_latents: bool = False, mu_name: str = "mu") -> list[ParameterBlock]:
        data = self.data
        blocks = [
            ParameterBlock("base", data.y[:, 0].copy(), elementwise=True, store=keep_latents,
                           labels=[f"theta[{s},1]" for s in data.study_ids], init_scale=0.5),
            ParameterBlock("delta", data.observed_delta(), elementwise=True, mask=data.d_mask,
                           store=keep_latents, init_scale=0.1,
                           labels=[f"delta[{s},{k + 2}]" for s in data.study_ids for k in range(data.max_arms - 1)]),
            ParameterBlock("mu", np.zeros(len(data.basic)), transport=True, jitter=0.5,
                           labels=[f"{mu_name}[{t}]" for t in data.basic], init_scale=0.05),
        ]
        if data.split is not None:
            blocks.append(ParameterBlock("direct", np.zeros(1), transport=True, jitter=0.5,
                                         labels=["d_direct"], init_scale=0.05))
        blocks.append(ParameterBlock("tau", np.array([0.1]), support="positive", transport=True,
                                     jitter=0.5, labels=["tau"], init_scale=0.2))
        if self._w_free:
            ws = self.weights
            blocks.append(ParameterBlock("w", ws.prior_mean_u(), support="unit-interval", elementwise=True,
                                         labels=[f"w_u[{data.study_ids[i]}]" for i in ws.free_index],
                                         init_scale=0.5))
        return blocks


def _fit(target: NmaPosterior, config: SamplerConfig, keep_latents=False, workers=1, mu_name="mu"):
    samples = run_chains(target, target.blocks(keep_latents, mu_name), config, workers=workers)
    data = target.data
    for name in [f"{mu_name}[{t}]" for t in data.basic] + (["d_direct"] if data.split else []):
        samples.draws[name] = snap(samples.draws[name])
    samples.meta.update(
        reference=data.reference,
        treatments=list(data.treatments),
        basic={t: f"{mu_name}[{t}]" for t in data.basic},
        studies=list(data.study_ids),
    )
    if target._w_free:
        ws = target.weights
        for k, i in enumerate(ws.free_index):
            u = samples[f"w_u[{data.study_ids[i]}]"]
            samples.add(f"w[{data.study_ids[i]}]", ws.lo[k] + (ws.hi[k] - ws.lo[k]) * u)
    return samples


def monitored_parameters(samples: PosteriorSamples) -> list[str]:
    """Names used for the convergence gate: basic parameters and tau."""
    if "monitor" in samples.meta:
        return list(samples.meta["monitor"])
    names = list(samples.meta.get("basic", {}).values())
    names += [n for n in ("tau", "d_direct") if n in samples]
    return names


def fit_standard_nma(
    network: Network,
    mu_prior: Optional[MuPrior] = None,
    tau_prior: Optional[TauPrior] = None,
    config: Optional[SamplerConfig] = None,
    keep_latents: bool = False,
    workers: int = 1,
) -> PosteriorSamples:
    """Random-effects NMA of one network; returns mu[<treatment>] and tau draws."""
    require_connected(network)
    config = config or SamplerConfig()
    mu_prior = mu_prior or MuPrior()
    data = NmaData(network)
    m, v = mu_prior.arrays(data.basic)
    target = NmaPosterior(data, m, v, tau_prior or TauPrior())
    return _fit(target, config, keep_latents, workers)


def fit_naive_synthesis(
    dense: Network,
    sparse: Network,
    mu_prior: Optional[MuPrior] = None,
    tau_prior: Optional[TauPrior] = None,
    config: Optional[SamplerConfig] = None,
    workers: int = 1,
) -> PosteriorSamples:
    """Standard NMA on both subgroups pooled as one population."""
    merged = merge_networks(dense, sparse) if sparse.studies else dense
    return fit_standard_nma(merged, mu_prior, tau_prior, config, workers=workers)


# -- relative effects -----------------------------------------------------------

def basic_draws(samples: PosteriorSamples, treatments: Optional[Sequence[str]] = None) -> dict[str, np.ndarray]:
    """Map every treatment to its mu_{1j} draws; the reference maps to zeros."""
    ref = samples.meta["reference"]
    basic = samples.meta["basic"]
    shape = (samples.n_chains, samples.n_draws)
    out = {ref: np.zeros(shape)}
    for t, name in basic.items():
        out[t] = samples[name]
    if treatments is not None:
        missing = [t for t in treatments if t not in out]
        if missing:
            raise KeyError(f"no samples for treatments {missing}")
        out = {t: out[t] for t in treatments}
    return out


def relative_effect(mu_samples: Mapping[str, np.ndarray], j: str, l: str) -> np.ndarray:
    """Draws of mu_jl = mu_1l - mu_1j, the effect of ``l`` relative to ``j``."""
    for t in (j, l):
        if t not in mu_samples:
            raise KeyError(f"unknown treatment {t!r}")
    if j == l:
        return np.zeros_like(np.asarray(mu_samples[j], dtype=float))
    return np.asarray(mu_samples[l]) - np.asarray(mu_samples[j])
