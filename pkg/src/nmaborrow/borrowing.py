"""Two-stage borrowing from a dense network into a sparse one.

Stage 1 fits the dense network with per-study variance-inflation weights
``w`` and moves its effects ``mu_p2`` by a per-comparison location shift
``beta``: ``mu_star = mu_p2 - beta`` is the dense evidence extrapolated to the
sparse population. Stage 2 fits the sparse network with normal priors that
are moment-matched to the predictive draws ``mu_star + tau * eps``.
"""

from __future__ import annotations

import csv
import logging
import math
import zlib
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .core import DataError, Network, TreatmentSets, require_connected
from .mcmc import PosteriorSamples, SamplerConfig
from .nma import (
    FLAT_VARIANCE,
    MuPrior,
    NmaData,
    NmaPosterior,
    TauPrior,
    WeightSpec,
    _fit,
    fit_standard_nma,
    snap,
)

logger = logging.getLogger(__name__)


# -- scale weights ---------------------------------------------------------------

@dataclass(frozen=True)
class ScalePrior:
    """Prior for one study weight: ``fixed(v)``, ``beta(a, b)`` or ``uniform(lo, hi)``.

    Every kind keeps its mass inside (0, 1].
    """

    kind: str
    params: tuple[float, ...]

    def __post_init__(self):
        p = tuple(float(x) for x in self.params)
        object.__setattr__(self, "params", p)
        if self.kind == "fixed":
            if len(p) != 1 or not 0 < p[0] <= 1:
                raise ValueError(f"fixed weight must lie in (0, 1], got {p}")
        elif self.kind == "beta":
            if len(p) != 2 or not (p[0] > 0 and p[1] > 0):
                raise ValueError(f"beta prior needs a, b > 0, got {p}")
        elif self.kind == "uniform":
            if len(p) != 2 or not 0 < p[0] < p[1] <= 1:
                raise ValueError(f"uniform prior needs 0 < lo < hi <= 1, got {p}")
        else:
            raise ValueError(f"unknown scale prior kind {self.kind!r}")

    @classmethod
    def fixed(cls, v: float = 1.0) -> "ScalePrior":
        return cls("fixed", (v,))

    @classmethod
    def beta(cls, a: float, b: float) -> "ScalePrior":
        return cls("beta", (a, b))

    @classmethod
    def uniform(cls, lo: float, hi: float) -> "ScalePrior":
        return cls("uniform", (lo, hi))

    @classmethod
    def parse(cls, text: str) -> "ScalePrior":
        """Parse ``fixed(1)``, ``beta(3,3)`` or ``uniform(0.4,0.6)``."""
        t = text.strip().lower().replace(" ", "")
        if not t.endswith(")") or "(" not in t:
            raise ValueError(f"cannot parse scale prior {text!r}")
        kind, args = t[:-1].split("(", 1)
        try:
            params = tuple(float(a) for a in args.split(",") if a)
        except ValueError:
            raise ValueError(f"cannot parse scale prior {text!r}") from None
        return cls(kind, params)

    @property
    def is_fixed(self) -> bool:
        return self.kind == "fixed"

    def __str__(self):
        return f"{self.kind}({','.join(f'{p:g}' for p in self.params)})"


UNIT_WEIGHT = ScalePrior.fixed(1.0)

SCHEMES = ("none", "rob", "nct")


@dataclass(frozen=True)
class WeightScheme:
    """Which dense-network studies get a non-unit weight prior.

    ``none`` keeps only studies whose treatments are all common and weights
    them 1; ``rob`` does the same restriction and gives high risk-of-bias
    studies ``prior``; ``nct`` keeps the whole network and gives ``prior`` to
    every study with at least one non-common treatment.
    """

    kind: str = "none"
    prior: ScalePrior = UNIT_WEIGHT

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise ValueError(f"unknown weight scheme {self.kind!r}; expected one of {SCHEMES}")


class WeightAssignment(Mapping):
    """Study id -> ScalePrior, together with the network the scheme retained."""

    def __init__(self, network: Network, priors: dict[str, ScalePrior]):
        self.network = network
        self._priors = dict(priors)

    def __getitem__(self, key):
        return self._priors[key]

    def __iter__(self):
        return iter(self._priors)

    def __len__(self):
        return len(self._priors)

    @property
    def n_weighted(self) -> int:
        return sum(1 for p in self._priors.values() if p != UNIT_WEIGHT)


def assign_weights(dense: Network, sets: TreatmentSets, scheme: WeightScheme) -> WeightAssignment:
    common = set(sets.t_c)
    if scheme.kind == "nct":
        net = dense
        priors = {s.id: scheme.prior if set(s.treatments) - common else UNIT_WEIGHT for s in net.studies}
        return WeightAssignment(net, priors)
    net = dense.restrict(lambda s: set(s.treatments) <= common)
    if scheme.kind == "rob":
        missing = [s.id for s in net.studies if s.high_rob is None]
        if missing:
            raise DataError(f"risk-of-bias flags missing for studies {missing[:5]}")
        priors = {s.id: scheme.prior if s.high_rob else UNIT_WEIGHT for s in net.studies}
    else:
        priors = {s.id: UNIT_WEIGHT for s in net.studies}
    return WeightAssignment(net, priors)


def _weight_spec(data: NmaData, weights: Mapping) -> WeightSpec:
    fixed = np.ones(data.n_studies)
    free, lo, hi, a, b = [], [], [], [], []
    for i, sid in enumerate(data.study_ids):
        p = weights.get(sid, UNIT_WEIGHT)
        if p.kind == "fixed":
            fixed[i] = p.params[0]
        else:
            free.append(i)
            if p.kind == "beta":
                lo.append(0.0), hi.append(1.0), a.append(p.params[0]), b.append(p.params[1])
            else:
                lo.append(p.params[0]), hi.append(p.params[1]), a.append(1.0), b.append(1.0)
    arr = lambda x: np.array(x, dtype=float)  # noqa: E731
    return WeightSpec(fixed, np.array(free, dtype=np.intp), arr(lo), arr(hi), arr(a), arr(b))


# -- location shifts ----------------------------------------------------------------

SOURCES = ("data", "expert", "fallback")


@dataclass(frozen=True)
class BetaPrior:
    """Normal prior for one shift; variance 0 means beta is fixed at ``mean``."""

    mean: float
    variance: float
    source: str = "data"

    def __post_init__(self):
        if not (math.isfinite(self.mean) and self.variance >= 0 and math.isfinite(self.variance)):
            raise ValueError(f"invalid beta prior N({self.mean}, {self.variance})")
        if self.source not in SOURCES:
            raise ValueError(f"unknown prior source {self.source!r}")


FALLBACK = BetaPrior(0.0, FLAT_VARIANCE, "fallback")


@dataclass
class BetaPriorSet:
    """Shift priors keyed by the non-reference treatment j of comparison {reference, j}."""

    reference: str
    priors: dict[str, BetaPrior] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)

    def get(self, treatment: str) -> BetaPrior:
        return self.priors.get(treatment, FALLBACK)

    @classmethod
    def degenerate(cls, reference: str, treatments, value: float = 0.0) -> "BetaPriorSet":
        return cls(reference, {t: BetaPrior(value, 0.0, "data") for t in treatments if t != reference})

    @classmethod
    def fallback(cls, reference: str, treatments) -> "BetaPriorSet":
        return cls(reference, {t: FALLBACK for t in treatments if t != reference})


def comparison_label(treatment: str, reference: str) -> str:
    return f"{treatment} vs {reference}"


def parse_comparison(label: str) -> tuple[str, str]:
    parts = label.split(" vs ")
    if len(parts) != 2 or not all(p.strip() for p in parts):
        raise ValueError(f"cannot parse comparison {label!r}; expected '<treatment> vs <reference>'")
    return parts[0].strip(), parts[1].strip()


def write_beta_priors(priors: BetaPriorSet, path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["comparison", "mean", "variance", "source"])
        for t in sorted(priors.priors):
            p = priors.priors[t]
            w.writerow([comparison_label(t, priors.reference), repr(p.mean), repr(p.variance), p.source])
    return path


def read_beta_priors(path) -> BetaPriorSet:
    reference = None
    out = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for line, row in enumerate(csv.DictReader(fh), start=2):
            try:
                t, ref = parse_comparison(row["comparison"])
                if reference is not None and ref != reference:
                    raise ValueError(f"mixed references {reference!r} and {ref!r}")
                reference = ref
                out[t] = BetaPrior(float(row["mean"]), float(row["variance"]), row["source"].strip())
            except (KeyError, ValueError) as exc:
                raise DataError(f"{path}:{line}: {exc}") from None
    if reference is None:
        raise DataError(f"{path}: no priors")
    return BetaPriorSet(reference, out)


# -- stage 1 -------------------------------------------------------------------------

def _beta_draws(beta_priors: BetaPriorSet, treatments, config: SamplerConfig) -> dict[str, np.ndarray]:
    """Shift draws per treatment, shape (chains, draws); 0 where no prior is given.

    No dense-network term involves beta, so its posterior is its prior and it
    is drawn exactly, from a stream seeded by (seed, treatment, chain).
    """
    shape = (config.n_chains, config.n_kept)
    out = {}
    for t in treatments:
        p = beta_priors.priors.get(t)
        if p is None or p.variance == 0:
            out[t] = np.full(shape, 0.0 if p is None else p.mean)
            continue
        rows = []
        for c in range(config.n_chains):
            rng = np.random.default_rng(
                np.random.SeedSequence([config.seed, zlib.crc32(f"beta:{t}".encode("utf-8")), c]))
            rows.append(rng.normal(p.mean, math.sqrt(p.variance), config.n_kept))
        out[t] = np.array(rows)
    return out


def fit_stage1(
    dense: Network,
    beta_priors: BetaPriorSet,
    weights: Optional[Mapping] = None,
    tau_prior: Optional[TauPrior] = None,
    config: Optional[SamplerConfig] = None,
    mu_prior: Optional[MuPrior] = None,
    keep_latents: bool = False,
    workers: int = 1,
) -> PosteriorSamples:
    """Down-weighted random-effects NMA of the dense network plus location shifts.

    ``weights`` maps study id to ScalePrior (missing studies get weight 1). A
    :class:`WeightAssignment` also supplies the retained network, which then
    replaces ``dense``. Draws are named ``mu_p2[t]``, ``beta[t]``,
    ``mu_star[t]`` (= mu_p2 - beta per draw), ``tau`` and ``w[study]`` for
    sampled weights. Treatments without a prior in ``beta_priors`` get beta = 0.
    """
    if isinstance(weights, WeightAssignment):
        dense = weights.network
    weights = weights or {}
    if beta_priors.reference != dense.reference:
        raise DataError(f"beta priors use reference {beta_priors.reference!r}, network uses {dense.reference!r}")
    require_connected(dense)
    config = config or SamplerConfig()
    data = NmaData(dense)
    m, v = (mu_prior or MuPrior()).arrays(data.basic)
    target = NmaPosterior(data, m, v, tau_prior or TauPrior(), weights=_weight_spec(data, weights))
    samples = _fit(target, config, keep_latents, workers, mu_name="mu_p2")
    monitor = [f"mu_p2[{t}]" for t in data.basic] + ["tau"]
    for t, draws in _beta_draws(beta_priors, data.basic, config).items():
        b = snap(draws)
        samples.add(f"beta[{t}]", b)
        samples.add(f"mu_star[{t}]", samples[f"mu_p2[{t}]"] - b)
    samples.meta.update(
        basic={t: f"mu_star[{t}]" for t in data.basic},
        monitor=monitor,
        beta_sources={t: beta_priors.priors[t].source if t in beta_priors.priors else "none"
                      for t in data.basic},
    )
    return samples


# -- predictive priors ----------------------------------------------------------------

@dataclass(frozen=True)
class PredictivePrior:
    """Normal prior N(mean, variance) for the basic parameter of ``treatment``."""

    treatment: str
    reference: str
    mean: float
    variance: float
    source: str = "predictive"

    def __post_init__(self):
        if not (self.variance > 0 and math.isfinite(self.variance) and math.isfinite(self.mean)):
            raise ValueError(f"predictive prior for {self.treatment!r} needs a finite positive variance")

    @property
    def comparison(self) -> str:
        return comparison_label(self.treatment, self.reference)


def _comparison_seed(seed: int, treatment: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(treatment.encode("utf-8"))]))


def predictive_draws(stage1: PosteriorSamples, treatment: str, seed: Optional[int] = None) -> np.ndarray:
    """Draws of mu_new = mu_star + tau * eps for comparison {reference, treatment}."""
    name = f"mu_star[{treatment}]"
    if name not in stage1:
        raise KeyError(f"stage-1 samples have no comparison {treatment!r} vs {stage1.meta.get('reference')!r}")
    if seed is None:
        seed = stage1.config.seed if stage1.config is not None else 0
    mu = stage1.pooled(name)
    tau = stage1.pooled("tau")
    eps = _comparison_seed(seed, treatment).standard_normal(mu.size)
    return mu + tau * eps


def predictive_prior(stage1: PosteriorSamples, treatment: str, seed: Optional[int] = None) -> PredictivePrior:
    x = predictive_draws(stage1, treatment, seed)
    return PredictivePrior(treatment, stage1.meta["reference"], float(x.mean()), float(x.var(ddof=1)))


def predictive_priors(stage1: PosteriorSamples, treatments, seed: Optional[int] = None) -> dict[str, PredictivePrior]:
    """Predictive priors for every treatment in ``treatments`` that stage 1 estimated."""
    ref = stage1.meta["reference"]
    return {t: predictive_prior(stage1, t, seed) for t in treatments
            if t != ref and f"mu_star[{t}]" in stage1}


def write_predictive_priors(priors: Mapping[str, PredictivePrior], path) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["comparison", "mean", "variance", "source"])
        for t in sorted(priors):
            p = priors[t]
            w.writerow([p.comparison, repr(p.mean), repr(p.variance), p.source])
    return path


def read_predictive_priors(path) -> dict[str, PredictivePrior]:
    out = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for line, row in enumerate(csv.DictReader(fh), start=2):
            try:
                t, ref = parse_comparison(row["comparison"])
                out[t] = PredictivePrior(t, ref, float(row["mean"]), float(row["variance"]),
                                         (row.get("source") or "predictive").strip())
            except (KeyError, ValueError) as exc:
                raise DataError(f"{path}:{line}: {exc}") from None
    return out


# -- stage 2 ------------------------------------------------------------------------

def stage2_mu_prior(sparse: Network, priors: Mapping[str, Union[PredictivePrior, tuple]]) -> MuPrior:
    """MuPrior for the sparse network; basic parameters without a prior get N(0, 10000)."""
    means, variances = {}, {}
    for t in sparse.basic_treatments:
        p = priors.get(t)
        if p is None:
            continue
        if isinstance(p, PredictivePrior):
            if p.reference != sparse.reference:
                raise DataError(f"prior for {t!r} is relative to {p.reference!r}, not {sparse.reference!r}")
            means[t], variances[t] = p.mean, p.variance
        else:
            means[t], variances[t] = float(p[0]), float(p[1])
    return MuPrior(means, variances)


def fit_stage2(
    sparse: Network,
    priors: Mapping[str, Union[PredictivePrior, tuple]],
    tau_prior: Optional[TauPrior] = None,
    config: Optional[SamplerConfig] = None,
    keep_latents: bool = False,
    workers: int = 1,
) -> PosteriorSamples:
    """Standard NMA of the sparse network under the informative basic-parameter priors."""
    mu_prior = stage2_mu_prior(sparse, priors)
    samples = fit_standard_nma(sparse, mu_prior, tau_prior, config, keep_latents, workers)
    samples.meta["prior_sources"] = {
        t: ("predictive" if t in mu_prior.means else "fallback") for t in sparse.basic_treatments
    }
    return samples
