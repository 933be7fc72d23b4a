"""Analysis configurations, the end-to-end pipeline and report emission."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import __version__
from .borrowing import (
    PredictivePrior,
    ScalePrior,
    WeightScheme,
    assign_weights,
    fit_stage1,
    fit_stage2,
    predictive_priors,
    stage2_mu_prior,
    write_beta_priors,
    write_predictive_priors,
)
from .core import DataError, direct_comparisons, merge_networks, require_connected, treatment_sets
from .evaluation import (
    LeagueTable,
    NodeSplitResult,
    RankMatrix,
    league_table,
    node_split,
    rank_probabilities,
    splittable_comparisons,
    write_consistency,
    write_density_pairs,
    write_league_table,
    write_sucra,
)
from .io import load_network, read_config
from .mcmc import PosteriorSamples, SamplerConfig, effective_sample_size, export_traces, gelman_rubin, mcse_mean, summarize
from .nma import MuPrior, TauPrior, basic_draws, fit_naive_synthesis, fit_standard_nma, monitored_parameters
from .priors import (
    data_based_beta_priors,
    expert_beta_priors,
    load_expert_responses,
    median_pooled_sd,
    pairwise_meta_analysis,
    pool_experts,
)

logger = logging.getLogger(__name__)

MODELS = ("naive", "standard", "pairwise", "borrow")
BETA_SOURCES = ("data", "expert")
DW_SCHEMES = {"no_dw": "none", "rob_dw": "rob", "nct_dw": "nct"}
ROUNDING = ("appendix", "full")


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class AnalysisConfig:
    model: str = "standard"
    beta_source: Optional[str] = None
    scheme: Optional[str] = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    reference: Optional[str] = None
    scale_prior: ScalePrior = field(default_factory=lambda: ScalePrior.beta(3, 3))
    tau_scale: float = 1.0
    direction: str = "lower-better"
    node_split: bool = False
    traces: bool = False
    allow_unconverged: bool = False
    rhat_threshold: float = 1.1
    rounding: str = "appendix"
    workers: int = 1
    sparse: Optional[str] = None
    dense: Optional[str] = None
    experts: Optional[str] = None
    out: Optional[str] = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.model == "borrow":
            if self.beta_source not in BETA_SOURCES:
                raise ValueError(f"borrow model needs beta_source in {BETA_SOURCES}")
            if self.scheme not in DW_SCHEMES:
                raise ValueError(f"borrow model needs scheme in {tuple(DW_SCHEMES)}")
        elif self.beta_source is not None or self.scheme is not None:
            raise ValueError(f"beta_source and scheme only apply to the borrow model, not {self.model!r}")
        if self.rounding not in ROUNDING:
            raise ValueError(f"rounding must be one of {ROUNDING}")
        if not self.tau_scale > 0:
            raise ValueError("tau_scale must be positive")

    @property
    def name(self) -> str:
        if self.model == "borrow":
            return f"borrow-{self.beta_source}-{self.scheme}"
        return self.model

    def to_dict(self) -> dict[str, str]:
        """Flat string mapping; :meth:`from_dict` inverts it."""
        s = self.sampler
        out = {
            "model": self.model,
            "beta_source": self.beta_source or "",
            "scheme": self.scheme or "",
            "seed": str(s.seed),
            "chains": str(s.n_chains),
            "iterations": str(s.iterations),
            "burn_in": str(s.burn_in),
            "thin": str(s.thin),
            "adapt_window": "" if s.adapt_window is None else str(s.adapt_window),
            "reference": self.reference or "",
            "scale_prior": str(self.scale_prior),
            "tau_scale": repr(self.tau_scale),
            "direction": self.direction,
            "node_split": str(self.node_split).lower(),
            "traces": str(self.traces).lower(),
            "allow_unconverged": str(self.allow_unconverged).lower(),
            "rhat_threshold": repr(self.rhat_threshold),
            "rounding": self.rounding,
            "workers": str(self.workers),
            "sparse": self.sparse or "",
            "dense": self.dense or "",
            "experts": self.experts or "",
            "out": self.out or "",
        }
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "AnalysisConfig":
        v = {k.lower().replace("-", "_"): (str(x).strip() if x is not None else "") for k, x in values.items()}
        known = set(cls().to_dict()) | {"n_chains", "iters"}
        unknown = sorted(set(v) - known)
        if unknown:
            raise ValueError(f"unknown config keys {unknown}")

        def get(key, default=None):
            x = v.get(key, "")
            return default if x == "" else x

        def flag(key):
            x = get(key, "false").lower()
            if x not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"{key} must be true or false, got {x!r}")
            return x in ("true", "1", "yes")

        base = SamplerConfig()
        aw = get("adapt_window")
        sampler = SamplerConfig(
            n_chains=int(get("chains", get("n_chains", base.n_chains))),
            iterations=int(get("iterations", get("iters", base.iterations))),
            burn_in=int(get("burn_in", base.burn_in)),
            thin=int(get("thin", base.thin)),
            seed=int(get("seed", base.seed)),
            adapt_window=int(aw) if aw is not None else None,
        )
        return cls(
            model=get("model", "standard"),
            beta_source=get("beta_source"),
            scheme=get("scheme"),
            sampler=sampler,
            reference=get("reference"),
            scale_prior=ScalePrior.parse(get("scale_prior", "beta(3,3)")),
            tau_scale=float(get("tau_scale", 1.0)),
            direction=get("direction", "lower-better"),
            node_split=flag("node_split"),
            traces=flag("traces"),
            allow_unconverged=flag("allow_unconverged"),
            rhat_threshold=float(get("rhat_threshold", 1.1)),
            rounding=get("rounding", "appendix"),
            workers=int(get("workers", 1)),
            sparse=get("sparse"),
            dense=get("dense"),
            experts=get("experts"),
            out=get("out"),
        )

    @classmethod
    def from_file(cls, path) -> "AnalysisConfig":
        return cls.from_dict(read_config(path))

    @classmethod
    def from_manifest(cls, path) -> "AnalysisConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8"))["config"])


def model_variants(**common) -> list[AnalysisConfig]:
    """The nine analyses: naive, six borrowing variants, standard and pairwise."""
    out = [AnalysisConfig(model="naive", **common)]
    for src in BETA_SOURCES:
        for scheme in DW_SCHEMES:
            out.append(AnalysisConfig(model="borrow", beta_source=src, scheme=scheme, **common))
    out += [AnalysisConfig(model="standard", **common), AnalysisConfig(model="pairwise", **common)]
    return out


# -- report bundle -------------------------------------------------------------------

@dataclass
class ReportBundle:
    config: AnalysisConfig
    treatments: tuple[str, ...] = ()
    reference: str = ""
    summaries: list[dict] = field(default_factory=list)
    league: Optional[LeagueTable] = None
    ranks: Optional[RankMatrix] = None
    consistency: list[NodeSplitResult] = field(default_factory=list)
    convergence: list[dict] = field(default_factory=list)
    samples: dict[str, PosteriorSamples] = field(default_factory=dict)
    beta_priors: Optional[object] = None
    predictive: dict[str, PredictivePrior] = field(default_factory=dict)
    manifest: dict = field(default_factory=dict)
    converged: bool = True
    messages: list[str] = field(default_factory=list)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _summary_rows(stage: str, samples: PosteriorSamples, names) -> list[dict]:
    rows = []
    for n in names:
        s = summarize(samples, n)
        rows.append(dict(stage=stage, parameter=n, mean=s.mean, sd=s.sd, q025=s.q025, median=s.median, q975=s.q975))
    return rows


def _convergence_rows(stage: str, samples: PosteriorSamples) -> list[dict]:
    rows = []
    for n in monitored_parameters(samples):
        rhat = gelman_rubin(samples, n) if samples.n_chains >= 2 else math.nan
        rows.append(dict(stage=stage, name=n, rhat=rhat, ess=effective_sample_size(samples, n),
                         mcse=mcse_mean(samples, n), acceptance=None))
    for label, rate in samples.acceptance.items():
        rows.append(dict(stage=stage, name=f"move:{label}", rhat=None, ess=None, mcse=None, acceptance=rate))
    return rows


def _reported(samples: PosteriorSamples) -> list[str]:
    names = list(samples.meta["basic"].values())
    for extra in ("tau", "d_direct"):
        if extra in samples:
            names.append(extra)
    names += [n for n in samples.names if n.startswith("w[")]
    return names


def run_analysis(
    config: AnalysisConfig,
    sparse_path=None,
    dense_path=None,
    expert_path=None,
) -> ReportBundle:
    """Run one configured analysis and collect everything the report needs.

    The convergence gate does not raise: ``bundle.converged`` is False when a
    monitored R-hat reaches the threshold (or cannot be computed) and
    ``allow_unconverged`` is off, and :func:`emit_report` then writes only the
    convergence report.
    """
    sparse_path = sparse_path or config.sparse
    dense_path = dense_path or config.dense
    expert_path = expert_path or config.experts
    if sparse_path is None:
        raise DataError("a sparse-network study file is required")
    needs_dense = config.model in ("naive", "borrow")
    if needs_dense and dense_path is None:
        raise DataError(f"model {config.name!r} requires a dense-network study file")
    if config.model == "borrow" and config.beta_source == "expert" and expert_path is None:
        raise DataError("expert beta priors require an expert-response file")

    timings = {}
    t0 = time.perf_counter()
    canon: dict = {}
    sparse = load_network(sparse_path, config.reference, canon=canon)
    reference = sparse.reference
    inputs = {"sparse": str(sparse_path)}
    dense = None
    if needs_dense:
        dense = load_network(dense_path, reference, canon=canon)
        inputs["dense"] = str(dense_path)
    if expert_path is not None and config.model == "borrow" and config.beta_source == "expert":
        inputs["experts"] = str(expert_path)
    timings["load"] = time.perf_counter() - t0

    cfg = config.sampler
    tau_prior = TauPrior(config.tau_scale)
    bundle = ReportBundle(config=config, reference=reference)
    final: Optional[PosteriorSamples] = None
    final_network = sparse
    final_prior: Optional[MuPrior] = None

    t0 = time.perf_counter()
    if config.model == "standard":
        final = fit_standard_nma(sparse, tau_prior=tau_prior, config=cfg, workers=config.workers)
    elif config.model == "naive":
        final_network = merge_networks(dense, sparse)
        require_connected(final_network)
        final = fit_naive_synthesis(dense, sparse, tau_prior=tau_prior, config=cfg, workers=config.workers)
    elif config.model == "pairwise":
        bundle.treatments = sparse.treatments
        entries = {}
        for (a, b) in direct_comparisons(sparse):
            ma = pairwise_meta_analysis(sparse, a, b, config.tau_scale)
            s = ma.effect
            entries[(a, b)] = s
            entries[(b, a)] = type(s)(-s.mean, s.sd, -s.q975, -s.median, -s.q025)
            bundle.summaries.append(dict(stage="pairwise", parameter=f"{b} vs {a}", mean=s.mean, sd=s.sd,
                                         q025=s.q025, median=s.median, q975=s.q975))
            bundle.summaries.append(dict(stage="pairwise", parameter=f"sigma[{b} vs {a}]", mean=ma.sigma,
                                         sd=None, q025=None, median=None, q975=None))
        bundle.league = LeagueTable(sparse.treatments, entries)
    else:
        sets = treatment_sets(dense, sparse)
        if config.beta_source == "data":
            bp = data_based_beta_priors(sparse, dense, sets, config.tau_scale)
        else:
            responses = load_expert_responses(expert_path, canon)
            pool = pool_experts(responses, median_pooled_sd(sparse), reference, sets.t_c, config.tau_scale)
            bp = expert_beta_priors(pool, dense, sets, config.tau_scale)
            for t in pool.excluded:
                bundle.messages.append(f"no expert responses for {t}; its beta prior falls back to N(0, 10000)")
        for t, note in sorted(bp.notes.items()):
            bundle.messages.append(note)
        bundle.beta_priors = bp
        scheme = WeightScheme(DW_SCHEMES[config.scheme],
                              config.scale_prior if config.scheme != "no_dw" else ScalePrior.fixed(1.0))
        weights = assign_weights(dense, sets, scheme)
        stage1 = fit_stage1(dense, bp, weights, tau_prior, cfg, workers=config.workers)
        timings["stage1"] = time.perf_counter() - t0
        bundle.samples["stage1"] = stage1
        basic = list(stage1.meta["basic"])
        bundle.summaries += _summary_rows(
            "stage1", stage1,
            [f"{p}[{t}]" for p in ("mu_p2", "beta", "mu_star") for t in basic]
            + [n for n in _reported(stage1) if not n.startswith("mu_star")])
        bundle.convergence += _convergence_rows("stage1", stage1)
        bundle.predictive = predictive_priors(stage1, sparse.treatments)
        final_prior = stage2_mu_prior(sparse, bundle.predictive)
        t0 = time.perf_counter()
        final = fit_stage2(sparse, bundle.predictive, tau_prior, cfg, workers=config.workers)

    if final is not None:
        stage = "stage2" if config.model == "borrow" else config.model
        timings[stage] = time.perf_counter() - t0
        bundle.samples[stage] = final
        bundle.treatments = final_network.treatments
        bundle.summaries += _summary_rows(stage, final, _reported(final))
        bundle.convergence += _convergence_rows(stage, final)
        mu = basic_draws(final)
        bundle.league = league_table(mu, final_network.treatments)
        bundle.ranks = rank_probabilities(mu, final_network.treatments, config.direction)
        if config.node_split:
            t0 = time.perf_counter()
            for comp in splittable_comparisons(final_network):
                bundle.consistency.append(
                    node_split(final_network, comp, final_prior, tau_prior, cfg, config.workers))
            timings["node_split"] = time.perf_counter() - t0

    rhats = [r["rhat"] for r in bundle.convergence if r["rhat"] is not None]
    bad = [r for r in bundle.convergence if r["rhat"] is not None
           and not (r["rhat"] < config.rhat_threshold)]
    if bad and not config.allow_unconverged:
        bundle.converged = False
        names = ", ".join(f"{r['stage']}:{r['name']}" for r in bad[:10])
        bundle.messages.append(f"R-hat >= {config.rhat_threshold} (or undefined) for {names}")
    bundle.manifest = {
        "package_version": __version__,
        "analysis": config.name,
        "config": config.to_dict(),
        "inputs": {k: {"path": p, "sha256": _sha256(p)} for k, p in inputs.items()},
        "seed": cfg.seed,
        "config_hash": hashlib.sha256(
            json.dumps({"config": {k: v for k, v in config.to_dict().items() if k != "out"},
                        "inputs": {k: _sha256(p) for k, p in inputs.items()}}, sort_keys=True).encode()
        ).hexdigest(),
        "max_rhat": max(rhats) if rhats else None,
        "converged": bundle.converged,
        "timings_seconds": {k: round(v, 3) for k, v in timings.items()},
    }
    return bundle


# -- emission -----------------------------------------------------------------------

def _fmt(x, digits: Optional[int]) -> str:
    if x is None:
        return ""
    x = float(x)
    if not math.isfinite(x):
        return "NA" if math.isnan(x) else ("Inf" if x > 0 else "-Inf")
    return repr(x) if digits is None else f"{x:.{digits}f}"


def emit_report(bundle: ReportBundle, directory) -> list[Path]:
    """Write the report files; an unconverged run only gets the convergence report."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {directory}: {exc.strerror}") from None
    full = bundle.config.rounding == "full"
    d_sum, d_league, d_cons = (None, None, None) if full else (3, 3, 2)
    written = []

    def out(name):
        p = directory / name
        written.append(p)
        return p

    with out("convergence.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "name", "rhat", "ess", "mcse_mean", "acceptance"])
        for r in bundle.convergence:
            w.writerow([r["stage"], r["name"], _fmt(r["rhat"], None if full else 4),
                        _fmt(r["ess"], None if full else 1), _fmt(r["mcse"], None if full else 5),
                        _fmt(r["acceptance"], None if full else 3)])
    if bundle.converged:
        with out("summaries.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stage", "parameter", "mean", "sd", "q2.5", "median", "q97.5"])
            for r in bundle.summaries:
                w.writerow([r["stage"], r["parameter"]] + [_fmt(r[k], d_sum) for k in
                                                          ("mean", "sd", "q025", "median", "q975")])
        if bundle.league is not None:
            write_league_table(bundle.league, out("league_table.csv"), d_league if d_league else 17)
        write_sucra(bundle.ranks, out("sucra.csv"), 3 if not full else 17)
        write_consistency(bundle.consistency, out("consistency.csv"), d_cons if d_cons else 17)
        if bundle.consistency:
            write_density_pairs(bundle.consistency, out("density_pairs.csv"))
        if bundle.beta_priors is not None:
            write_beta_priors(bundle.beta_priors, out("beta_priors.csv"))
        if bundle.predictive:
            write_predictive_priors(bundle.predictive, out("predictive_priors.csv"))
        if bundle.config.traces:
            for stage, samples in bundle.samples.items():
                written += export_traces(samples, directory / "traces" / stage)
    manifest = dict(bundle.manifest, messages=list(bundle.messages))
    out("manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return written
