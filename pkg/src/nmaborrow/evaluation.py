"""Node-splitting, Bayesian p-values, rank probabilities, SUCRA and league tables."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from decimal import Decimal
from itertools import combinations
from pathlib import Path
from typing import Mapping, Optional, Sequence

import networkx as nx
import numpy as np

from .core import DataError, Network, require_connected
from .mcmc import PosteriorSamples, PosteriorSummary, SamplerConfig, summarize
from .nma import MuPrior, NmaData, NmaPosterior, TauPrior, _fit, basic_draws, relative_effect

logger = logging.getLogger(__name__)

DIRECTIONS = ("lower-better", "higher-better")


def bayes_p(p_gt0: float) -> float:
    """Two-sided Bayesian p-value 2 * min(P, 1 - P)."""
    p = float(p_gt0)
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability must lie in [0, 1], got {p_gt0}")
    # decimal arithmetic on the shortest repr, so bayes_p(0.94) is exactly 0.12
    d = Decimal(repr(p))
    return float(2 * min(d, 1 - d))


# -- node-splitting -------------------------------------------------------------

@dataclass
class NodeSplitResult:
    comparison: tuple[str, str]
    direct: PosteriorSummary
    indirect: PosteriorSummary
    difference: PosteriorSummary
    p_gt0: float
    p_value: float
    direct_draws: Optional[np.ndarray] = None
    indirect_draws: Optional[np.ndarray] = None

    @property
    def label(self) -> str:
        j, l = self.comparison
        return f"{l} vs {j}"


def _pair_edges_removed(network: Network, j: str, l: str) -> nx.Graph:
    g = nx.Graph()
    g.add_nodes_from(network.treatments)
    for s in network.studies:
        for a, b in combinations(s.treatments, 2):
            if {a, b} != {j, l}:
                g.add_edge(a, b)
    return g


def check_splittable(network: Network, comparison: tuple[str, str]) -> None:
    j, l = comparison
    for t in (j, l):
        if t not in network.treatments:
            raise DataError(f"unknown treatment {t!r}")
    if j == l:
        raise DataError("cannot split a treatment against itself")
    if not any(j in s.treatments and l in s.treatments for s in network.studies):
        raise DataError(f"{l} vs {j}: no direct evidence to split")
    g = _pair_edges_removed(network, j, l)
    if not nx.has_path(g, j, l):
        raise DataError(f"{l} vs {j}: comparison not splittable (no indirect path)")


def splittable_comparisons(network: Network) -> list[tuple[str, str]]:
    """Comparisons with direct evidence and an indirect path, in sorted order."""
    out = []
    pairs = sorted({tuple(sorted(p)) for s in network.studies for p in combinations(s.treatments, 2)})
    for j, l in pairs:
        if nx.has_path(_pair_edges_removed(network, j, l), j, l):
            out.append((j, l))
    return out


def fit_node_split(
    network: Network,
    comparison: tuple[str, str],
    mu_prior: Optional[MuPrior] = None,
    tau_prior: Optional[TauPrior] = None,
    config: Optional[SamplerConfig] = None,
    workers: int = 1,
) -> PosteriorSamples:
    """NMA in which studies comparing j and l inform ``d_direct`` for that contrast."""
    require_connected(network)
    check_splittable(network, comparison)
    config = config or SamplerConfig()
    data = NmaData(network, split=tuple(comparison))
    m, v = (mu_prior or MuPrior()).arrays(data.basic)
    target = NmaPosterior(data, m, v, tau_prior or TauPrior())
    samples = _fit(target, config, workers=workers)
    samples.meta["split"] = tuple(comparison)
    return samples


def node_split(
    network: Network,
    comparison: tuple[str, str],
    mu_prior: Optional[MuPrior] = None,
    tau_prior: Optional[TauPrior] = None,
    config: Optional[SamplerConfig] = None,
    workers: int = 1,
) -> NodeSplitResult:
    """Direct vs indirect evidence for the effect of ``l`` relative to ``j``."""
    j, l = comparison
    samples = fit_node_split(network, comparison, mu_prior, tau_prior, config, workers)
    mu = basic_draws(samples)
    direct = samples["d_direct"]
    indirect = relative_effect(mu, j, l)
    diff = direct - indirect
    p = float(np.mean(diff > 0))
    return NodeSplitResult(
        (j, l), summarize(direct), summarize(indirect), summarize(diff), p, bayes_p(p),
        direct.reshape(-1), indirect.reshape(-1),
    )


def write_consistency(results: Sequence[NodeSplitResult], path, digits: int = 2) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["comparison", "direct", "indirect", "difference", "P", "p_value"])
        for r in results:
            w.writerow([r.label, r.direct.format(digits), r.indirect.format(digits),
                        r.difference.format(digits), f"{r.p_gt0:.{digits}f}", f"{r.p_value:.{digits}f}"])
    return path


def write_density_pairs(results: Sequence[NodeSplitResult], path) -> Path:
    """Long-format direct and indirect draws for external density plots."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["comparison", "source", "draw", "value"])
        for r in results:
            for source, x in (("direct", r.direct_draws), ("indirect", r.indirect_draws)):
                if x is None:
                    continue
                for k, v in enumerate(x):
                    w.writerow([r.label, source, k + 1, repr(float(v))])
    return path


# -- ranking ---------------------------------------------------------------------

@dataclass
class RankMatrix:
    """``probs[j, r]``: probability that ``treatments[j]`` has rank r + 1."""

    treatments: tuple[str, ...]
    probs: np.ndarray
    direction: str = "lower-better"

    def row(self, treatment: str) -> np.ndarray:
        return self.probs[self.treatments.index(treatment)]


def rank_probabilities(
    mu_samples: Mapping[str, np.ndarray],
    treatments: Sequence[str],
    direction: str = "lower-better",
) -> RankMatrix:
    """Rank treatments per draw by their effect against the reference.

    ``mu_samples`` maps each treatment to its draws vs the reference (the
    reference itself maps to zeros). Ties are broken by position in
    ``treatments``.
    """
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}")
    treatments = tuple(treatments)
    missing = [t for t in treatments if t not in mu_samples]
    if missing:
        raise KeyError(f"no samples for treatments {missing}")
    x = np.stack([np.asarray(mu_samples[t], dtype=float).reshape(-1) for t in treatments])
    if direction == "higher-better":
        x = -x
    T, N = x.shape
    order = np.argsort(x, axis=0, kind="stable")
    srt = np.take_along_axis(x, order, axis=0)
    if T > 1 and np.any(srt[1:] == srt[:-1]):
        logger.warning("tied effects in some draws; ties broken by treatment order")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.arange(T)[:, None], axis=0)
    counts = np.zeros((T, T))
    for j in range(T):
        counts[j] = np.bincount(ranks[j], minlength=T)
    return RankMatrix(treatments, counts / N, direction)


def rank_probabilities_from_samples(samples: PosteriorSamples, direction: str = "lower-better") -> RankMatrix:
    mu = basic_draws(samples)
    return rank_probabilities(mu, samples.meta["treatments"], direction)


def sucra(ranks: RankMatrix, treatment: str) -> float:
    """Surface under the cumulative ranking curve, sum_{r<T} CumP(r) / (T - 1)."""
    T = len(ranks.treatments)
    if T < 2:
        raise ValueError("SUCRA is undefined for a single treatment")
    cum = np.cumsum(ranks.row(treatment))
    return float(cum[:-1].sum() / (T - 1))


def sucra_table(ranks: RankMatrix) -> dict[str, float]:
    return {t: sucra(ranks, t) for t in ranks.treatments}


def write_sucra(ranks: Optional[RankMatrix], path, digits: int = 3) -> Path:
    """SUCRA and rank probabilities, one row per treatment, best SUCRA first."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        T = len(ranks.treatments) if ranks is not None else 0
        w.writerow(["treatment", "sucra"] + [f"p_rank{r + 1}" for r in range(T)])
        if ranks is not None and T > 1:
            table = sucra_table(ranks)
            for t in sorted(ranks.treatments, key=lambda t: (-round(table[t], 12), ranks.treatments.index(t))):
                w.writerow([t, f"{table[t]:.{digits}f}"] + [f"{p:.{digits}f}" for p in ranks.row(t)])
    return path


# -- league table ---------------------------------------------------------------------

@dataclass
class LeagueTable:
    """``entries[(j, l)]`` summarizes mu_jl = mu_1l - mu_1j (l relative to j)."""

    treatments: tuple[str, ...]
    entries: dict[tuple[str, str], PosteriorSummary]

    def __getitem__(self, pair: tuple[str, str]) -> PosteriorSummary:
        if pair[0] == pair[1]:
            raise KeyError("the league table has no diagonal entries")
        return self.entries[pair]

    def __len__(self):
        return len(self.entries)


def _mirror(s: PosteriorSummary) -> PosteriorSummary:
    return PosteriorSummary(-s.mean, s.sd, -s.q975, -s.median, -s.q025)


def league_table(mu_samples: Mapping[str, np.ndarray], treatments: Sequence[str]) -> LeagueTable:
    """All ordered pairs; each (l, j) entry is the exact mirror of (j, l)."""
    treatments = tuple(treatments)
    entries = {}
    for a, j in enumerate(treatments):
        for l in treatments[a + 1:]:
            s = summarize(relative_effect(mu_samples, j, l))
            entries[(j, l)] = s
            entries[(l, j)] = _mirror(s)
    return LeagueTable(treatments, entries)


def format_cell(s: PosteriorSummary, digits: int = 3) -> str:
    return f"{s.mean:.{digits}f} ({s.q025:.{digits}f}, {s.q975:.{digits}f})"


def write_league_table(table: LeagueTable, path, digits: int = 3) -> Path:
    """T x T grid: the cell in row r, column c is the effect of r relative to c.

    With lower-is-better outcomes a negative cell favours the row treatment.
    The diagonal is blank.
    """
    path = Path(path)
    ts = table.treatments
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + list(ts))
        for r in ts:
            row = [r]
            for c in ts:
                row.append("" if r == c else (format_cell(table.entries[(c, r)], digits)
                                              if (c, r) in table.entries else ""))
            w.writerow(row)
    return path
