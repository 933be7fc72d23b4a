"""Adaptive random-walk Metropolis-within-Gibbs sampler and posterior tools.

The sampler works on a dictionary state ``{block name: ndarray}``. A target is
any callable ``target(state) -> float`` returning the log posterior. Targets
may additionally implement:

``conditional(state, name, transported=False) -> float``
    log density up to terms that do not involve block ``name`` (speed only).
    For transported moves it must also cover every block the move carries.
``block_terms(state, name) -> ndarray``
    required for ``elementwise`` blocks: one log-density term per element of
    the leading axis. Elements must be conditionally independent given the
    rest of the state, so all of them can be updated in one vectorized step.
``transport(state, name, new_value) -> (updates, log_jacobian)``
    used by blocks with ``transport=True``. Besides the plain update, such a
    block gets a second move in which other blocks are moved deterministically
    along with it (e.g. random effects carried with their mean). ``updates``
    maps block names to new values and ``log_jacobian`` is the log absolute
    determinant of that map.
"""

from __future__ import annotations

import csv
import logging
import math
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SUPPORTS = ("unbounded", "positive", "unit-interval")


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 2
    iterations: int = 50_000
    burn_in: int = 10_000
    thin: int = 1
    seed: int = 12345
    adapt_window: Optional[int] = None

    def __post_init__(self):
        if self.iterations <= 0 or self.burn_in < 0 or self.burn_in >= self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.n_chains < 1:
            raise ValueError("n_chains must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.adapt_window is not None and not 0 <= self.adapt_window <= self.burn_in:
            raise ValueError("adapt_window must lie within the burn-in")

    @property
    def adaptation(self) -> int:
        return self.burn_in if self.adapt_window is None else self.adapt_window

    @property
    def n_kept(self) -> int:
        return len(range(self.burn_in, self.iterations, self.thin))

    def chain_seed(self, chain: int) -> int:
        return self.seed ^ chain


@dataclass
class ParameterBlock:
    """A group of parameters updated together.

    ``initial`` holds the starting value in constrained units. For
    ``elementwise`` blocks the leading axis indexes independent elements;
    trailing axes (if any) are proposed jointly per element. ``mask`` marks
    entries that are free; masked-out entries stay at their initial value.
    """

    name: str
    initial: np.ndarray
    support: str = "unbounded"
    elementwise: bool = False
    transport: bool = False
    jitter: float = 0.0
    labels: Optional[Sequence[str]] = None
    store: bool = True
    mask: Optional[np.ndarray] = None
    init_scale: float = 0.1

    def __post_init__(self):
        self.initial = np.array(self.initial, dtype=float)
        if self.initial.ndim == 0:
            self.initial = self.initial.reshape(1)
        if self.support not in SUPPORTS:
            raise ValueError(f"unknown support {self.support!r}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.initial.shape:
                raise ValueError(f"block {self.name!r}: mask shape mismatch")
        if not _in_support(self.initial, self.support, self.mask):
            raise ValueError(f"block {self.name!r}: initial values outside {self.support} support")
        if self.labels is not None and len(self.labels) != self.initial.size:
            raise ValueError(f"block {self.name!r}: {len(self.labels)} labels for {self.initial.size} values")

    @property
    def dimension(self) -> int:
        return int(self.initial.size)

    def parameter_names(self) -> list[str]:
        if self.labels is not None:
            return list(self.labels)
        if self.initial.size == 1:
            return [self.name]
        return [f"{self.name}[{i}]" for i in range(self.initial.size)]


@dataclass(frozen=True)
class PosteriorSummary:
    mean: float
    sd: float
    q025: float
    median: float
    q975: float

    def format(self, digits: int = 2) -> str:
        return f"{self.mean:.{digits}f} [{self.q025:.{digits}f}, {self.q975:.{digits}f}]"


@dataclass
class PosteriorSamples:
    """Draws per scalar parameter, each an array of shape (chains, draws)."""

    draws: dict[str, np.ndarray]
    config: Optional[SamplerConfig] = None
    acceptance: dict[str, float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.draws[name]
        except KeyError:
            raise KeyError(f"no samples for parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.draws

    @property
    def names(self) -> list[str]:
        return list(self.draws)

    @property
    def n_chains(self) -> int:
        return next(iter(self.draws.values())).shape[0]

    @property
    def n_draws(self) -> int:
        return next(iter(self.draws.values())).shape[1]

    def pooled(self, name: str) -> np.ndarray:
        return self[name].reshape(-1)

    def add(self, name: str, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=float)
        ref = next(iter(self.draws.values()))
        if values.shape != ref.shape:
            raise ValueError(f"derived parameter {name!r} has shape {values.shape}, expected {ref.shape}")
        self.draws[name] = values

    def subset(self, names: Sequence[str]) -> "PosteriorSamples":
        return PosteriorSamples(
            {n: self[n] for n in names}, self.config, dict(self.acceptance), list(self.warnings), dict(self.meta)
        )


# -- transforms ---------------------------------------------------------------

def _in_support(x, support, mask=None):
    x = np.asarray(x)
    if mask is not None:
        x = x[mask]
    if not np.all(np.isfinite(x)):
        return False
    if support == "positive":
        return bool(np.all(x > 0))
    if support == "unit-interval":
        return bool(np.all((x > 0) & (x < 1)))
    return True


def _to_unconstrained(x, support):
    if support == "positive":
        return np.log(x)
    if support == "unit-interval":
        return np.log(x) - np.log1p(-x)
    return np.array(x, dtype=float)


def _from_unconstrained(z, support):
    if support == "positive":
        return np.exp(z)
    if support == "unit-interval":
        return 1.0 / (1.0 + np.exp(-z))
    return z


def _log_jacobian(z, support):
    """log |dx/dz| per entry."""
    if support == "positive":
        return z
    if support == "unit-interval":
        return -(np.logaddexp(0.0, z) + np.logaddexp(0.0, -z))
    return None


# -- moves --------------------------------------------------------------------

def _rm_rate(t: int) -> float:
    return (t + 1.0) ** -0.6


class _Move:
    def __init__(self, block: ParameterBlock, transported: bool):
        self.block = block
        self.name = block.name
        self.transported = transported
        self.label = f"{block.name}:transport" if transported else block.name
        self.support = block.support
        self.free = block.mask
        self.accepted = 0.0
        self.proposed = 0

    def record(self, rate: float, t: int, burn_in: int):
        if t >= burn_in:
            self.accepted += rate
            self.proposed += 1

    @property
    def acceptance(self) -> float:
        return self.accepted / self.proposed if self.proposed else float("nan")


class _JointMove(_Move):
    def __init__(self, block, transported):
        super().__init__(block, transported)
        d = block.dimension
        self.d = d
        self.target_rate = 0.44 if d == 1 else 0.25
        self.log_scale = math.log(block.init_scale)
        self.chol = None
        self.n_hist = 0
        self.mean = np.zeros(d)
        self.m2 = np.zeros((d, d))

    def _track(self, z, t):
        self.n_hist += 1
        flat = z.reshape(-1)
        delta = flat - self.mean
        self.mean += delta / self.n_hist
        self.m2 += np.outer(delta, flat - self.mean)
        if self.d > 1 and t % 100 == 99 and self.n_hist >= max(200, 10 * self.d):
            cov = self.m2 / (self.n_hist - 1)
            try:
                chol = np.linalg.cholesky(cov + 1e-10 * np.eye(self.d))
            except np.linalg.LinAlgError:
                return
            if self.chol is None:
                self.log_scale = math.log(2.38 / math.sqrt(self.d))
            self.chol = chol

    def step(self, sampler: "_ChainSampler", t: int):
        state, unc = sampler.state, sampler.unc
        z = unc[self.name]
        eps = sampler.rng.standard_normal(z.shape)
        if self.chol is not None:
            eps = (self.chol @ eps.reshape(-1)).reshape(z.shape)
        if self.free is not None:
            eps = eps * self.free
        z_new = z + math.exp(self.log_scale) * eps
        x_new = _from_unconstrained(z_new, self.support)
        proposal = dict(state)
        proposal[self.name] = x_new
        log_ratio = 0.0
        updates = {}
        if self.transported:
            updates, log_jac = sampler.target.transport(state, self.name, x_new)
            proposal.update(updates)
            log_ratio += log_jac
        lj_new = _log_jacobian(z_new, self.support)
        if lj_new is not None:
            lj_old = _log_jacobian(z, self.support)
            if self.free is not None:
                lj_new, lj_old = lj_new[self.free], lj_old[self.free]
            log_ratio += float(np.sum(lj_new) - np.sum(lj_old))
        lp_new = sampler.conditional(proposal, self.name, self.transported)
        lp_old = sampler.conditional(state, self.name, self.transported)
        log_ratio += lp_new - lp_old
        if not math.isfinite(log_ratio):
            log_ratio = -math.inf
        rate = math.exp(min(0.0, log_ratio))
        if math.log(sampler.rng.random()) < log_ratio:
            sampler.state = proposal
            unc[self.name] = z_new
            for name, value in updates.items():
                unc[name] = _to_unconstrained(value, sampler.supports[name])
        if t < sampler.adapt:
            self.log_scale += _rm_rate(t) * (rate - self.target_rate)
            self._track(unc[self.name], t)
        self.record(rate, t, sampler.burn_in)


class _ElementwiseMove(_Move):
    def __init__(self, block, transported=False):
        super().__init__(block, transported)
        shape = block.initial.shape
        self.n = shape[0]
        self.trailing = shape[1:]
        per_elem = int(np.prod(self.trailing)) if self.trailing else 1
        self.target_rate = 0.44 if per_elem == 1 else 0.3
        self.log_scale = np.full(self.n, math.log(block.init_scale))
        self.bshape = (self.n,) + (1,) * len(self.trailing)
        axes = tuple(range(1, len(shape)))
        self.sum_axes = axes
        self.scale = None

    def _elem_sum(self, a):
        if self.free is not None:
            a = np.where(self.free, a, 0.0)
        return a.sum(axis=self.sum_axes) if self.sum_axes else a

    def step(self, sampler: "_ChainSampler", t: int):
        state, unc = sampler.state, sampler.unc
        z = unc[self.name]
        adapting = t < sampler.adapt
        if adapting or self.scale is None:
            self.scale = np.exp(self.log_scale).reshape(self.bshape)
            if self.free is not None:
                self.scale = self.scale * self.free
        z_new = z + self.scale * sampler.rng.standard_normal(z.shape)
        x_new = _from_unconstrained(z_new, self.support)
        proposal = dict(state)
        proposal[self.name] = x_new
        old_terms = sampler.target.block_terms(state, self.name)
        new_terms = sampler.target.block_terms(proposal, self.name)
        log_ratio = new_terms - old_terms
        lj_new = _log_jacobian(z_new, self.support)
        if lj_new is not None:
            log_ratio = log_ratio + self._elem_sum(lj_new) - self._elem_sum(_log_jacobian(z, self.support))
        log_ratio[np.isnan(log_ratio)] = -np.inf
        accept = np.log(sampler.rng.random(self.n)) < log_ratio
        if adapting or t >= sampler.burn_in:
            rates = np.exp(np.minimum(0.0, log_ratio))
            if adapting:
                self.log_scale += _rm_rate(t) * (rates - self.target_rate)
            self.record(float(np.add.reduce(rates)) / self.n, t, sampler.burn_in)
        if accept.any():
            mask = accept.reshape(self.bshape)
            unc[self.name] = np.where(mask, z_new, z)
            new_state = dict(state)
            new_state[self.name] = np.where(mask, x_new, state[self.name])
            sampler.state = new_state


class _SequentialMove(_Move):
    """Element-by-element fallback for elementwise blocks without ``block_terms``."""

    def __init__(self, block):
        super().__init__(block, False)
        self.n = block.initial.shape[0]
        self.target_rate = 0.44
        self.log_scale = np.full(self.n, math.log(block.init_scale))

    def step(self, sampler, t):
        rates = np.zeros(self.n)
        for e in range(self.n):
            state, unc = sampler.state, sampler.unc
            z = unc[self.name]
            eps = sampler.rng.standard_normal(z.shape[1:])
            if self.free is not None:
                eps = eps * self.free[e]
            z_new = z.copy()
            z_new[e] = z[e] + math.exp(self.log_scale[e]) * eps
            x_new = _from_unconstrained(z_new, self.support)
            proposal = dict(state)
            proposal[self.name] = x_new
            log_ratio = sampler.conditional(proposal, self.name) - sampler.conditional(state, self.name)
            lj_new = _log_jacobian(z_new[e], self.support)
            if lj_new is not None:
                log_ratio += float(np.sum(lj_new) - np.sum(_log_jacobian(z[e], self.support)))
            if not math.isfinite(log_ratio):
                log_ratio = -math.inf
            rates[e] = math.exp(min(0.0, log_ratio))
            if math.log(sampler.rng.random()) < log_ratio:
                sampler.state = proposal
                unc[self.name] = z_new
        if t < sampler.adapt:
            self.log_scale += _rm_rate(t) * (rates - self.target_rate)
        self.record(float(rates.mean()), t, sampler.burn_in)


class _ChainSampler:
    def __init__(self, target, blocks: Sequence[ParameterBlock], config: SamplerConfig, chain: int):
        self.target = target
        self.blocks = list(blocks)
        self.config = config
        self.rng = np.random.default_rng(config.chain_seed(chain))
        self.burn_in = config.burn_in
        self.adapt = config.adaptation
        self.supports = {b.name: b.support for b in self.blocks}
        self._has_conditional = hasattr(target, "conditional")
        self.state, self.unc = {}, {}
        for b in self.blocks:
            z = _to_unconstrained(b.initial, b.support)
            if b.jitter:
                j = self.rng.uniform(-b.jitter, b.jitter, size=z.shape)
                if b.mask is not None:
                    j = j * b.mask
                z = z + j
            self.unc[b.name] = z
            self.state[b.name] = _from_unconstrained(z, b.support)
        self._check_initial()
        self.moves: list[_Move] = []
        for b in self.blocks:
            if b.elementwise:
                if hasattr(target, "block_terms"):
                    self.moves.append(_ElementwiseMove(b))
                else:
                    self.moves.append(_SequentialMove(b))
            else:
                self.moves.append(_JointMove(b, False))
            if b.transport:
                if not hasattr(target, "transport"):
                    raise SamplerError(f"block {b.name!r} requests transport moves but the target has none")
                self.moves.append(_JointMove(b, True))

    def conditional(self, state, name, transported=False) -> float:
        if self._has_conditional:
            if transported:
                return float(self.target.conditional(state, name, transported=True))
            return float(self.target.conditional(state, name))
        return float(self.target(state))

    def _check_initial(self):
        lp = float(self.target(self.state))
        if math.isfinite(lp):
            return
        for b in self.blocks:
            if not _in_support(self.state[b.name], b.support, b.mask):
                raise SamplerError(f"non-finite log posterior at initialization: block {b.name!r}")
        for b in self.blocks:
            if b.elementwise and hasattr(self.target, "block_terms"):
                bad = not np.all(np.isfinite(self.target.block_terms(self.state, b.name)))
            else:
                bad = not math.isfinite(self.conditional(self.state, b.name))
            if bad:
                raise SamplerError(f"non-finite log posterior at initialization: block {b.name!r}")
        raise SamplerError(f"non-finite log posterior at initialization: block {self.blocks[0].name!r}")

    def run(self):
        cfg = self.config
        stored = [b for b in self.blocks if b.store]
        keep = cfg.n_kept
        out = {b.name: np.empty((keep,) + b.initial.shape) for b in stored}
        k = 0
        for t in range(cfg.iterations):
            for move in self.moves:
                move.step(self, t)
            if t >= cfg.burn_in and (t - cfg.burn_in) % cfg.thin == 0:
                for b in stored:
                    out[b.name][k] = self.state[b.name]
                k += 1
        acceptance = {m.label: m.acceptance for m in self.moves}
        warnings = [
            f"block {m.label!r}: no proposals accepted after adaptation"
            for m in self.moves
            if m.proposed and m.accepted == 0
        ]
        return out, acceptance, warnings


def _run_one(args):
    target, blocks, config, chain = args
    return _ChainSampler(target, blocks, config, chain).run()


def run_chains(
    target: Callable[[dict], float],
    blocks: Sequence[ParameterBlock],
    config: SamplerConfig,
    workers: int = 1,
) -> PosteriorSamples:
    """Run ``config.n_chains`` independent chains and collect retained draws.

    Chain ``c`` draws from a PCG64 stream seeded with ``config.seed ^ c``, so
    results do not depend on ``workers``.
    """
    names = [b.name for b in blocks]
    if len(set(names)) != len(names):
        raise ValueError("block names must be unique")
    jobs = [(target, list(blocks), config, c) for c in range(config.n_chains)]
    if workers > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(workers, config.n_chains)) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]

    draws: dict[str, np.ndarray] = {}
    for b in blocks:
        if not b.store:
            continue
        stacked = np.stack([r[0][b.name] for r in results])
        flat = stacked.reshape(config.n_chains, config.n_kept, -1)
        for i, label in enumerate(b.parameter_names()):
            draws[label] = np.ascontiguousarray(flat[:, :, i])
    acceptance = {}
    for label in results[0][1]:
        acceptance[label] = float(np.mean([r[1][label] for r in results]))
    warnings = []
    for c, r in enumerate(results):
        warnings.extend(f"chain {c}: {w}" for w in r[2])
    for w in warnings:
        logger.warning(w)
    return PosteriorSamples(draws, config, acceptance, warnings)


# -- diagnostics and summaries ---------------------------------------------

def _chains(samples, parameter) -> np.ndarray:
    if isinstance(samples, PosteriorSamples):
        return np.asarray(samples[parameter], dtype=float)
    return np.atleast_2d(np.asarray(samples, dtype=float))


def gelman_rubin(samples, parameter: Optional[str] = None, split: bool = True) -> float:
    """Potential scale reduction factor.

    With ``split`` (the default) each chain is cut into halves before the
    between/within comparison, which also flags within-chain drift.
    ``samples`` is a PosteriorSamples (with ``parameter``) or an array of shape
    (chains, draws).
    """
    x = _chains(samples, parameter)
    m, n = x.shape
    if m < 2:
        raise ValueError("diagnostic requires >=2 chains")
    if n < 10:
        raise ValueError("diagnostic requires >=10 draws per chain")
    if split:
        half = n // 2
        x = np.concatenate([x[:, :half], x[:, n - half:]], axis=0)
        n = half
    chain_means = x.mean(axis=1)
    w = x.var(axis=1, ddof=1).mean()
    b = n * chain_means.var(ddof=1)
    if w == 0:
        return 1.0 if b == 0 else math.inf
    var_plus = (n - 1) / n * w + b / n
    return float(math.sqrt(var_plus / w))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.shape[-1]
    size = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean(axis=-1, keepdims=True)
    f = np.fft.rfft(xc, n=size, axis=-1)
    acov = np.fft.irfft(f * np.conjugate(f), n=size, axis=-1)[..., :n]
    return acov / n


def effective_sample_size(samples, parameter: Optional[str] = None) -> float:
    """Multi-chain ESS with Geyer's initial monotone sequence estimator."""
    x = _chains(samples, parameter)
    m, n = x.shape
    if n < 4:
        return float(m * n)
    acov = _autocov(x)
    chain_var = acov[:, 0] * n / (n - 1.0)
    w = chain_var.mean()
    var_plus = w * (n - 1.0) / n
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if var_plus <= 0:
        return float(m * n)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # pairwise sums must stay positive and non-increasing
    total = 0.0
    prev = math.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        total += pair
        prev = pair
        t += 2
    tau = -1.0 + 2.0 * total
    tau = max(tau, 1.0 / math.log10(m * n + 10))
    return float(m * n / tau)


def mcse_mean(samples, parameter: Optional[str] = None) -> float:
    x = _chains(samples, parameter)
    return float(x.std(ddof=1) / math.sqrt(effective_sample_size(x)))


def mcse_sd(samples, parameter: Optional[str] = None) -> float:
    """Monte-Carlo SE of the posterior SD (delta method on the second moment)."""
    x = _chains(samples, parameter)
    sq = (x - x.mean()) ** 2
    sd = x.std(ddof=1)
    if sd == 0:
        return 0.0
    se_var = sq.std(ddof=1) / math.sqrt(effective_sample_size(sq))
    return float(se_var / (2 * sd))


def summarize(samples, parameter: Optional[str] = None) -> PosteriorSummary:
    x = _chains(samples, parameter).reshape(-1)
    if x.size == 0:
        raise ValueError("cannot summarize an empty sample")
    q025, median, q975 = np.quantile(x, [0.025, 0.5, 0.975])
    sd = float(x.std(ddof=1)) if x.size > 1 else 0.0
    return PosteriorSummary(float(x.mean()), sd, float(q025), float(median), float(q975))


# -- trace export -------------------------------------------------------------

def _safe_filename(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.+-]+", "_", name).strip("_")


def export_traces(samples: PosteriorSamples, directory, names: Optional[Sequence[str]] = None) -> list[Path]:
    """Write one CSV per parameter with columns chain, iteration, value.

    ``traces_index.csv`` maps each file back to its parameter name.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = samples.config
    start, step = (cfg.burn_in, cfg.thin) if cfg else (0, 1)
    paths = []
    index = []
    for name in names or samples.names:
        stem = _safe_filename(name)
        while any(stem == s for _, s in index):
            stem += "_"
        path = directory / f"trace_{stem}.csv"
        x = samples[name]
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["chain", "iteration", "value"])
            for c in range(x.shape[0]):
                for k, v in enumerate(x[c]):
                    w.writerow([c + 1, start + k * step + 1, repr(float(v))])
        index.append((name, stem))
        paths.append(path)
    with (directory / "traces_index.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "file"])
        for name, stem in index:
            w.writerow([name, f"trace_{stem}.csv"])
    return paths


def load_traces(directory) -> PosteriorSamples:
    """Read back traces written by :func:`export_traces`."""
    directory = Path(directory)
    index_path = directory / "traces_index.csv"
    if not index_path.exists():
        raise FileNotFoundError(f"no traces_index.csv in {directory}")
    draws = {}
    with index_path.open(newline="", encoding="utf-8") as fh:
        entries = [(r["parameter"], r["file"]) for r in csv.DictReader(fh)]
    for name, fname in entries:
        chains: dict[int, list[float]] = {}
        with (directory / fname).open(newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                chains.setdefault(int(rec["chain"]), []).append(float(rec["value"]))
        draws[name] = np.array([chains[c] for c in sorted(chains)])
    return PosteriorSamples(draws)
