"""Command-line interface: fit, node-split, priors, rank and validate."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click

from .borrowing import (
    ScalePrior,
    WeightScheme,
    assign_weights,
    fit_stage1,
    predictive_priors,
    write_beta_priors,
    write_predictive_priors,
)
from .core import DataError, connectivity, direct_comparisons, treatment_sets
from .evaluation import (
    node_split,
    rank_probabilities,
    splittable_comparisons,
    sucra_table,
    write_consistency,
    write_density_pairs,
    write_sucra,
)
from .io import load_network
from .mcmc import SamplerConfig, load_traces
from .nma import TauPrior
from .pipeline import DW_SCHEMES, AnalysisConfig, emit_report, run_analysis
from .priors import data_based_beta_priors, expert_beta_priors, load_expert_responses, median_pooled_sd, pool_experts

EXIT_DATA = 1
EXIT_UNCONVERGED = 3


def _fail(message: str, code: int = EXIT_DATA):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _sampler(ctx, base: SamplerConfig = SamplerConfig()) -> SamplerConfig:
    o = ctx.obj
    return SamplerConfig(
        n_chains=o["chains"] if o["chains"] is not None else base.n_chains,
        iterations=o["iters"] if o["iters"] is not None else base.iterations,
        burn_in=o["burn_in"] if o["burn_in"] is not None else base.burn_in,
        thin=base.thin,
        seed=o["seed"] if o["seed"] is not None else base.seed,
        adapt_window=base.adapt_window,
    )


@click.group()
@click.option("--seed", type=int, default=None, help="Master seed; chain c uses seed XOR c.")
@click.option("--chains", type=int, default=None, help="Number of chains (default 2).")
@click.option("--iters", type=int, default=None, help="Iterations per chain (default 50000).")
@click.option("--burn-in", "burn_in", type=int, default=None, help="Burn-in iterations (default 10000).")
@click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
@click.pass_context
def main(ctx, seed, chains, iters, burn_in, out, verbose):
    """Bayesian network meta-analysis with borrowing from a dense network."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    ctx.ensure_object(dict)
    ctx.obj.update(seed=seed, chains=chains, iters=iters, burn_in=burn_in, out=out)


def _out_dir(ctx, default="results") -> Path:
    return Path(ctx.obj["out"] or default)


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="key = value config file.")
@click.option("--model", type=click.Choice(["naive", "standard", "pairwise", "borrow"]), default=None)
@click.option("--beta-source", type=click.Choice(["data", "expert"]), default=None)
@click.option("--scheme", type=click.Choice(list(DW_SCHEMES)), default=None)
@click.option("--sparse", type=click.Path(exists=True, dir_okay=False), default=None, help="Target-subgroup studies.")
@click.option("--dense", type=click.Path(exists=True, dir_okay=False), default=None, help="External-subgroup studies.")
@click.option("--experts", type=click.Path(exists=True, dir_okay=False), default=None, help="Expert responses.")
@click.option("--reference", default=None, help="Reference treatment (default: Placebo if present).")
@click.option("--scale-prior", default=None, help="fixed(v), beta(a,b) or uniform(lo,hi).")
@click.option("--node-split/--no-node-split", default=None, help="Also run node-splitting.")
@click.option("--traces/--no-traces", default=None, help="Export per-parameter trace CSVs.")
@click.option("--allow-unconverged", is_flag=True, default=None, help="Emit results even if R-hat >= 1.1.")
@click.option("--rounding", type=click.Choice(["appendix", "full"]), default=None)
@click.option("--workers", type=int, default=None, help="Processes for parallel chains.")
@click.pass_context
def fit(ctx, config_path, model, beta_source, scheme, sparse, dense, experts, reference, scale_prior,
        node_split, traces, allow_unconverged, rounding, workers):
    """Run one of the nine analyses and write the report."""
    values = {}
    if config_path:
        from .io import read_config

        values.update(read_config(config_path))
    overrides = dict(model=model, beta_source=beta_source, scheme=scheme, sparse=sparse, dense=dense,
                     experts=experts, reference=reference, scale_prior=scale_prior, rounding=rounding,
                     workers=workers, node_split=node_split, traces=traces,
                     allow_unconverged=allow_unconverged,
                     seed=ctx.obj["seed"], chains=ctx.obj["chains"], iterations=ctx.obj["iters"],
                     burn_in=ctx.obj["burn_in"], out=ctx.obj["out"])
    for k, v in overrides.items():
        if v is not None:
            values[k] = str(v).lower() if isinstance(v, bool) else str(v)
    try:
        config = AnalysisConfig.from_dict(values)
    except ValueError as exc:
        _fail(str(exc), 2)
    out = Path(config.out or "results")
    try:
        bundle = run_analysis(config)
        emit_report(bundle, out)
    except DataError as exc:
        _fail(str(exc))
    except OSError as exc:
        _fail(str(exc))
    for m in bundle.messages:
        click.echo(f"note: {m}", err=True)
    if not bundle.converged:
        _fail(f"convergence failure; see {out / 'convergence.csv'} (use --allow-unconverged to override)",
              EXIT_UNCONVERGED)
    click.echo(f"{config.name}: report written to {out}")


@main.command("node-split")
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--reference", default=None)
@click.option("--comparison", "comparisons", multiple=True, help="'A,B' splits B vs A; default: all splittable.")
@click.option("--tau-scale", type=float, default=1.0)
@click.option("--workers", type=int, default=1)
@click.pass_context
def node_split_cmd(ctx, data_path, reference, comparisons, tau_scale, workers):
    """Direct vs indirect evidence for each comparison of one network."""
    try:
        net = load_network(data_path, reference)
        pairs = [tuple(p.strip() for p in c.split(",")) for c in comparisons] or splittable_comparisons(net)
        for p in pairs:
            if len(p) != 2:
                _fail(f"comparison must be 'A,B', got {','.join(p)!r}", 2)
        results = [node_split(net, p, tau_prior=TauPrior(tau_scale), config=_sampler(ctx), workers=workers)
                   for p in pairs]
    except DataError as exc:
        _fail(str(exc))
    out = _out_dir(ctx)
    out.mkdir(parents=True, exist_ok=True)
    write_consistency(results, out / "consistency.csv")
    write_density_pairs(results, out / "density_pairs.csv")
    for r in results:
        click.echo(f"{r.label}: direct {r.direct.format()}, indirect {r.indirect.format()}, "
                   f"difference {r.difference.format()}, P={r.p_gt0:.2f}, p={r.p_value:.2f}")


@main.command()
@click.option("--sparse", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--dense", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--experts", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--beta-source", type=click.Choice(["data", "expert"]), default="data")
@click.option("--scheme", type=click.Choice(list(DW_SCHEMES)), default="no_dw")
@click.option("--scale-prior", default="beta(3,3)")
@click.option("--reference", default=None)
@click.option("--tau-scale", type=float, default=1.0)
@click.option("--workers", type=int, default=1)
@click.pass_context
def priors(ctx, sparse, dense, experts, beta_source, scheme, scale_prior, reference, tau_scale, workers):
    """Write beta_priors.csv and predictive_priors.csv (runs stage 1)."""
    try:
        canon: dict = {}
        sp = load_network(sparse, reference, canon=canon)
        dn = load_network(dense, sp.reference, canon=canon)
        sets = treatment_sets(dn, sp)
        if beta_source == "data":
            bp = data_based_beta_priors(sp, dn, sets, tau_scale)
        else:
            if experts is None:
                _fail("--experts is required with --beta-source expert", 2)
            pool = pool_experts(load_expert_responses(experts, canon), median_pooled_sd(sp), sp.reference,
                                sets.t_c, tau_scale)
            bp = expert_beta_priors(pool, dn, sets, tau_scale)
        prior = ScalePrior.parse(scale_prior) if scheme != "no_dw" else ScalePrior.fixed(1.0)
        weights = assign_weights(dn, sets, WeightScheme(DW_SCHEMES[scheme], prior))
        stage1 = fit_stage1(dn, bp, weights, TauPrior(tau_scale), _sampler(ctx), workers=workers)
    except (DataError, ValueError) as exc:
        _fail(str(exc))
    out = _out_dir(ctx)
    out.mkdir(parents=True, exist_ok=True)
    write_beta_priors(bp, out / "beta_priors.csv")
    write_predictive_priors(predictive_priors(stage1, sp.treatments), out / "predictive_priors.csv")
    click.echo(f"priors written to {out}")


@main.command()
@click.option("--traces", "trace_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--reference", required=True, help="Reference treatment of the fitted model.")
@click.option("--prefix", default="mu", help="Basic-parameter name prefix in the traces (mu, mu_star, ...).")
@click.option("--direction", type=click.Choice(["lower-better", "higher-better"]), default="lower-better")
@click.pass_context
def rank(ctx, trace_dir, reference, prefix, direction):
    """Rank probabilities and SUCRA from exported traces."""
    samples = load_traces(trace_dir)
    start = f"{prefix}["
    basic = {n[len(start):-1]: samples[n] for n in samples.names if n.startswith(start) and n.endswith("]")}
    if not basic:
        _fail(f"no '{prefix}[...]' traces in {trace_dir}")
    import numpy as np

    mu = {reference: np.zeros_like(next(iter(basic.values())))}
    mu.update(basic)
    treatments = sorted(mu)
    ranks = rank_probabilities(mu, treatments, direction)
    out = _out_dir(ctx)
    out.mkdir(parents=True, exist_ok=True)
    write_sucra(ranks, out / "sucra.csv")
    for t, v in sorted(sucra_table(ranks).items(), key=lambda kv: -kv[1]):
        click.echo(f"{t}\t{v:.3f}")


@main.command()
@click.argument("files", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--reference", default=None)
def validate(files, reference):
    """Check study files and report network structure."""
    ok = True
    canon: dict = {}
    nets = []
    for f in files:
        try:
            net = load_network(f, reference, canon=canon)
        except DataError as exc:
            click.echo(f"error: {exc}", err=True)
            ok = False
            continue
        nets.append(net)
        comps = connectivity(net)
        counts = direct_comparisons(net)
        click.echo(f"{f}: {len(net.studies)} studies, {len(net.treatments)} treatments, "
                   f"{len(counts)} direct comparisons, reference {net.reference}")
        if len(comps) != 1:
            ok = False
            click.echo(f"error: {f}: network is disconnected: " + "; ".join("{" + ", ".join(c) + "}" for c in comps),
                       err=True)
    if len(nets) == 2:
        try:
            sets = treatment_sets(nets[1], nets[0])
            click.echo(f"common treatments ({len(sets.t_c)}): {', '.join(sets.t_c)}")
        except DataError as exc:
            click.echo(f"error: {exc}", err=True)
            ok = False
    if not ok:
        sys.exit(EXIT_DATA)


if __name__ == "__main__":  # pragma: no cover
    main()
