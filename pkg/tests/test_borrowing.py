import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nmaborrow.borrowing import (
    FALLBACK,
    UNIT_WEIGHT,
    BetaPrior,
    BetaPriorSet,
    PredictivePrior,
    ScalePrior,
    WeightScheme,
    assign_weights,
    fit_stage1,
    fit_stage2,
    parse_comparison,
    predictive_draws,
    predictive_priors,
    read_beta_priors,
    read_predictive_priors,
    stage2_mu_prior,
    write_beta_priors,
    write_predictive_priors,
)
from nmaborrow.core import DataError, Network, treatment_sets
from nmaborrow.mcmc import SamplerConfig
from nmaborrow.simulate import borrowing_benchmark

from conftest import two_arm


@pytest.fixture(scope="module")
def bench():
    return borrowing_benchmark(3)


@pytest.mark.parametrize("text,kind,params", [("fixed(0.5)", "fixed", (0.5,)), ("Beta(3, 3)", "beta", (3.0, 3.0)),
                                              ("uniform(0.4,0.6)", "uniform", (0.4, 0.6))])
def test_scale_prior_parse_round_trip(text, kind, params):
    p = ScalePrior.parse(text)
    assert (p.kind, p.params) == (kind, params)
    assert ScalePrior.parse(str(p)) == p


@pytest.mark.parametrize("text", ["fixed(0)", "fixed(1.2)", "beta(0,1)", "uniform(0.6,0.4)", "gamma(1,1)", "beta"])
def test_scale_prior_rejects(text):
    with pytest.raises(ValueError):
        ScalePrior.parse(text)


def test_weight_schemes(bench):
    sets = treatment_sets(bench.dense, bench.sparse)
    common = set(sets.t_c)
    prior = ScalePrior.beta(3, 3)
    none = assign_weights(bench.dense, sets, WeightScheme("none"))
    assert all(set(s.treatments) <= common for s in none.network.studies)
    assert none.n_weighted == 0
    rob = assign_weights(bench.dense, sets, WeightScheme("rob", prior))
    assert rob.network.studies == none.network.studies
    assert rob.n_weighted == sum(bool(s.high_rob) for s in rob.network.studies) > 0
    nct = assign_weights(bench.dense, sets, WeightScheme("nct", prior))
    assert len(nct.network.studies) == 120
    assert nct.n_weighted == sum(1 for s in bench.dense.studies if set(s.treatments) - common)
    for s in bench.dense.studies:
        assert (nct[s.id] == prior) == bool(set(s.treatments) - common)


def test_rob_requires_flags():
    sparse = Network("P1", (two_arm("a", "Pbo", "A", 0, 1),), "Pbo")
    dense = Network("P2", (two_arm("c", "Pbo", "A", 0, 1, subgroup="P2"),), "Pbo")
    with pytest.raises(DataError, match="risk-of-bias"):
        assign_weights(dense, treatment_sets(dense, sparse), WeightScheme("rob", ScalePrior.beta(3, 3)))
    with pytest.raises(ValueError):
        WeightScheme("other")


def test_beta_prior_validation_and_io(tmp_path):
    with pytest.raises(ValueError):
        BetaPrior(0.0, -1.0)
    with pytest.raises(ValueError):
        BetaPrior(0.0, 1.0, "guess")
    bp = BetaPriorSet("Pbo", {"A": BetaPrior(0.1, 0.02, "data"), "B": FALLBACK})
    back = read_beta_priors(write_beta_priors(bp, tmp_path / "b.csv"))
    assert back.reference == "Pbo" and back.priors == bp.priors
    assert parse_comparison("A vs Pbo") == ("A", "Pbo")
    with pytest.raises(ValueError):
        parse_comparison("A-Pbo")


@given(st.floats(-5, 5), st.floats(1e-4, 10))
def test_predictive_prior_csv_round_trip_is_exact(m, v):
    import tempfile
    from pathlib import Path

    with tempfile.TemporaryDirectory() as d:
        p = {"A": PredictivePrior("A", "Pbo", m, v)}
        assert read_predictive_priors(write_predictive_priors(p, Path(d) / "p.csv")) == p


@pytest.fixture(scope="module")
def stage1(bench):
    sets = treatment_sets(bench.dense, bench.sparse)
    bp = BetaPriorSet("Pbo", {t: BetaPrior(0.2, 0.01, "data") for t in sets.t_c if t != "Pbo"})
    w = assign_weights(bench.dense, sets, WeightScheme("nct", ScalePrior.beta(3, 3)))
    cfg = SamplerConfig(iterations=4000, burn_in=1500, seed=5)
    return fit_stage1(bench.dense, bp, w, config=cfg)


def test_stage1_structure(stage1, bench):
    assert np.array_equal(stage1["mu_star[T01]"], stage1["mu_p2[T01]"] - stage1["beta[T01]"])
    # beta has no likelihood term, so its draws follow the prior
    b = stage1.pooled("beta[T01]")
    assert b.mean() == pytest.approx(0.2, abs=0.01)
    assert b.var() == pytest.approx(0.01, rel=0.1)
    # non-common treatments get beta fixed at 0
    assert np.all(stage1["beta[T09]"] == 0)
    assert stage1.meta["beta_sources"]["T09"] == "none"
    assert stage1.meta["monitor"][-1] == "tau"
    ws = [n for n in stage1.names if n.startswith("w[")]
    common = set(treatment_sets(bench.dense, bench.sparse).t_c)
    assert len(ws) == sum(1 for s in bench.dense.studies if set(s.treatments) - common)
    assert all(0 < stage1[n].min() and stage1[n].max() < 1 for n in ws)


def test_predictive_prior_is_moment_matched(stage1):
    x = predictive_draws(stage1, "T01")
    pp = predictive_priors(stage1, ["Pbo", "T01", "T02"])
    assert set(pp) == {"T01", "T02"}
    assert pp["T01"].mean == pytest.approx(x.mean(), rel=1e-12)
    assert pp["T01"].variance == pytest.approx(x.var(ddof=1), rel=1e-12)
    # the predictive spread exceeds the posterior spread of mu_star by about tau^2
    tau2 = np.mean(stage1.pooled("tau") ** 2)
    assert pp["T01"].variance == pytest.approx(stage1.pooled("mu_star[T01]").var() + tau2, rel=0.1)
    assert np.array_equal(x, predictive_draws(stage1, "T01"))
    with pytest.raises(KeyError):
        predictive_draws(stage1, "Nope")


def test_stage2_prior_and_sources(bench):
    priors = {"T01": PredictivePrior("T01", "Pbo", -0.3, 0.01)}
    mp = stage2_mu_prior(bench.sparse, priors)
    assert mp.means == {"T01": -0.3}
    with pytest.raises(DataError):
        stage2_mu_prior(bench.sparse, {"T01": PredictivePrior("T01", "T02", -0.3, 0.01)})
    s = fit_stage2(bench.sparse, priors, config=SamplerConfig(iterations=2000, burn_in=500))
    assert s.meta["prior_sources"]["T01"] == "predictive"
    assert s.meta["prior_sources"]["T02"] == "fallback"


def test_unit_weight_constant():
    assert UNIT_WEIGHT == ScalePrior.fixed(1.0)


def _stage1_like(mu, tau, seed=9):
    from nmaborrow.mcmc import PosteriorSamples

    mu, tau = np.atleast_2d(np.asarray(mu, float)), np.atleast_2d(np.asarray(tau, float))
    return PosteriorSamples({"mu_star[A]": mu, "tau": tau}, SamplerConfig(seed=seed), meta={"reference": "Pbo"})


def test_degenerate_beta_shifts_every_draw(bench):
    cfg = SamplerConfig(iterations=1500, burn_in=500, seed=2)
    zero = fit_stage1(bench.dense, BetaPriorSet.degenerate("Pbo", ["T01"], 0.0), config=cfg)
    shifted = fit_stage1(bench.dense, BetaPriorSet.degenerate("Pbo", ["T01"], 0.3), config=cfg)
    assert np.array_equal(zero["mu_p2[T01]"], shifted["mu_p2[T01]"])
    assert np.allclose(shifted["mu_star[T01]"], shifted["mu_p2[T01]"] - 0.3, atol=1e-11)
    assert np.array_equal(shifted["mu_star[T02]"], zero["mu_star[T02]"])


def test_predictive_without_heterogeneity_keeps_mu_star_variance():
    mu = np.random.default_rng(0).normal(-0.3, 0.1, size=(2, 5000))
    p = predictive_priors(_stage1_like(mu, np.zeros_like(mu)), ["A"])["A"]
    assert p.variance == np.var(mu, ddof=1)
    assert p.mean == pytest.approx(mu.mean(), rel=1e-14)


def test_predictive_with_constant_inputs_has_variance_tau_squared():
    n = 400_000
    p = predictive_priors(_stage1_like(np.full((1, n), -0.4), np.full((1, n), 0.15)), ["A"])["A"]
    se = 0.15**2 * np.sqrt(2 / (n - 1))
    assert abs(p.variance - 0.15**2) < 3 * se
    assert abs(p.mean + 0.4) < 3 * 0.15 / np.sqrt(n)


@given(st.floats(-2, 2))
def test_predictive_prior_is_shift_equivariant(c):
    rng = np.random.default_rng(4)
    mu, tau = rng.normal(-0.3, 0.1, size=(2, 2000)), np.abs(rng.normal(0.1, 0.02, size=(2, 2000)))
    a = predictive_priors(_stage1_like(mu, tau), ["A"])["A"]
    b = predictive_priors(_stage1_like(mu - c, tau), ["A"])["A"]
    assert b.mean == pytest.approx(a.mean - c, abs=1e-12)
    assert b.variance == pytest.approx(a.variance, rel=1e-9, abs=1e-15)
