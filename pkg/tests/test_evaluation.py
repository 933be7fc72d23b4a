import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nmaborrow.core import DataError, Network
from nmaborrow.evaluation import (
    LeagueTable,
    RankMatrix,
    bayes_p,
    check_splittable,
    format_cell,
    league_table,
    node_split,
    rank_probabilities,
    splittable_comparisons,
    sucra,
    sucra_table,
    write_consistency,
    write_league_table,
    write_sucra,
)
from nmaborrow.mcmc import SamplerConfig
from nmaborrow.nma import snap
from nmaborrow.simulate import loop_network

from conftest import two_arm


@given(st.floats(0, 1))
def test_bayes_p_symmetric_and_bounded(p):
    assert 0 <= bayes_p(p) <= 1
    assert bayes_p(p) == pytest.approx(bayes_p(1 - p), abs=1e-15)


def test_bayes_p_values():
    assert bayes_p(0.5) == 1.0
    assert bayes_p(0.0) == 0.0 and bayes_p(1.0) == 0.0
    assert bayes_p(0.975) == 0.05
    with pytest.raises(ValueError):
        bayes_p(1.2)


def _rank_oracle(x):
    """Per-draw ranking with Python's stable sort."""
    T, N = x.shape
    counts = np.zeros((T, T))
    for n in range(N):
        order = sorted(range(T), key=lambda j: x[j, n])
        for r, j in enumerate(order):
            counts[j, r] += 1
    return counts / N


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(2, 6), st.integers(1, 30)), elements=st.integers(-3, 3).map(float)))
def test_rank_probabilities_match_oracle_and_sucra_sum(x):
    ts = [f"t{i}" for i in range(x.shape[0])]
    r = rank_probabilities(dict(zip(ts, x)), ts)
    assert np.allclose(r.probs, _rank_oracle(x), atol=0)
    assert np.allclose(r.probs.sum(axis=0), 1, atol=1e-9)
    assert np.allclose(r.probs.sum(axis=1), 1, atol=1e-9)
    assert sum(sucra_table(r).values()) == pytest.approx(x.shape[0] / 2, abs=1e-9)


def test_sucra_extremes_and_direction():
    mu = {"Pbo": np.zeros(100), "A": np.full(100, -1.0), "B": np.full(100, -0.5)}
    r = rank_probabilities(mu, ["Pbo", "A", "B"])
    assert sucra(r, "A") == 1.0 and sucra(r, "Pbo") == 0.0 and sucra(r, "B") == 0.5
    up = rank_probabilities(mu, ["Pbo", "A", "B"], "higher-better")
    assert sucra(up, "Pbo") == 1.0
    with pytest.raises(ValueError):
        rank_probabilities(mu, ["Pbo"], "sideways")
    with pytest.raises(ValueError):
        sucra(rank_probabilities({"Pbo": np.zeros(3)}, ["Pbo"]), "Pbo")


def test_write_sucra_orders_best_first(tmp_path):
    mu = {"Pbo": np.zeros(10), "A": np.full(10, -1.0)}
    p = write_sucra(rank_probabilities(mu, ["Pbo", "A"]), tmp_path / "s.csv")
    rows = list(csv.reader(p.open()))
    assert rows[0] == ["treatment", "sucra", "p_rank1", "p_rank2"]
    assert rows[1][:2] == ["A", "1.000"]
    assert list(csv.reader(write_sucra(None, tmp_path / "e.csv").open())) == [["treatment", "sucra"]]


def _draws(rng, ts, n=400):
    return {t: (np.zeros(n) if i == 0 else snap(rng.normal(-0.1 * i, 0.1, n))) for i, t in enumerate(ts)}


def test_league_table_entries_are_exact_mirrors(rng):
    ts = ("Pbo", "A", "B", "C")
    mu = _draws(rng, ts)
    lt = league_table(mu, ts)
    assert len(lt) == 12
    for (j, l), s in lt.entries.items():
        m = lt[(l, j)]
        assert (m.mean, m.q025, m.q975, m.median, m.sd) == (-s.mean, -s.q975, -s.q025, -s.median, s.sd)
    with pytest.raises(KeyError):
        lt[("A", "A")]


def test_league_csv_orientation(tmp_path):
    from nmaborrow.mcmc import PosteriorSummary

    s = PosteriorSummary(0.431, 0.04, 0.352, 0.431, 0.513)
    lt = LeagueTable(("Placebo", "Aripiprazole"),
                     {("Aripiprazole", "Placebo"): s,
                      ("Placebo", "Aripiprazole"): PosteriorSummary(-0.431, 0.04, -0.513, -0.431, -0.352)})
    rows = list(csv.reader(write_league_table(lt, tmp_path / "l.csv").open()))
    assert rows[0] == ["", "Placebo", "Aripiprazole"]
    assert rows[1] == ["Placebo", "", "0.431 (0.352, 0.513)"]
    assert rows[2] == ["Aripiprazole", "-0.431 (-0.513, -0.352)", ""]
    assert format_cell(s, 2) == "0.43 (0.35, 0.51)"


def test_splittable_comparisons_and_errors():
    net = loop_network(0)
    pairs = splittable_comparisons(net)
    assert ("A", "Pbo") in pairs and ("B", "Pbo") in pairs and ("A", "B") in pairs
    star = Network("P1", (two_arm("a", "Pbo", "A", 0, 1), two_arm("b", "Pbo", "B", 0, 1)), "Pbo")
    assert splittable_comparisons(star) == []
    with pytest.raises(DataError, match="not splittable"):
        check_splittable(star, ("Pbo", "A"))
    with pytest.raises(DataError, match="no direct evidence"):
        check_splittable(star, ("A", "B"))
    with pytest.raises(DataError, match="unknown"):
        check_splittable(star, ("A", "Z"))


def test_node_split_result_and_table(tmp_path):
    net = loop_network(1, inconsistency=1.5)
    r = node_split(net, ("Pbo", "A"), config=SamplerConfig(iterations=4000, burn_in=1500, seed=2))
    assert r.label == "A vs Pbo"
    assert r.direct.mean > r.indirect.mean
    assert r.p_value == bayes_p(r.p_gt0)
    assert r.difference.mean == pytest.approx(r.direct.mean - r.indirect.mean, abs=1e-9)
    rows = list(csv.reader(write_consistency([r], tmp_path / "c.csv").open()))
    assert rows[0] == ["comparison", "direct", "indirect", "difference", "P", "p_value"]
    assert rows[1][0] == "A vs Pbo"


def test_two_treatment_ranks_and_symmetric_draws(rng):
    a = rng.normal(0, 1, 200_000)
    r = rank_probabilities({"Pbo": np.zeros_like(a), "A": a}, ["Pbo", "A"])
    assert r.probs.shape == (2, 2)
    assert np.allclose(r.probs.sum(axis=0), 1) and np.allclose(r.probs.sum(axis=1), 1)
    assert r.row("A")[0] == pytest.approx(0.5, abs=0.005)
    assert sucra(r, "A") == pytest.approx(0.5, abs=0.005)


def test_well_separated_treatments_give_identity_ranks():
    n = 1000
    mu = {"A": np.full(n, -1.0), "B": np.full(n, 0.0), "C": np.full(n, 1.0)}
    r = rank_probabilities(mu, ["A", "B", "C"])
    assert np.array_equal(r.probs, np.eye(3))
    assert sucra_table(r) == {"A": 1.0, "B": 0.5, "C": 0.0}


def test_uniform_rank_probabilities_give_half_sucra():
    r = RankMatrix(("A", "B", "C", "D"), np.full((4, 4), 0.25))
    assert all(v == pytest.approx(0.5, abs=1e-15) for v in sucra_table(r).values())


def test_two_treatment_league_has_two_entries(rng):
    a = rng.normal(-0.4, 0.1, 5000)
    lt = league_table({"Pbo": np.zeros_like(a), "A": a}, ["Pbo", "A"])
    assert len(lt) == 2
    assert lt[("Pbo", "A")].mean == pytest.approx(a.mean(), rel=1e-12)


def test_league_grid_for_fifteen_treatments(tmp_path, rng):
    ts = ["Pbo"] + [f"T{i:02d}" for i in range(1, 15)]
    mu = {t: (np.zeros(2000) if t == "Pbo" else rng.normal(-0.03 * i, 0.1, 2000)) for i, t in enumerate(ts)}
    lt = league_table(mu, ts)
    assert len(lt) == 15 * 14
    rows = list(csv.reader(write_league_table(lt, tmp_path / "l.csv").open()))
    assert len(rows) == 16 and all(len(r) == 16 for r in rows)
    assert all(rows[i][i] == "" for i in range(1, 16))


def test_empty_consistency_file_is_header_only(tmp_path):
    p = write_consistency([], tmp_path / "c.csv")
    lines = p.read_text().splitlines()
    assert len(lines) == 1 and lines[0].startswith("comparison")
