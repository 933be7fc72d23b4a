import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmaborrow.core import (
    Arm,
    DataError,
    Network,
    Study,
    connectivity,
    direct_comparisons,
    merge_networks,
    pooled_sd,
    require_connected,
    smd,
    treatment_sets,
)

from conftest import two_arm


def test_pooled_sd_matches_hand_computation():
    s = Study("x", "P1", (Arm("A", 10, 0.0, 2.0), Arm("B", 20, 1.0, 3.0), Arm("C", 5, 2.0, 1.0)))
    expected = math.sqrt((9 * 4 + 19 * 9 + 4 * 1) / (35 - 3))
    assert pooled_sd(s) == pytest.approx(expected, rel=1e-15)


@given(st.floats(0.1, 50), st.integers(2, 500), st.integers(2, 500))
def test_pooled_sd_equal_sds_is_that_sd(sd, n1, n2):
    s = Study("x", "P1", (Arm("A", n1, 0.0, sd), Arm("B", n2, 0.0, sd)))
    assert pooled_sd(s) == pytest.approx(sd, rel=1e-12)


def test_smd_sign_and_variance():
    s = two_arm("x", "Pbo", "A", -10.0, -14.0, n=50, sd=10.0)
    d, v = smd(s, "A", "Pbo")
    assert d == pytest.approx(-0.4)
    assert v == pytest.approx(100 / 2500 + 0.16 / 200)
    d2, _ = smd(s, "Pbo", "A")
    assert d2 == pytest.approx(0.4)


@pytest.mark.parametrize("kwargs", [dict(n=1, sd=1.0), dict(n=10, sd=0.0), dict(n=10, sd=-1.0), dict(n=2.5, sd=1.0)])
def test_arm_validation(kwargs):
    with pytest.raises(DataError):
        Arm("A", kwargs["n"], 0.0, kwargs["sd"])


def test_study_rejects_single_arm_and_duplicates():
    with pytest.raises(DataError, match="at least 2 arms"):
        Study("x", "P1", (Arm("A", 10, 0.0, 1.0),))
    with pytest.raises(DataError, match="repeated"):
        Study("x", "P1", (Arm("A", 10, 0.0, 1.0), Arm("A", 10, 0.0, 1.0)))


def test_with_baseline_reorders_arms():
    s = two_arm("x", "Pbo", "A", 1.0, 2.0).with_baseline("A")
    assert s.treatments == ("A", "Pbo")


def test_network_reference_must_exist(triangle):
    with pytest.raises(DataError, match="reference"):
        Network("P1", triangle.studies, "Zzz")
    assert triangle.basic_treatments == ("A", "B", "C")
    assert triangle.ordered_treatments()[0] == "Pbo"


def test_direct_comparisons_counts(triangle):
    counts = direct_comparisons(triangle)
    assert counts[("A", "Pbo")] == 2
    assert counts[("B", "C")] == 1 and counts[("C", "Pbo")] == 1 and counts[("B", "Pbo")] == 2


def test_connectivity_detects_islands():
    net = Network("P1", (two_arm("a", "Pbo", "A", 0, 1), two_arm("b", "B", "C", 0, 1)), "Pbo")
    comps = connectivity(net)
    assert len(comps) == 2
    with pytest.raises(DataError, match="disconnected"):
        require_connected(net)


def test_treatment_sets():
    sparse = Network("P1", (two_arm("a", "Pbo", "A", 0, 1), two_arm("b", "Pbo", "X", 0, 1)), "Pbo")
    dense = Network("P2", (two_arm("c", "Pbo", "A", 0, 1), two_arm("d", "A", "B", 0, 1)), "Pbo")
    sets = treatment_sets(dense, sparse)
    assert sets.t_c == ("A", "Pbo")
    assert sets.t_a == ("A", "B", "Pbo", "X")
    assert sets.non_common == ("B", "X")


def test_treatment_sets_errors():
    sparse = Network("P1", (two_arm("a", "Pbo", "A", 0, 1),), "Pbo")
    only_ref = Network("P2", (two_arm("c", "Pbo", "Z", 0, 1),), "Pbo")
    with pytest.raises(DataError, match="only share the reference"):
        treatment_sets(only_ref, sparse)
    other_ref = Network("P2", (two_arm("c", "Pbo", "A", 0, 1),), "A")
    with pytest.raises(DataError, match="different references"):
        treatment_sets(other_ref, sparse)


def test_merge_networks_disambiguates_ids_even_with_shared_labels():
    a = Network("P1", (two_arm("s1", "Pbo", "A", 0, 1),), "Pbo")
    b = Network("P1", (two_arm("s1", "Pbo", "A", 0, 2),), "Pbo")
    merged = merge_networks(a, b)
    ids = [s.id for s in merged.studies]
    assert len(set(ids)) == 2
    c = Network("P2", (two_arm("s2", "Pbo", "A", 0, 2),), "Pbo")
    assert [s.id for s in merge_networks(a, c).studies] == ["s1", "s2"]


def test_pooled_sd_hand_oracle_two_arms():
    s = Study("x", "P1", (Arm("A", 10, 0.0, 2.0), Arm("B", 10, 0.0, 4.0)))
    assert pooled_sd(s) == pytest.approx(math.sqrt(10), rel=1e-15)


def test_treatment_sets_set_algebra():
    n1 = Network("P1", (Study("a", "P1", (Arm("Pbo", 5, 0, 1), Arm("A", 5, 0, 1), Arm("B", 5, 0, 1))),), "Pbo")
    n2 = Network("P2", (Study("b", "P2", (Arm("Pbo", 5, 0, 1), Arm("B", 5, 0, 1), Arm("C", 5, 0, 1))),), "Pbo")
    sets = treatment_sets(n2, n1)
    assert sets.t_a == ("A", "B", "C", "Pbo") and sets.t_c == ("B", "Pbo")
    same = treatment_sets(n1, n1)
    assert same.t_a == same.t_c == n1.treatments


def test_direct_comparisons_multi_arm():
    s = Study("x", "P1", (Arm("A", 5, 0, 1), Arm("B", 5, 0, 1), Arm("C", 5, 0, 1)))
    assert direct_comparisons(Network("P1", (s,), "A")) == {("A", "B"): 1, ("A", "C"): 1, ("B", "C"): 1}
    assert direct_comparisons(Network("P1", (two_arm("y", "A", "B", 0, 1),), "A")) == {("A", "B"): 1}


def _ca_shaped():
    """19 studies on 15 treatments with 21 direct comparisons, two of them with 2 studies."""
    ts = ["Pbo"] + [f"T{i}" for i in range(1, 15)]
    arm = lambda t: Arm(t, 30, 0.0, 1.0)  # noqa: E731
    designs = [("Pbo", "T1", "T2"), ("Pbo", "T3", "T4")] + [("Pbo", f"T{i}") for i in range(5, 15)]
    designs += [("T5", "T6"), ("T7", "T8"), ("T9", "T10"), ("T11", "T12"), ("T13", "T14"), ("Pbo", "T5"), ("T5", "T6")]
    studies = tuple(Study(f"ca{k}", "CA", tuple(arm(t) for t in d)) for k, d in enumerate(designs))
    return Network("CA", studies, "Pbo"), ts


def test_ca_shaped_topology():
    net, ts = _ca_shaped()
    counts = direct_comparisons(net)
    assert len(net.studies) == 19 and len(net.treatments) == 15
    assert len(counts) == 21
    assert sorted(counts.values()).count(2) == 2 and sorted(counts.values()).count(1) == 19
    assert len(connectivity(net)) == 1
    gp_ts = ts + [f"G{i}" for i in range(19)]
    gp = Network("GP", tuple(two_arm(f"g{i}", "Pbo", t, 0, 1, subgroup="GP") for i, t in enumerate(gp_ts[1:])), "Pbo")
    assert len(gp.treatments) == 34
    assert len(treatment_sets(gp, net).t_c) == 15


def test_connectivity_star_and_empty():
    star = Network("P1", tuple(two_arm(f"s{t}", "Pbo", t, 0, 1) for t in "ABC"), "Pbo")
    assert len(connectivity(star)) == 1
    assert connectivity(Network("P1", (), "Pbo")) == []
