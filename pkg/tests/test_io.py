import pytest

from nmaborrow.core import DataError
from nmaborrow.io import load_network, load_studies, read_config, write_config, write_studies

HEADER = "study_id,subgroup,treatment,n,mean,sd,high_rob\n"


def _write(tmp_path, body, name="s.csv"):
    p = tmp_path / name
    p.write_text(HEADER + body)
    return p


def test_round_trip(tmp_path, triangle):
    p = write_studies(triangle.studies, tmp_path / "t.csv")
    again = load_studies(p)
    assert tuple(again) == triangle.studies


def test_case_insensitive_names_keep_first_spelling(tmp_path):
    p = _write(tmp_path, "a,P1,Placebo,10,1,2,\na,P1, aripiprazole ,10,1,2,\nb,P1,PLACEBO,10,1,2,\nb,P1,Aripiprazole,10,1,2,\n")
    net = load_network(p)
    assert net.treatments == ("Placebo", "aripiprazole")
    assert net.reference == "Placebo"


@pytest.mark.parametrize(
    "body,match",
    [
        ("a,P1,A,1,1,2,\na,P1,B,10,1,2,\n", "s.csv:2: n must be an integer"),
        ("a,P1,A,10,1,0,\na,P1,B,10,1,2,\n", "s.csv:2: sd must be positive"),
        ("a,P1,A,10,x,2,\na,P1,B,10,1,2,\n", "s.csv:2: mean and sd"),
        ("a,P1,A,10,1,2,\na,P1,a,10,1,2,\n", "s.csv:3: duplicate"),
        ("a,P1,A,10,1,2,1\na,P1,B,10,1,2,0\n", "s.csv:3: .*inconsistent high_rob"),
        ("a,P1,A,10,1,2,\na,P2,B,10,1,2,\n", "s.csv:3: .*changes subgroup"),
        ("a,P1,A,10,1,2,maybe\n", "s.csv:2: high_rob"),
        ("a,P1,A,10,1,2,\n", "needs at least 2 arms"),
    ],
)
def test_validation_messages_carry_line_numbers(tmp_path, body, match):
    with pytest.raises(DataError, match=match):
        load_studies(_write(tmp_path, body))


def test_missing_column(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("study_id,treatment\n")
    with pytest.raises(DataError, match="missing columns"):
        load_studies(p)


def test_unknown_subgroup(tmp_path):
    p = _write(tmp_path, "a,P9,A,10,1,2,\na,P9,B,10,1,2,\n")
    with pytest.raises(DataError, match="unknown subgroup"):
        load_studies(p, subgroups=["P1", "P2"])


def test_reference_default_and_override(tmp_path):
    p = _write(tmp_path, "a,P1,B,10,1,2,\na,P1,A,10,1,2,\n")
    assert load_network(p).reference == "A"
    assert load_network(p, reference="b").reference == "B"


def test_config_round_trip_and_errors(tmp_path):
    p = write_config({"model": "borrow", "seed": 3, "empty": ""}, tmp_path / "c.cfg")
    assert read_config(p) == {"model": "borrow", "seed": "3"}
    q = tmp_path / "d.cfg"
    q.write_text("# comment\nModel = standard  # trailing\nmodel = naive\n")
    with pytest.raises(DataError, match="d.cfg:3: duplicate key"):
        read_config(q)
    q.write_text("nonsense\n")
    with pytest.raises(DataError, match="expected key = value"):
        read_config(q)


def test_two_row_file_is_one_study(tmp_path):
    net = load_network(_write(tmp_path, "a,P1,Placebo,30,-10,8,\na,P1,Drug,30,-14,9,\n"))
    assert len(net.studies) == 1 and net.treatments == ("Drug", "Placebo")
    assert net.studies[0].arms[0].treatment == "Placebo"
