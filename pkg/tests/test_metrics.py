import json
from decimal import Decimal

import pytest
from hypothesis import given, strategies as st

from crossedit.errors import AllCasesSkipped, DuplicateKey, EmptyGold, MissingLanguage
from crossedit.metrics import (
    MetricValue,
    ReportTable,
    aggregate,
    delta_table,
    evaluate_direction,
    generality,
    locality,
    portability,
    reliability,
    round_percent,
    token_match,
)
from crossedit.types import toy_tokenize

from conftest import make_case


class Scripted:
    """Answers from a fixed table; unknown queries get an empty decode."""

    def __init__(self, table):
        self.table = table

    def generate(self, query):
        return toy_tokenize(self.table.get(query, ""))

    def tokenize(self, text):
        return toy_tokenize(text)


def test_token_match_examples():
    assert token_match(["a", "b", "c"], ["a", "b", "c"]) == 1.0
    assert token_match(["a", "x"], ["a", "b", "c"]) == pytest.approx(1 / 3)
    assert token_match([], ["a"]) == 0.0
    assert token_match(["a", "x"], ["a", "b"], exact=True) == 0.0
    with pytest.raises(EmptyGold):
        token_match(["a"], [])


tok = st.sampled_from("abcd")


@given(st.lists(tok, max_size=6), st.lists(tok, min_size=1, max_size=6))
def test_token_match_bounds(pred, gold):
    v = token_match(pred, gold)
    assert 0.0 <= v <= 1.0
    assert token_match(pred, gold, exact=True) <= v
    assert token_match(gold, gold) == 1.0


@given(st.lists(tok, min_size=1, max_size=6), st.lists(tok, max_size=3))
def test_extra_tokens_do_not_change_score(gold, tail):
    assert token_match(gold + tail, gold) == 1.0


def test_reliability_perfect_and_partial():
    cases = [make_case(0), make_case(1)]
    m = Scripted({
        cases[0].edit["zh"].prompt: cases[0].edit["zh"].target_new,
        cases[1].edit["zh"].prompt: "place1 xx",
    })
    v = reliability(m, cases, "en", "zh")
    assert v.value == pytest.approx((1.0 + 0.5) / 2)
    assert v.n_cases == 2


def test_locality_empty_base_rule():
    case = make_case(0)
    q = case.locality_probes["en"][0].query
    base = Scripted({})
    assert locality(Scripted({}), base, [case], "en", "en").value == 1.0
    assert locality(Scripted({q: "something"}), base, [case], "en", "en").value == 0.0


def test_locality_compares_to_base_not_gold():
    case = make_case(0)
    q = case.locality_probes["en"][0].query
    both = Scripted({q: "wrong answer"})
    assert locality(both, both, [case], "en", "en").value == 1.0


def test_missing_language_raises():
    with pytest.raises(MissingLanguage):
        reliability(Scripted({}), [make_case(0, langs=("en",))], "en", "zh")


def test_all_cases_skipped():
    case = make_case(0)
    bare = type(case)(edit=case.edit, rephrases={"en": (), "zh": ()}, locality_probes=case.locality_probes,
                      portability_probes=case.portability_probes)
    with pytest.raises(AllCasesSkipped):
        generality(Scripted({}), [bare], "en", "en")
    vals = evaluate_direction(Scripted({}), Scripted({}), [bare], "en", "en")
    assert "generality" not in {v.name for v in vals}


def test_portability_uses_probe_answers():
    case = make_case(2)
    p = case.portability_probes["zh"][0]
    assert portability(Scripted({p.query: p.answer}), [case], "en", "zh").value == 1.0


def test_metric_value_validation():
    with pytest.raises(ValueError):
        MetricValue("reliability", "en", "zh", 1.5, 3)
    with pytest.raises(ValueError):
        MetricValue("fluency", "en", "zh", 0.5, 3)


def test_round_percent_half_even():
    assert round_percent(0.910375) == Decimal("91.04")
    assert round_percent(0.12345) == Decimal("12.34")
    assert round_percent(0.12355) == Decimal("12.36")
    assert round_percent(1.0) == Decimal("100.00")


def _table():
    vals = [
        MetricValue("reliability", "en", "en", 0.9, 10),
        MetricValue("locality", "en", "en", 0.5, 10),
        MetricValue("reliability", "en", "zh", 0.7, 10),
        MetricValue("locality", "en", "zh", 0.1, 10),
    ]
    return aggregate(vals, "t")


def test_table_averages():
    t = _table()
    assert t.avg("en") == pytest.approx(0.55)
    assert t.lang_avg("en", "reliability") == pytest.approx(0.8)
    header, rows = t.formatted_rows()
    assert header == ["edit_lang", "en/reliability", "en/locality", "zh/reliability", "zh/locality",
                      "avg/reliability", "avg/locality", "Avg."]
    assert rows == [["en", "90.00", "50.00", "70.00", "10.00", "80.00", "30.00", "55.00"]]


def test_table_renderings_agree():
    t = _table()
    assert t.to_csv().splitlines()[1] == "en,90.00,50.00,70.00,10.00,80.00,30.00,55.00"
    doc = json.loads(t.to_json())
    assert doc["averages"][0]["Avg."] == 55.0
    assert "Avg." in t.to_text()
    assert ReportTable.from_dict(t.to_dict()).cells == t.cells
    with pytest.raises(ValueError):
        t.render("xml")


def test_aggregate_rejects_duplicates():
    v = MetricValue("reliability", "en", "en", 0.9, 1)
    with pytest.raises(DuplicateKey):
        aggregate([v, v])


def test_delta_of_table_with_itself_is_zero():
    t = _table()
    assert all(v == 0.0 for v in delta_table(t, t).cells.values())


@given(st.lists(st.floats(0, 1), min_size=1, max_size=8))
def test_avg_is_mean_of_cells(values):
    metrics = ["reliability", "generality", "locality", "portability"]
    vals = [MetricValue(metrics[i % 4], "en", f"l{i // 4}", v, 1) for i, v in enumerate(values)]
    t = aggregate(vals)
    assert t.avg("en") == pytest.approx(sum(values) / len(values))
    assert min(values) - 1e-12 <= t.avg("en") <= max(values) + 1e-12
