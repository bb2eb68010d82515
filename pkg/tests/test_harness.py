from __future__ import annotations

import csv
import io
import json
import shutil

import pytest

from tme import harness
from tme.engine import BASELINE_FLAT, TME_DAG, TME_FLAT, TME_RANDOM_TRIM, SessionState
from tme.harness import (
    FixtureGap,
    RunReport,
    ScenarioScript,
    StateAssertion,
    TokenReport,
    TokenRow,
    evaluate,
    export_table,
    replay,
    run_suite,
)
from tme.memory import Forest, TaskNode


@pytest.mark.parametrize("name", harness.SUITE_SCENARIOS)
def test_each_scenario_is_consistent_under_the_graph_variant(name):
    report = replay(harness.load_scenario(name), TME_DAG)
    assert (report.hallucinations, report.confusions, report.consistent) == (0, 0, True)


def failed_at(report: RunReport, rnd: int) -> list[str]:
    return report.round_details[rnd - 1].failed_assertions


def test_flat_transcript_keeps_stale_celery_in_the_soup():
    report = replay(harness.load_scenario("cooking"), TME_FLAT)
    assert "make soup value_not_contains 'celery'" in failed_at(report, 5)
    assert not report.consistent


def test_flat_transcript_fails_the_trip_summary():
    report = replay(harness.load_scenario("trip"), TME_FLAT)
    assert failed_at(report, 11)
    assert not report.consistent


def test_flat_variants_are_at_most_one_in_four():
    result = run_suite([TME_FLAT], harness.SUITE_SCENARIOS)
    assert sum(r.consistent for r in result.reports) <= 1


@pytest.mark.parametrize("name", harness.SUITE_SCENARIOS)
def test_random_intents_mismatch_gold_at_least_once(name):
    script = harness.load_scenario(name)
    assert script.random_seed == 0
    report = replay(script, TME_RANDOM_TRIM)
    assert report.confusions >= 1 and not report.consistent


def test_unadapted_cart_misreads_the_case_request():
    script = harness.load_scenario("cart")
    assert script.adaptation
    report = replay(script, TME_DAG, adaptation=False)
    assert (report.hallucinations, report.confusions, report.consistent) == (1, 1, False)
    assert failed_at(report, 4) == ["shopping cart value_not_contains 'two iPhone cases'"]


def test_baseline_is_never_scored_for_confusion():
    report = replay(harness.load_scenario("trip"), BASELINE_FLAT)
    assert report.confusions == 0
    assert all(d.produced_types is None for d in report.round_details)


def test_empty_script_scores_as_consistent():
    report = replay(ScenarioScript("empty", []), TME_DAG)
    assert (report.rounds, report.hallucinations, report.confusions, report.consistent) == (0, 0, 0, True)


def test_round_indices_must_be_contiguous():
    doc = json.loads((harness.fixture_dir() / "meeting.json").read_text())
    doc["rounds"][1]["round"] = 7
    with pytest.raises(ValueError):
        ScenarioScript.from_dict(doc)


def test_unknown_predicate_rejected():
    with pytest.raises(ValueError):
        StateAssertion("x", "value_matches", "y")


def form_state() -> SessionState:
    forest = Forest()
    forest.add_node(TaskNode("fill.form"))
    forest.add_node(TaskNode("collect.name", "John Doe", parent="fill.form"))
    forest.update_node("collect.name", "John Smith")
    return SessionState(TME_DAG, forest=forest)


@pytest.mark.parametrize(
    "assertion, expected",
    [
        (StateAssertion("collect name", "value_equals", "John Smith"), True),
        (StateAssertion("collect.name", "value_equals", "John Doe"), False),
        (StateAssertion("fill form", "value_contains", "john smith"), True),
        (StateAssertion("fill form", "value_not_contains", "John Doe"), True),
        (StateAssertion("collect email", "node_absent"), True),
        (StateAssertion("collect name", "node_inactive"), False),
        (StateAssertion("collect email", "value_contains", "x"), False),
    ],
)
def test_assertions_on_graph_state(assertion, expected):
    assert evaluate(assertion, form_state()) is expected


def test_assertions_on_flat_state_read_the_user_turns():
    state = SessionState(TME_FLAT, transcript=[("user", "My name is John Doe"), ("assistant", "Hi John Smith")])
    assert evaluate(StateAssertion("collect name", "value_equals", "john doe"), state)
    assert not evaluate(StateAssertion("collect name", "value_equals", "John Smith"), state)
    assert not evaluate(StateAssertion("fill form", "value_not_contains", "John Doe"), state)
    assert evaluate(StateAssertion("x", "node_absent"), state)
    assert not evaluate(StateAssertion("x", "node_inactive"), state)


def test_response_quoting_an_old_value_is_a_contradiction():
    state = form_state()
    claim = StateAssertion("collect name", "value_equals", "John Smith")
    assert harness.contradicts("Your name is John Doe.", claim, state)
    assert not harness.contradicts("Your name is John Smith, not John Doe.", claim, state)
    assert not harness.contradicts("Thanks, John Doe.", claim, state)


def test_single_cell_suite():
    result = run_suite([TME_DAG], ["meeting"])
    (report,) = result.reports
    assert report.scenario == "meeting" and report.consistent and not result.errors


def test_broken_cells_are_collected_not_raised(tmp_path):
    shutil.copytree(harness.fixture_dir(), tmp_path, dirs_exist_ok=True)
    (tmp_path / "meeting.responses.json").write_text("{}")
    result = run_suite([TME_DAG], ["meeting", "cart"], fixtures=tmp_path)
    (bad,) = result.errors
    assert bad.scenario == "meeting" and "FixtureGap" in bad.error
    assert result.for_variant(TME_DAG)[1].consistent


def test_suite_table_rows():
    result = run_suite([TME_DAG, TME_FLAT, TME_RANDOM_TRIM])
    rows = list(csv.reader(io.StringIO(export_table(result.reports, "csv"))))
    assert rows[0] == list(harness.COLUMNS)
    assert rows[1] == ["tme_dag", "27", "0", "0", "4/4"]
    assert rows[2][0] == "tme_flat" and rows[2][4] == "0/4"
    assert rows[3][0] == "tme_random_trim" and rows[3][4] == "0/4"


def test_counted_round_count_skips_the_trip_preamble():
    script = harness.load_scenario("trip")
    assert (len(script.rounds), script.counted_rounds) == (11, 10)


def test_table_formats():
    assert export_table([], "csv") == ",".join(harness.COLUMNS) + "\n"
    reports = [replay(harness.load_scenario("meeting"), TME_DAG)]
    (row,) = json.loads(export_table(reports, "json"))
    assert row == {"System": "tme_dag", "Rounds": 5, "Hallucinations": 0, "Confusions": 0, "Consistent Tasks": "1/1"}
    text = export_table(reports, extra_rows=harness.REFERENCE_CASE_STUDY_ROWS[:1])
    assert text.splitlines()[0].startswith("System")
    with pytest.raises(ValueError):
        export_table(reports, "xml")


def test_token_report_matches_recorded_tables():
    script = harness.load_scenario("form_filling")
    report = harness.token_report(script, harness.load_token_table("form_filling"))
    assert [r.baseline for r in report.rows] == [49, 80, 116, 164, 215, 275]
    assert [r.tme for r in report.rows] == [49, 82, 88, 104, 123, 279]
    assert (report.baseline_total, report.tme_total, report.saved_total) == (899, 725, 174)
    assert report.savings == "19.4%"
    assert report.first(5) == (624, 446, "28.5%")
    assert report.render().endswith("First 5 rounds: 624 vs 446, savings 28.5%\n")
    assert json.loads(report.render("json"))["total"]["savings"] == "19.4%"


def test_token_report_oracle_for_savings():
    rows = [TokenRow(1, 49, 49), TokenRow(2, 80, 82)]
    report = TokenReport(rows)
    assert report.savings == f"{(129 - 131) / 129 * 100:.1f}%"
    assert TokenReport([TokenRow(1, 10, 10)]).savings == "0.0%"
    assert TokenReport([TokenRow(1, 0, 0)]).savings == "0.0%"
    with pytest.raises(ValueError):
        report.render("xml")


@pytest.mark.parametrize("name", harness.SCENARIOS)
def test_regeneration_reproduces_the_checked_in_fixtures(name):
    for filename, doc in harness.regenerate(name).items():
        assert harness.dump_fixture(doc) == (harness.fixture_dir() / filename).read_text(encoding="utf-8")


def test_replay_is_deterministic():
    script = harness.load_scenario("trip")
    a = replay(script, TME_RANDOM_TRIM).to_dict()
    b = replay(script, TME_RANDOM_TRIM).to_dict()
    assert a == b


def test_parallel_suite_matches_serial():
    serial = run_suite([TME_DAG, TME_RANDOM_TRIM], jobs=1)
    parallel = run_suite([TME_DAG, TME_RANDOM_TRIM], jobs=4)
    assert [r.to_dict() for r in serial.reports] == [r.to_dict() for r in parallel.reports]


def test_fixture_dir_override(tmp_path, monkeypatch):
    monkeypatch.setenv(harness.FIXTURE_ENV, str(tmp_path))
    assert harness.fixture_dir() == tmp_path
    with pytest.raises(harness.HarnessError):
        harness.load_scenario("trip")


def test_missing_seed_is_a_fixture_gap():
    script = ScenarioScript.from_dict(json.loads((harness.fixture_dir() / "meeting.json").read_text()))
    script.random_seed = None
    with pytest.raises(FixtureGap):
        replay(script, TME_RANDOM_TRIM)


def test_session_at_bounds():
    script = harness.load_scenario("meeting")
    assert len(harness.session_at(script, upto=0).forest) == 0
    with pytest.raises(ValueError):
        harness.session_at(script, upto=6)
