from __future__ import annotations

import io
import json
import shutil

from tme import harness
from tme.cli import EXIT_BACKEND, EXIT_FAILED, EXIT_OK, EXIT_USAGE, main
from tme.memory import load

FORM_INPUTS = [
    "Help me fill out a form, I will provide some of my information to you.",
    "My name is John Doe.",
    "My email is john@example.com.",
    "My address is Market Street, San Francisco.",
    "Sorry, to correct, my name is John Smith.",
]


def cli(*argv: str, stdin: str = ""):
    out, err = io.StringIO(), io.StringIO()
    code = main(list(argv), stdin=io.StringIO(stdin), stdout=out, stderr=err)
    return code, out.getvalue(), err.getvalue()


def test_tokens_table():
    code, out, _ = cli("tokens", "--scenario", "form_filling")
    assert code == EXIT_OK
    assert "Total                     899         725           174        19.4%" in out
    assert out.endswith("First 5 rounds: 624 vs 446, savings 28.5%\n")


def test_strict_suite_passes_and_writes_file(tmp_path):
    target = tmp_path / "table.csv"
    code, out, _ = cli("suite", "--variants", "tme_dag", "--format", "csv", "--strict", "--out", str(target))
    assert code == EXIT_OK and out == ""
    assert target.read_text().splitlines()[1] == "tme_dag,27,0,0,4/4"


def test_reference_rows_are_appended_for_display():
    code, out, _ = cli("suite", "--variants", "tme_dag", "--format", "json", "--reference-rows")
    assert code == EXIT_OK
    rows = json.loads(out)
    assert rows[0]["System"] == "tme_dag" and len(rows) == 4


def test_strict_replay_of_unadapted_cart_fails():
    code, out, _ = cli("replay", "--scenario", "cart", "--no-adaptation", "--strict")
    assert code == EXIT_FAILED
    assert "two iPhone cases" in out
    assert cli("replay", "--scenario", "cart", "--strict")[0] == EXIT_OK


def test_replay_json():
    code, out, _ = cli("replay", "--scenario", "meeting", "--variant", "tme_random_trim", "--format", "json")
    assert code == EXIT_OK
    assert json.loads(out)["confusions"] >= 1


def test_usage_errors():
    assert cli("replay")[0] == EXIT_USAGE
    assert cli("suite", "--jobs", "0")[0] == EXIT_USAGE
    assert cli("export", "--scenario", "trip", "--round", "40")[0] == EXIT_USAGE
    code, _, err = cli("repl", "--responder", "http")
    assert code == EXIT_USAGE and "--live" in err
    assert cli("--help")[0] == EXIT_OK


def test_broken_fixtures_exit_3(tmp_path):
    shutil.copytree(harness.fixture_dir(), tmp_path, dirs_exist_ok=True)
    (tmp_path / "cooking.responses.json").write_text("{}")
    code, _, err = cli("suite", "--variants", "tme_dag", "--fixtures", str(tmp_path))
    assert code == EXIT_BACKEND and "cooking" in err
    (tmp_path / "trip.json").write_text("{")
    assert cli("replay", "--scenario", "trip", "--fixtures", str(tmp_path))[0] == EXIT_BACKEND


def test_export_dot_after_global_replace():
    code, out, _ = cli("export", "--scenario", "cooking", "--round", "4")
    assert code == EXIT_OK
    assert out.startswith("digraph")
    assert "wash and chop mushrooms" in out and "history: wash and chop celery" in out


def test_export_json_round_trips():
    code, out, _ = cli("export", "--scenario", "form_filling", "--format", "json")
    assert code == EXIT_OK
    assert load(out).node("collect.name").value == "John Smith"


def test_repl_form_session():
    script = "\n".join(FORM_INPUTS + [":state", ":tokens", ":quit", "never read"]) + "\n"
    code, out, err = cli("repl", stdin=script)
    assert code == EXIT_OK
    assert out.count("assistant> Noted.") == 5
    node = load(out[out.index("{"):out.index("\nround 1:")]).node("collect.name")
    assert (node.value, node.history) == ("John Smith", ["John Doe"])
    rows = [line for line in out.splitlines() if line.startswith("round ")]
    assert len(rows) == 5
    assert "total:" in out and "never read" not in out + err


def test_repl_reports_meta_errors_and_keeps_going():
    code, out, err = cli("repl", "--variant", "baseline_flat", stdin=":state\n:bogus\nhello\n")
    assert code == EXIT_OK
    assert "keeps no task graph" in err and "unknown command" in err
    assert "assistant> Noted." in out
