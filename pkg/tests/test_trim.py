from __future__ import annotations

import json
from collections import Counter

import pytest

from tme.gateway import ApiError, StaticResponder
from tme.memory import Forest, TaskNode
from tme.trim import (
    INTENT_TYPES,
    BackendUnavailable,
    ChainClassifier,
    LlmClassifier,
    MalformedOutput,
    NoRuleMatch,
    OffScript,
    RandomClassifier,
    RuleBasedClassifier,
    ScriptedClassifier,
    SubtaskIntent,
    decompose,
    dump_intents,
    make_classifier,
    parse_intent_json,
    prompt_template,
    random_intent_type,
    render_fewshot_prompt,
    system_prompt,
)

SUBSTITUTION = """[
  {
    "intent_type": "update",
    "subtask_title": "use mushrooms instead of celery",
    "parent_node": null,
    "dependency_nodes": [],
    "from": "Prepare mushrooms",
    "to": "Prepare celery"
  }
]"""

START_CHECK = """[
  {
    "intent_type": "check",
    "subtask_title": "verify start location",
    "parent_node": "schedule trip",
    "dependency_nodes": []
  }
]"""

MEETING = """[
  {
    "intent_type": "new",
    "subtask_title": "schedule team meeting",
    "parent_node": null,
    "dependency_nodes": []
  }
]"""


def test_schema_blocks_parse_to_expected_intents():
    assert parse_intent_json(SUBSTITUTION) == [
        SubtaskIntent("update", "use mushrooms instead of celery",
                      replacement="Prepare mushrooms", replaced="Prepare celery")
    ]
    assert parse_intent_json(START_CHECK) == [
        SubtaskIntent("check", "verify start location", parent_node="schedule trip")
    ]
    assert parse_intent_json(MEETING) == [SubtaskIntent("new", "schedule team meeting")]


@pytest.mark.parametrize("block", [SUBSTITUTION, START_CHECK, MEETING])
def test_schema_blocks_round_trip_in_both_conventions(block):
    intents = parse_intent_json(block)
    assert json.loads(dump_intents(intents, "schema")) == json.loads(block)
    internal = json.loads(dump_intents(intents, "internal"))
    assert "from" not in json.dumps(internal)
    assert parse_intent_json(json.dumps(internal)) == intents


def test_internal_names_for_replacement_fields():
    (intent,) = parse_intent_json(SUBSTITUTION)
    assert intent.to_dict("internal")["replacement"] == "Prepare mushrooms"
    assert intent.to_dict("internal")["replaced"] == "Prepare celery"
    with pytest.raises(ValueError):
        intent.to_dict("yaml")


def test_code_fences_are_tolerated():
    assert parse_intent_json(f"```json\n{MEETING}\n```") == parse_intent_json(MEETING)


@pytest.mark.parametrize(
    "raw",
    [
        "not json",
        "{}",
        '[{"intent_type": "delete", "subtask_title": "x"}]',
        '[{"intent_type": "new", "subtask_title": ""}]',
        '[{"intent_type": "check", "subtask_title": "x", "from": "a"}]',
        '[{"intent_type": "new", "subtask_title": "x", "from": "a", "to": "b"}]',
        '[{"intent_type": "new", "subtask_title": "x", "dependency_nodes": "a"}]',
        '[{"intent_type": "new", "subtask_title": 3}]',
        '["new"]',
    ],
)
def test_malformed_output_keeps_raw_text(raw):
    with pytest.raises(MalformedOutput) as info:
        parse_intent_json(raw)
    assert info.value.raw == raw


def test_action_only_on_updates():
    with pytest.raises(ValueError):
        SubtaskIntent("new", "x", action="rollback")
    with pytest.raises(ValueError):
        SubtaskIntent("update", "x", action="delete")


def test_prompt_asset_holds_system_line_and_examples():
    text = prompt_template()
    assert system_prompt().startswith("You are a task intent classifier.")
    assert text.count("Output:") == 3
    prompt = render_fewshot_prompt("My name is John Doe.", Forest())
    assert prompt.endswith("Input: “My name is John Doe.”\nOutput:")
    assert "- (empty)" in prompt


def test_scripted_classifier_replays_and_refuses_unknown_input():
    c = ScriptedClassifier([{"round": 1, "user_input": "hi", "intents": json.loads(MEETING)}])
    assert c.decompose("hi") == parse_intent_json(MEETING)
    with pytest.raises(OffScript):
        c.decompose("bye")
    with pytest.raises(ValueError):
        ScriptedClassifier([{"round": 1, "user_input": "hi", "intents": json.loads(MEETING)},
                            {"round": 2, "user_input": "hi", "intents": json.loads(START_CHECK)}])


def test_random_intents_are_deterministic_and_roughly_uniform():
    assert [random_intent_type(0, r) for r in range(1, 6)] == [random_intent_type(0, r) for r in range(1, 6)]
    counts = Counter(random_intent_type(seed, 1) for seed in range(3000))
    assert set(counts) == set(INTENT_TYPES)
    # chi-square with 2 degrees of freedom, p = 0.001 critical value 13.8
    chi2 = sum((c - 1000) ** 2 / 1000 for c in counts.values())
    assert chi2 < 13.8
    (intent,) = RandomClassifier(7).decompose("anything", None, round=3)
    assert intent.subtask_title == "anything"
    with pytest.raises(ValueError):
        RandomClassifier(7).decompose("anything")


def form_forest() -> Forest:
    f = Forest()
    f.add_node(TaskNode("fill.form"))
    f.add_node(TaskNode("collect.name", "John Doe", parent="fill.form"))
    return f


@pytest.mark.parametrize(
    "text, expected",
    [
        ("Help me fill out a form, I will provide some of my information to you.",
         [SubtaskIntent("new", "fill form", value="")]),
        ("My email is john@example.com.",
         [SubtaskIntent("new", "collect email", parent_node="fill.form", slot="collect.email",
                        value="john@example.com")]),
        ("Sorry, to correct, my name is John Smith.",
         [SubtaskIntent("update", "update name", slot="collect.name", value="John Smith")]),
        ("name: go back to the old one", [SubtaskIntent("update", "update name", slot="collect.name",
                                                        action="rollback")]),
        ("Remove the name.", [SubtaskIntent("update", "remove name", slot="collect.name", action="inactivate")]),
        ("start: By the way, wasn’t I departing from Boston?",
         [SubtaskIntent("check", "verify start", parent_node="fill.form")]),
    ],
)
def test_rule_based_classifier(text, expected):
    assert RuleBasedClassifier().decompose(text, form_forest()) == expected


def test_rule_based_splits_clauses_and_links_submit():
    got = RuleBasedClassifier().decompose("Help to repeat my information, then submit.", form_forest())
    assert [i.intent_type for i in got] == ["check", "new"]
    assert got[1].dependency_nodes == ("collect.name",)


def test_rule_based_strict_mode_defers():
    with pytest.raises(NoRuleMatch):
        RuleBasedClassifier(strict=True).decompose("Let's cook something", Forest())
    assert RuleBasedClassifier().decompose("Let's cook something", Forest())[0].intent_type == "new"


class Failing:
    def respond(self, request):
        raise ApiError(503, "busy")


def test_llm_classifier_parses_backend_output_and_wraps_failures():
    assert LlmClassifier(StaticResponder(MEETING)).decompose("x", Forest()) == parse_intent_json(MEETING)
    with pytest.raises(MalformedOutput):
        LlmClassifier(StaticResponder("sure!")).decompose("x", Forest())
    with pytest.raises(BackendUnavailable):
        LlmClassifier(Failing()).decompose("x", Forest())


def test_hybrid_prefers_rules_then_falls_back():
    hybrid = make_classifier("hybrid", responder=StaticResponder(MEETING))
    assert hybrid.decompose("My name is Ann.", Forest())[0].slot == "collect.name"
    assert hybrid.decompose("Let's cook something", Forest()) == parse_intent_json(MEETING)
    with pytest.raises(ValueError):
        ChainClassifier([])
    with pytest.raises(ValueError):
        make_classifier("oracle")


def test_decompose_rejects_empty_input():
    with pytest.raises(ValueError):
        decompose("  ", Forest(), RuleBasedClassifier())
