"""Scenario replay, scoring and result tables."""

from __future__ import annotations

import csv
import io
import json
import os
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .engine import (
    BASELINE_FLAT,
    DAG_VARIANTS,
    TME_DAG,
    TME_FLAT,
    TME_RANDOM_TRIM,
    VARIANTS,
    ApproximateCounter,
    RecordedCounter,
    SessionState,
    UnrecordedPrompt,
    step,
)
from .gateway import ChatRequest, RecordedResponder, UnrecordedRequest
from .memory import Forest, normalize
from .trim import OffScript, RandomClassifier, ScriptedClassifier, SubtaskIntent, intent_from_dict

SCENARIOS = ("trip", "cooking", "meeting", "cart", "form_filling")
SUITE_SCENARIOS = ("trip", "cooking", "meeting", "cart")
PREDICATES = ("value_equals", "value_contains", "value_not_contains", "node_absent", "node_inactive")
FIXTURE_ENV = "TME_FIXTURE_DIR"
UNADAPTED = "unadapted"

COLUMNS = ("System", "Rounds", "Hallucinations", "Confusions", "Consistent Tasks")

# Rows reported for systems that have no replayable script. Display only.
REFERENCE_CASE_STUDY_ROWS = (
    ("base-flat", 27, 4, 4, "2/4"),
    ("CoT", 27, 4, 1, "3/4"),
    ("ReAct", 27, 3, 5, "2/4"),
    ("TME-DAG", 27, 0, 0, "4/4"),
)
REFERENCE_ABLATION_ROWS = (
    ("TME-DAG", 27, 0, 0, "4/4"),
    ("TME-RandomTRIM", 27, 3, 6, "0/4"),
    ("TME-Flat", 27, 2, 4, "1/4"),
)


class HarnessError(Exception):
    pass


class FixtureGap(HarnessError):
    """An offline replay needed a recorded response, intent or count that is missing."""


# ---------------------------------------------------------------------------
# fixtures


def fixture_dir(override: str | Path | None = None) -> Path:
    if override is not None:
        return Path(override)
    env = os.environ.get(FIXTURE_ENV)
    if env:
        return Path(env)
    return Path(str(resources.files("tme").joinpath("fixtures")))


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FixtureGap(f"missing fixture file {path}") from None
    except json.JSONDecodeError as exc:
        raise HarnessError(f"{path}: invalid JSON ({exc})") from None


def responder_key(variant: str, adaptation: bool = True) -> str:
    return variant if adaptation else f"{variant}:{UNADAPTED}"


def load_responses(name: str, variant: str, adaptation: bool = True, root: Path | None = None) -> RecordedResponder:
    doc = _read_json(fixture_dir(root) / f"{name}.responses.json")
    key = responder_key(variant, adaptation)
    if key not in doc:
        raise FixtureGap(f"{name}.responses.json has no table for {key!r}")
    return RecordedResponder(doc[key])


def load_token_table(name: str, root: Path | None = None) -> RecordedCounter:
    return RecordedCounter(_read_json(fixture_dir(root) / f"{name}.tokens.json"))


def load_scenario(name: str, root: Path | None = None) -> ScenarioScript:
    return ScenarioScript.from_dict(_read_json(fixture_dir(root) / f"{name}.json"))


# ---------------------------------------------------------------------------
# scripts and assertions


@dataclass(frozen=True)
class StateAssertion:
    target: str
    predicate: str
    argument: str = ""

    def __post_init__(self) -> None:
        if self.predicate not in PREDICATES:
            raise ValueError(f"unknown predicate {self.predicate!r}")
        if not self.target.strip():
            raise ValueError("assertion target must be non-empty")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> StateAssertion:
        return cls(doc["target"], doc["predicate"], doc.get("argument", ""))

    def to_dict(self) -> dict[str, str]:
        return {"target": self.target, "predicate": self.predicate, "argument": self.argument}

    def __str__(self) -> str:
        return f"{self.target} {self.predicate} {self.argument!r}".rstrip()


@dataclass(frozen=True)
class ScriptRound:
    index: int
    user_input: str
    gold_intents: tuple[SubtaskIntent, ...]
    gold_state: tuple[StateAssertion, ...] = ()
    recorded_responses: Mapping[str, str] = field(default_factory=dict)
    recorded_tokens: Mapping[str, int] | None = None
    unadapted_intents: tuple[SubtaskIntent, ...] | None = None

    def response_for(self, variant: str, adaptation: bool = True) -> str:
        """Scripted response text, falling back to the graph variant's line."""
        for key in (responder_key(variant, adaptation), variant, TME_DAG):
            if key in self.recorded_responses:
                return self.recorded_responses[key]
        raise FixtureGap(f"round {self.index} has no recorded response for {variant}")


@dataclass
class ScenarioScript:
    name: str
    rounds: list[ScriptRound]
    random_seed: int | None = None
    flags: dict[str, Any] = field(default_factory=dict)
    uncounted_rounds: tuple[int, ...] = ()
    prompt_comparison: dict[str, Any] | None = None

    def __post_init__(self) -> None:
        for expected, rnd in enumerate(self.rounds, start=1):
            if rnd.index != expected:
                raise ValueError(f"{self.name}: round indices must run 1..n, found {rnd.index}")

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> ScenarioScript:
        rounds = []
        for item in doc.get("rounds", []):
            unadapted = item.get("unadapted_intents")
            rounds.append(
                ScriptRound(
                    index=item["round"],
                    user_input=item["user_input"],
                    gold_intents=tuple(intent_from_dict(i) for i in item["intents"]),
                    gold_state=tuple(StateAssertion.from_dict(a) for a in item.get("gold_state", [])),
                    recorded_responses=dict(item.get("recorded_responses", {})),
                    recorded_tokens=item.get("recorded_tokens"),
                    unadapted_intents=None
                    if unadapted is None
                    else tuple(intent_from_dict(i) for i in unadapted),
                )
            )
        return cls(
            name=doc["name"],
            rounds=rounds,
            random_seed=doc.get("random_seed"),
            flags=dict(doc.get("flags", {})),
            uncounted_rounds=tuple(doc.get("uncounted_rounds", ())),
            prompt_comparison=doc.get("prompt_comparison"),
        )

    @property
    def counted_rounds(self) -> int:
        return len(self.rounds) - len([r for r in self.uncounted_rounds if r <= len(self.rounds)])

    @property
    def adaptation(self) -> bool:
        return bool(self.flags.get("trim_adaptation", True))

    def intents_for(self, rnd: ScriptRound, adaptation: bool) -> tuple[SubtaskIntent, ...]:
        if not adaptation and rnd.unadapted_intents is not None:
            return rnd.unadapted_intents
        return rnd.gold_intents

    def scripted_classifier(self, adaptation: bool | None = None) -> ScriptedClassifier:
        adaptation = self.adaptation if adaptation is None else adaptation
        return ScriptedClassifier(
            {
                "round": r.index,
                "user_input": r.user_input,
                "intents": [i.to_dict("internal") for i in self.intents_for(r, adaptation)],
            }
            for r in self.rounds
        )


# ---------------------------------------------------------------------------
# scoring


def _resolve(forest: Forest, target: str) -> str | None:
    if target in forest:
        return target
    return forest.shared_index.get(normalize(target))


def task_text(forest: Forest, slot: str) -> str:
    """Values of the task rooted at ``slot`` joined into one string; empty if inactive."""
    if not forest.node(slot).active:
        return ""
    return " | ".join(forest.node(s).value for s in forest.task_view(slot))


def evaluate(assertion: StateAssertion, state: SessionState) -> bool:
    """Check one gold assertion against a session.

    Graph variants are checked against the node (``value_equals``) or the
    task view rooted at it (contains predicates). Flat variants have no
    nodes, so they are checked against everything the user has said.
    """
    pred, arg = assertion.predicate, assertion.argument
    if not state.uses_forest:
        said = "\n".join(text for who, text in state.transcript if who == "user").casefold()
        if pred in ("value_equals", "value_contains"):
            return arg.casefold() in said
        if pred == "value_not_contains":
            return arg.casefold() not in said
        return pred == "node_absent"

    forest = state.forest
    slot = _resolve(forest, assertion.target)
    if pred == "node_absent":
        return slot is None
    if slot is None:
        return False
    node = forest.node(slot)
    if pred == "node_inactive":
        return not node.active
    if pred == "value_equals":
        return node.active and node.value == arg
    text = task_text(forest, slot).casefold()
    if pred == "value_contains":
        return arg.casefold() in text
    return arg.casefold() not in text


def contradicts(response: str, assertion: StateAssertion, state: SessionState) -> bool:
    """Does the response restate a superseded value of the asserted field?

    Only responses that name the field (the last segment of its slot) and
    quote an older value without the asserted one count.
    """
    if assertion.predicate != "value_equals" or not state.uses_forest:
        return False
    forest = state.forest
    slot = _resolve(forest, assertion.target)
    if slot is None:
        return False
    said = response.casefold()
    field_words = slot.rsplit(".", 1)[-1].replace("_", " ").casefold()
    if field_words not in said or assertion.argument.casefold() in said:
        return False
    superseded = set(forest.node(slot).history)
    superseded.update(r.old_value for r in forest.revisions if r.slot == slot)
    superseded.discard(assertion.argument)
    return any(old and old.casefold() in said for old in superseded)


@dataclass
class RoundDetail:
    round: int
    user_input: str
    gold_types: list[str]
    produced_types: list[str] | None
    confusion: bool
    failed_assertions: list[str]
    contradicted: list[str]
    hallucination: bool
    response: str
    tokens: int
    warnings: list[str]


@dataclass
class RunReport:
    scenario: str
    variant: str
    rounds: int
    counted_rounds: int
    hallucinations: int = 0
    confusions: int = 0
    consistent: bool = True
    round_details: list[RoundDetail] = field(default_factory=list)
    adaptation: bool = True
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _confused(gold: Sequence[str], produced: Sequence[str] | None) -> bool:
    """Position-wise type comparison over the gold intents; a missing intent counts."""
    if produced is None:
        return False
    return any(i >= len(produced) or produced[i] != g for i, g in enumerate(gold))


def replay(
    script: ScenarioScript,
    variant: str = TME_DAG,
    classifier: Any = None,
    responder: Any = None,
    counter: Any = None,
    adaptation: bool | None = None,
    seed: int | None = None,
    fixtures: Path | None = None,
) -> RunReport:
    """Run every round of ``script`` through ``variant`` and score it."""
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    adaptation = script.adaptation if adaptation is None else adaptation
    if classifier is None:
        if variant == TME_RANDOM_TRIM:
            seed = script.random_seed if seed is None else seed
            if seed is None:
                raise FixtureGap(f"{script.name} pins no random seed")
            classifier = RandomClassifier(seed)
        else:
            classifier = script.scripted_classifier(adaptation)
    if responder is None and script.rounds:
        responder = load_responses(script.name, variant, adaptation, fixtures)
    counter = counter or ApproximateCounter()

    report = RunReport(
        scenario=script.name,
        variant=variant,
        rounds=len(script.rounds),
        counted_rounds=script.counted_rounds,
        adaptation=adaptation,
    )
    state = SessionState(variant=variant)
    failed: list[str] = []
    for rnd in script.rounds:
        try:
            state, response = step(state, rnd.user_input, classifier, responder, counter)
        except (OffScript, UnrecordedRequest, UnrecordedPrompt) as exc:
            raise FixtureGap(f"{script.name} round {rnd.index} under {variant}: {exc}") from exc
        entry = state.log[-1]
        produced = None if entry["intents"] is None else [i["intent_type"] for i in entry["intents"]]
        gold = [i.intent_type for i in rnd.gold_intents]
        failed = [str(a) for a in rnd.gold_state if not evaluate(a, state)]
        contradicted = [str(a) for a in rnd.gold_state if contradicts(response, a, state)]
        detail = RoundDetail(
            round=rnd.index,
            user_input=rnd.user_input,
            gold_types=gold,
            produced_types=produced,
            confusion=_confused(gold, produced) if variant != BASELINE_FLAT else False,
            failed_assertions=failed,
            contradicted=contradicted,
            hallucination=bool(failed or contradicted),
            response=response,
            tokens=entry["tokens"],
            warnings=list(entry["warnings"]),
        )
        report.round_details.append(detail)
        report.confusions += detail.confusion
        report.hallucinations += detail.hallucination
    report.consistent = report.hallucinations == 0 and report.confusions == 0 and not failed
    return report


# ---------------------------------------------------------------------------
# suite


@dataclass
class SuiteResult:
    reports: list[RunReport]

    @property
    def errors(self) -> list[RunReport]:
        return [r for r in self.reports if r.error is not None]

    def for_variant(self, variant: str) -> list[RunReport]:
        return [r for r in self.reports if r.variant == variant]


def _cell(name: str, variant: str, fixtures: Path | None, options: Mapping[str, Any]) -> RunReport:
    try:
        script = load_scenario(name, fixtures)
        return replay(script, variant, fixtures=fixtures, **options)
    except Exception as exc:  # one bad cell must not sink the suite
        return RunReport(
            scenario=name,
            variant=variant,
            rounds=0,
            counted_rounds=0,
            consistent=False,
            error=f"{type(exc).__name__}: {exc}",
        )


def run_suite(
    variants: Sequence[str] = (TME_DAG, TME_FLAT, TME_RANDOM_TRIM),
    scenarios: Sequence[str] = SUITE_SCENARIOS,
    jobs: int = 1,
    fixtures: Path | None = None,
    **options: Any,
) -> SuiteResult:
    """Replay every (scenario, variant) cell; each cell owns its session."""
    cells = [(s, v) for v in variants for s in scenarios]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(lambda c: _cell(c[0], c[1], fixtures, options), cells))
    else:
        reports = [_cell(s, v, fixtures, options) for s, v in cells]
    return SuiteResult(reports)


@dataclass(frozen=True)
class TableRow:
    system: str
    rounds: int
    hallucinations: int
    confusions: int
    consistent: str

    def cells(self) -> tuple[Any, ...]:
        return (self.system, self.rounds, self.hallucinations, self.confusions, self.consistent)


def summarize(reports: Iterable[RunReport]) -> list[TableRow]:
    """One row per variant, in first-seen order. Rounds exclude each script's uncounted rounds."""
    grouped: dict[str, list[RunReport]] = {}
    for report in reports:
        grouped.setdefault(report.variant, []).append(report)
    rows = []
    for variant, group in grouped.items():
        rows.append(
            TableRow(
                system=variant,
                rounds=sum(r.counted_rounds for r in group),
                hallucinations=sum(r.hallucinations for r in group),
                confusions=sum(r.confusions for r in group),
                consistent=f"{sum(r.consistent for r in group)}/{len(group)}",
            )
        )
    return rows


def export_table(
    reports: Iterable[RunReport] | Iterable[TableRow],
    format: str = "text",
    extra_rows: Iterable[Sequence[Any]] = (),
) -> str:
    """Render a result table with columns System, Rounds, Hallucinations, Confusions, Consistent Tasks."""
    items = list(reports)
    rows = [r for r in items if isinstance(r, TableRow)]
    rows += summarize(r for r in items if isinstance(r, RunReport))
    body = [row.cells() for row in rows] + [tuple(r) for r in extra_rows]
    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(COLUMNS)
        writer.writerows(body)
        return buf.getvalue()
    if format == "json":
        return json.dumps([dict(zip(COLUMNS, r)) for r in body], indent=2)
    if format == "text":
        return _aligned([COLUMNS, *body])
    raise ValueError(f"unknown format {format!r}")


def _aligned(rows: Sequence[Sequence[Any]]) -> str:
    text = [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in text) for i in range(len(text[0]))]
    lines = []
    for n, row in enumerate(text):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# token report


def percent(saved: int, baseline: int) -> str:
    return f"{(saved / baseline * 100 if baseline else 0.0):.1f}%"


@dataclass(frozen=True)
class TokenRow:
    round: int
    baseline: int
    tme: int

    @property
    def saved(self) -> int:
        return self.baseline - self.tme

    @property
    def savings(self) -> str:
        return percent(self.saved, self.baseline)


@dataclass
class TokenReport:
    rows: list[TokenRow]

    @property
    def baseline_total(self) -> int:
        return sum(r.baseline for r in self.rows)

    @property
    def tme_total(self) -> int:
        return sum(r.tme for r in self.rows)

    @property
    def saved_total(self) -> int:
        return self.baseline_total - self.tme_total

    @property
    def savings(self) -> str:
        return percent(self.saved_total, self.baseline_total)

    def first(self, n: int) -> tuple[int, int, str]:
        head = self.rows[:n]
        base, tme = sum(r.baseline for r in head), sum(r.tme for r in head)
        return base, tme, percent(base - tme, base)

    def to_dict(self) -> dict[str, Any]:
        base5, tme5, pct5 = self.first(5)
        return {
            "rows": [
                {"round": r.round, "baseline": r.baseline, "tme": r.tme, "saved": r.saved, "savings": r.savings}
                for r in self.rows
            ],
            "total": {
                "baseline": self.baseline_total,
                "tme": self.tme_total,
                "saved": self.saved_total,
                "savings": self.savings,
            },
            "first_five": {"baseline": base5, "tme": tme5, "savings": pct5},
        }

    def render(self, format: str = "text") -> str:
        head = ("Round", "Baseline-flat Tokens", "TME Tokens", "Tokens Saved", "Savings (%)")
        body = [(f"Round {r.round}", r.baseline, r.tme, r.saved, r.savings) for r in self.rows]
        total = ("Total", self.baseline_total, self.tme_total, self.saved_total, self.savings)
        base5, tme5, pct5 = self.first(5)
        if format == "json":
            return json.dumps(self.to_dict(), indent=2) + "\n"
        if format == "csv":
            buf = io.StringIO()
            writer = csv.writer(buf, lineterminator="\n")
            writer.writerows([head, *body, total])
            return buf.getvalue()
        if format != "text":
            raise ValueError(f"unknown format {format!r}")
        return _aligned([head, *body, total]) + (
            f"First {min(5, len(self.rows))} rounds: {base5} vs {tme5}, savings {pct5}\n"
        )


def token_report(script: ScenarioScript, counter: Any, fixtures: Path | None = None) -> TokenReport:
    """Per-round prompt tokens of baseline_flat against tme_dag."""
    runs = {}
    for variant in (BASELINE_FLAT, TME_DAG):
        runs[variant] = _ledger(script, variant, counter, fixtures)
    return TokenReport(
        [
            TokenRow(rnd, base, tme)
            for (rnd, base), (_, tme) in zip(runs[BASELINE_FLAT], runs[TME_DAG])
        ]
    )


def _ledger(script: ScenarioScript, variant: str, counter: Any, fixtures: Path | None) -> list[tuple[int, int]]:
    classifier = script.scripted_classifier()
    responder = load_responses(script.name, variant, script.adaptation, fixtures) if script.rounds else None
    state = SessionState(variant=variant)
    for rnd in script.rounds:
        try:
            state, _ = step(state, rnd.user_input, classifier, responder, counter)
        except (OffScript, UnrecordedRequest) as exc:
            raise FixtureGap(str(exc)) from exc
    return state.ledger.rows


# ---------------------------------------------------------------------------
# fixture recording


class ScriptResponder:
    """Answers from the script's per-round text and remembers each request hash."""

    kind = "script"

    def __init__(self, script: ScenarioScript, variant: str, adaptation: bool = True) -> None:
        self.script = script
        self.variant = variant
        self.adaptation = adaptation
        self.round = 0
        self.table: dict[str, str] = {}
        self.prompts: dict[int, str] = {}

    def respond(self, request: ChatRequest) -> str:
        rnd = self.script.rounds[self.round]
        text = rnd.response_for(self.variant, self.adaptation)
        key = request.hash()
        if self.table.get(key, text) != text:
            raise HarnessError(f"{self.script.name}: two rounds share request {key[:12]} with different text")
        self.table[key] = text
        self.prompts[rnd.index] = request.messages[-1]["content"]
        self.round += 1
        return text


def record_responses(script: ScenarioScript, variants: Sequence[str] = VARIANTS) -> dict[str, dict[str, str]]:
    """Build the ``<name>.responses.json`` document by replaying with scripted text."""
    out: dict[str, dict[str, str]] = {}
    tracks = [(v, True) for v in variants]
    if any(r.unadapted_intents is not None for r in script.rounds):
        tracks += [(v, False) for v in variants if v in DAG_VARIANTS]
    for variant, adaptation in tracks:
        recorder = ScriptResponder(script, variant, adaptation)
        if variant == TME_RANDOM_TRIM:
            classifier: Any = RandomClassifier(script.random_seed)
        else:
            classifier = script.scripted_classifier(adaptation)
        state = SessionState(variant=variant)
        for rnd in script.rounds:
            state, _ = step(state, rnd.user_input, classifier, recorder, ApproximateCounter())
        out[responder_key(variant, adaptation)] = dict(sorted(recorder.table.items()))
    return out


def record_tokens(script: ScenarioScript, responses: Mapping[str, Mapping[str, str]]) -> dict[str, int]:
    """Map each replayed prompt's hash to the round's recorded token count."""
    from .gateway import prompt_hash

    table: dict[str, int] = {}
    for variant in (BASELINE_FLAT, TME_DAG):
        state = SessionState(variant=variant)
        responder = RecordedResponder(responses[variant])
        classifier = script.scripted_classifier()
        for rnd in script.rounds:
            counts = rnd.recorded_tokens or {}
            if variant not in counts:
                raise FixtureGap(f"{script.name} round {rnd.index} records no tokens for {variant}")
            state, _ = step(state, rnd.user_input, classifier, responder, ApproximateCounter())
            key = prompt_hash(state.log[-1]["prompt"])
            if table.get(key, counts[variant]) != counts[variant]:
                raise HarnessError(f"round {rnd.index}: prompt {key[:12]} already has another count")
            table[key] = counts[variant]
    return dict(sorted(table.items()))


def comparison_tokens(script: ScenarioScript) -> dict[str, int]:
    """Token table for the labelled single-round prompt comparison, if the script has one."""
    from .gateway import prompt_hash

    table: dict[str, int] = {}
    for variant, entry in (script.prompt_comparison or {}).items():
        if variant != "round":
            table[prompt_hash(entry["prompt"])] = int(entry["tokens"])
    return dict(sorted(table.items()))


def regenerate(name: str, root: Path | None = None) -> dict[str, Any]:
    """Every derived fixture file for scenario ``name``, keyed by file name."""
    script = load_scenario(name, root)
    responses = record_responses(script)
    out: dict[str, Any] = {f"{name}.responses.json": responses}
    if any(r.recorded_tokens for r in script.rounds):
        out[f"{name}.tokens.json"] = record_tokens(script, responses)
    if script.prompt_comparison:
        out[f"{name}_round{script.prompt_comparison['round']}.tokens.json"] = comparison_tokens(script)
    return out


def dump_fixture(doc: Any) -> str:
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def session_at(
    script: ScenarioScript,
    variant: str = TME_DAG,
    upto: int | None = None,
    adaptation: bool | None = None,
    fixtures: Path | None = None,
) -> SessionState:
    """Session state after replaying rounds 1..``upto`` (all rounds by default)."""
    adaptation = script.adaptation if adaptation is None else adaptation
    upto = len(script.rounds) if upto is None else upto
    if not 0 <= upto <= len(script.rounds):
        raise ValueError(f"{script.name} has rounds 1..{len(script.rounds)}, not {upto}")
    if variant == TME_RANDOM_TRIM:
        classifier: Any = RandomClassifier(script.random_seed or 0)
    else:
        classifier = script.scripted_classifier(adaptation)
    responder = load_responses(script.name, variant, adaptation, fixtures) if upto else None
    state = SessionState(variant=variant)
    for rnd in script.rounds[:upto]:
        try:
            state, _ = step(state, rnd.user_input, classifier, responder, ApproximateCounter())
        except (OffScript, UnrecordedRequest) as exc:
            raise FixtureGap(str(exc)) from exc
    return state
