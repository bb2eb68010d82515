"""Turn a user utterance into structured subtask intents.

Every classifier exposes ``decompose(user_input, forest=None, round=None)``
and returns a list of :class:`SubtaskIntent` in utterance order. Splitting and
classification happen in one call; the few-shot LLM prompt already asks for
an array of intents.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any

from .memory import Forest, normalize

INTENT_TYPES = ("new", "update", "check")
ACTIONS = ("rollback", "inactivate")
PROMPT_ASSET = "trim_prompt_v1.txt"


class TrimError(Exception):
    pass


class MalformedOutput(TrimError):
    """Classifier output that does not fit the intent schema."""

    def __init__(self, message: str, raw: str) -> None:
        super().__init__(f"{message}: {raw[:200]!r}")
        self.raw = raw


class OffScript(TrimError):
    pass


class BackendUnavailable(TrimError):
    pass


class NoRuleMatch(TrimError):
    pass


@dataclass(frozen=True)
class SubtaskIntent:
    """One classified subtask.

    ``replacement`` is the incoming value and ``replaced`` the one being
    superseded; on the wire they are also accepted as ``from`` and ``to``.
    ``slot``, ``value`` and ``action`` are optional extensions that scripted
    fixtures and the rule-based classifier use to pin targets and values.
    """

    intent_type: str
    subtask_title: str
    parent_node: str | None = None
    dependency_nodes: tuple[str, ...] = ()
    replacement: str | None = None
    replaced: str | None = None
    slot: str | None = None
    value: str | None = None
    action: str | None = None

    def __post_init__(self) -> None:
        if self.intent_type not in INTENT_TYPES:
            raise ValueError(f"intent_type must be one of {INTENT_TYPES}, got {self.intent_type!r}")
        if not self.subtask_title or not self.subtask_title.strip():
            raise ValueError("subtask_title must be non-empty")
        if (self.replacement is None) != (self.replaced is None):
            raise ValueError("replacement and replaced must be given together")
        if self.replacement is not None and self.intent_type != "update":
            raise ValueError("replacement fields require intent_type 'update'")
        if self.action is not None and (self.action not in ACTIONS or self.intent_type != "update"):
            raise ValueError(f"action must be one of {ACTIONS} on an update intent")
        object.__setattr__(self, "dependency_nodes", tuple(self.dependency_nodes))

    def to_dict(self, style: str = "schema") -> dict[str, Any]:
        """Serialize with ``from``/``to`` (``style="schema"``) or internal key names."""
        if style not in ("schema", "internal"):
            raise ValueError(f"unknown style {style!r}")
        out: dict[str, Any] = {
            "intent_type": self.intent_type,
            "subtask_title": self.subtask_title,
            "parent_node": self.parent_node,
            "dependency_nodes": list(self.dependency_nodes),
        }
        if self.replacement is not None:
            if style == "schema":
                out["from"], out["to"] = self.replacement, self.replaced
            else:
                out["replacement"], out["replaced"] = self.replacement, self.replaced
        for key in ("slot", "value", "action"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        return out


def dump_intents(intents: Iterable[SubtaskIntent], style: str = "schema") -> str:
    return json.dumps([i.to_dict(style) for i in intents], indent=2, ensure_ascii=False)


_FENCE = re.compile(r"^```(?:json)?\s*(.*?)\s*```$", re.S)


def parse_intent_json(raw: str) -> list[SubtaskIntent]:
    """Parse a JSON array of intent objects.

    Accepts both ``from``/``to`` and ``replacement``/``replaced``. Unknown
    keys are ignored; missing optional keys default to null or empty.
    """
    text = raw.strip()
    fenced = _FENCE.match(text)
    if fenced:
        text = fenced.group(1)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedOutput(f"not JSON ({exc.msg})", raw) from None
    if not isinstance(doc, list):
        raise MalformedOutput("expected a JSON array", raw)
    return [intent_from_dict(item, raw) for item in doc]


def intent_from_dict(item: Any, raw: str | None = None) -> SubtaskIntent:
    raw = raw if raw is not None else json.dumps(item)
    if not isinstance(item, Mapping):
        raise MalformedOutput("intent entries must be objects", raw)

    def text(key: str, *aliases: str) -> str | None:
        for k in (key, *aliases):
            if k in item and item[k] is not None:
                if not isinstance(item[k], str):
                    raise MalformedOutput(f"{k!r} must be a string", raw)
                return item[k]
        return None

    deps = item.get("dependency_nodes") or []
    if not isinstance(deps, list) or not all(isinstance(d, str) for d in deps):
        raise MalformedOutput("'dependency_nodes' must be a list of strings", raw)
    try:
        return SubtaskIntent(
            intent_type=str(item.get("intent_type")),
            subtask_title=text("subtask_title") or "",
            parent_node=text("parent_node"),
            dependency_nodes=tuple(deps),
            replacement=text("replacement", "from"),
            replaced=text("replaced", "to"),
            slot=text("slot"),
            value=text("value"),
            action=text("action"),
        )
    except ValueError as exc:
        raise MalformedOutput(str(exc), raw) from None


# ---------------------------------------------------------------------------
# few-shot prompt


def prompt_template() -> str:
    return resources.files("tme").joinpath("assets", PROMPT_ASSET).read_text(encoding="utf-8")


def system_prompt() -> str:
    first = prompt_template().splitlines()[0]
    return first.removeprefix("System: ")


def memory_context(forest: Forest | None) -> str:
    lines = ["Memory context:"]
    if forest is not None:
        for node in forest.iter_nodes():
            if node.active:
                lines.append(f"- {node.slot} ({node.title}): {node.value}")
    if len(lines) == 1:
        lines.append("- (empty)")
    return "\n".join(lines)


def render_fewshot_prompt(user_input: str, forest: Forest | None = None) -> str:
    return "\n\n".join(
        [
            prompt_template().rstrip("\n"),
            memory_context(forest),
            f"Input: “{user_input}”\nOutput:",
        ]
    )


# ---------------------------------------------------------------------------
# backends


class ScriptedClassifier:
    """Replays gold intents keyed by the exact user input."""

    kind = "scripted"

    def __init__(self, rounds: Iterable[Mapping[str, Any]], key: str = "intents") -> None:
        self._table: dict[str, list[SubtaskIntent]] = {}
        for entry in rounds:
            raw_intents = entry.get(key, entry.get("intents"))
            if raw_intents is None:
                raise ValueError(f"round {entry.get('round')} has no {key!r}")
            intents = [intent_from_dict(i) for i in raw_intents]
            user_input = entry["user_input"]
            if user_input in self._table and self._table[user_input] != intents:
                raise ValueError(f"conflicting scripted intents for {user_input!r}")
            self._table[user_input] = intents

    @classmethod
    def from_file(cls, path: str | Path, key: str = "intents") -> ScriptedClassifier:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        rounds = doc["rounds"] if isinstance(doc, dict) else doc
        return cls(rounds, key=key)

    def decompose(
        self, user_input: str, forest: Forest | None = None, round: int | None = None
    ) -> list[SubtaskIntent]:
        try:
            return list(self._table[user_input])
        except KeyError:
            raise OffScript(f"no scripted intents for {user_input!r}") from None


def random_intent_type(seed: int, round: int) -> str:
    """Uniform draw from ``INTENT_TYPES`` keyed on (seed, round).

    SHA-256 of ``"tme-random-trim:<seed>:<round>"``, first 8 bytes read as a
    big-endian integer, reduced modulo 3.
    """
    digest = hashlib.sha256(f"tme-random-trim:{seed}:{round}".encode()).digest()
    return INTENT_TYPES[int.from_bytes(digest[:8], "big") % len(INTENT_TYPES)]


def classify_random(user_input: str, round: int, seed: int) -> list[SubtaskIntent]:
    return [SubtaskIntent(random_intent_type(seed, round), user_input)]


class RandomClassifier:
    kind = "random"

    def __init__(self, seed: int) -> None:
        self.seed = seed

    def decompose(
        self, user_input: str, forest: Forest | None = None, round: int | None = None
    ) -> list[SubtaskIntent]:
        if round is None:
            raise ValueError("the random classifier needs the round index")
        return classify_random(user_input, round, self.seed)


_CORRECTION = re.compile(
    r"^(actually|sorry|wait|oops|no[,.!]|on second thought)\b|\bto correct\b|^(change|make that|move)\b",
    re.I,
)
_ROLLBACK = re.compile(r"\b(go back|revert|undo)\b", re.I)
_QUESTION_START = re.compile(
    r"^(by the way,?\s*)?(what|what's|did|can you|could you|is|was|wasn['’]t|isn['’]t|"
    r"why|how|where|when|do|does|which|who)\b",
    re.I,
)
_SUMMARY = re.compile(r"\b(repeat|summari[sz]e|summary|complete \w*\s*plan|list all)\b", re.I)
_HELP = re.compile(
    r"^help (?:me )?(?:to )?(\w+)(?: out)?(?: (?:a|an|the|my))? (\w+)", re.I
)
_MY_FIELD = re.compile(r"\bmy ([a-z][a-z ]*?) is (.+?)[.!]*$", re.I)
_PREFIX = re.compile(r"^([A-Za-z_]+):\s*(.+)$", re.S)
_REMOVE = re.compile(r"^remove (?:the )?(.+?)[.!]*$", re.I)
_SUBMIT = re.compile(r"^(submit)\b", re.I)
_VALUE_PATTERNS = [
    re.compile(r"\b(?:make that|go back to|move it to)\s+(.+?)(?:\s+as originally planned)?[.!]*$", re.I),
    re.compile(r"\b(?:set|change)\s+(?:the\s+)?[\w ]+?\s+to\s+(.+?)[.!]*$", re.I),
    re.compile(r"\b(?:depart|leave|start)\w*\s+(?:from|on)\s+(.+?)[.!]*$", re.I),
]
_LEAD = re.compile(r"^(actually|sorry|wait|oops|no|on second thought)[,!.]?\s*", re.I)


class RuleBasedClassifier:
    """Surface-pattern classifier for recurring turn shapes.

    Handles field prefixes (``destination: ...``), "my X is Y" statements,
    correction markers, rollback phrasing, removals, interrogatives and
    "help me <verb> a <thing>" task openers. With ``strict=True`` anything
    else raises :class:`NoRuleMatch` so a chained backend can take over;
    otherwise it becomes a plain ``new`` subtask.
    """

    kind = "rule_based"

    def __init__(self, strict: bool = False, field_prefix: str = "collect") -> None:
        self.strict = strict
        self.field_prefix = field_prefix

    def decompose(
        self, user_input: str, forest: Forest | None = None, round: int | None = None
    ) -> list[SubtaskIntent]:
        forest = forest if forest is not None else Forest()
        clauses = [c for c in re.split(r",?\s+then\s+", user_input.strip()) if c.strip()]
        intents: list[SubtaskIntent] = []
        for clause in clauses:
            intents.extend(self._clause(clause.strip(), forest, intents))
        return intents

    def _current_root(self, forest: Forest, pending: Sequence[SubtaskIntent]) -> str | None:
        for intent in reversed(pending):
            if intent.intent_type == "new" and intent.parent_node is None:
                return intent.subtask_title
        for dag in reversed(forest.dags):
            for root in dag.roots:
                if forest.node(root).active:
                    return root
        return None

    def _field_slot(self, forest: Forest, field_name: str) -> str | None:
        tail = "_".join(normalize(field_name).split())
        for node in forest.iter_nodes():
            if node.active and node.slot.rsplit(".", 1)[-1] == tail:
                return node.slot
        return None

    def _clause(
        self, clause: str, forest: Forest, pending: Sequence[SubtaskIntent]
    ) -> list[SubtaskIntent]:
        field_name, body = None, clause
        prefixed = _PREFIX.match(clause)
        if prefixed:
            field_name, body = prefixed.group(1), prefixed.group(2).strip()
        root = self._current_root(forest, pending)

        if _SUMMARY.search(body):
            title = "repeat information" if re.search(r"\brepeat\b", body, re.I) else "summarize task"
            return [SubtaskIntent("check", title, parent_node=root)]

        if body.endswith("?") or _QUESTION_START.match(body):
            title = f"verify {field_name}" if field_name else normalize(body)
            slot = self._field_slot(forest, field_name) if field_name else None
            return [SubtaskIntent("check", title, parent_node=root, slot=slot)]

        helped = _HELP.match(body)
        if helped:
            title = f"{helped.group(1).lower()} {helped.group(2).lower()}"
            return [SubtaskIntent("new", title, value="")]

        if _SUBMIT.match(body):
            deps = ()
            if root is not None and root in forest:
                deps = tuple(
                    n.slot for n in forest.iter_nodes()
                    if n.active and n.parent == root
                )
            return [SubtaskIntent("new", "submit", parent_node=root, dependency_nodes=deps, value="")]

        removed = _REMOVE.match(_LEAD.sub("", body))
        if removed:
            target = removed.group(1)
            return [SubtaskIntent("update", f"remove {target}", action="inactivate",
                                  slot=forest.find_node(target))]

        mine = _MY_FIELD.search(body)
        if mine:
            field_name, value = mine.group(1), mine.group(2).strip()
        elif field_name:
            value = _extract_value(body)
        else:
            if self.strict:
                raise NoRuleMatch(clause)
            return [SubtaskIntent("new", clause, parent_node=root, value=clause)]

        existing = self._field_slot(forest, field_name)
        if existing is not None:
            action = "rollback" if _ROLLBACK.search(body) else None
            return [SubtaskIntent("update", f"update {field_name}", slot=existing,
                                  value=None if action else value, action=action)]
        if _CORRECTION.search(body) and self.strict:
            raise NoRuleMatch(clause)
        slot = f"{self.field_prefix}.{'_'.join(normalize(field_name).split())}"
        return [SubtaskIntent("new", f"{self.field_prefix} {field_name}", parent_node=root,
                              slot=slot, value=value)]


def _extract_value(body: str) -> str:
    for pattern in _VALUE_PATTERNS:
        found = pattern.search(body)
        if found:
            return found.group(1).strip()
    return _LEAD.sub("", body).rstrip(".!").strip()


class LlmClassifier:
    """Few-shot classification through a chat responder."""

    kind = "llm"

    def __init__(self, responder: Any, model: str = "gpt-4o", temperature: float = 0.3) -> None:
        self.responder = responder
        self.model = model
        self.temperature = temperature

    def decompose(
        self, user_input: str, forest: Forest | None = None, round: int | None = None
    ) -> list[SubtaskIntent]:
        from .gateway import ChatRequest, GatewayError

        template = prompt_template().rstrip("\n")
        examples = template.split("\n", 1)[1].strip()
        user = "\n\n".join([examples, memory_context(forest), f"Input: “{user_input}”\nOutput:"])
        request = ChatRequest(
            messages=(
                {"role": "system", "content": system_prompt()},
                {"role": "user", "content": user},
            ),
            model=self.model,
            temperature=self.temperature,
        )
        try:
            raw = self.responder.respond(request)
        except GatewayError as exc:
            raise BackendUnavailable(str(exc)) from exc
        return parse_intent_json(raw)


class ChainClassifier:
    """Try each backend in turn; a backend defers by raising NoRuleMatch."""

    kind = "chain"

    def __init__(self, backends: Sequence[Any]) -> None:
        if not backends:
            raise ValueError("chain needs at least one backend")
        self.backends = list(backends)

    def decompose(
        self, user_input: str, forest: Forest | None = None, round: int | None = None
    ) -> list[SubtaskIntent]:
        for backend in self.backends[:-1]:
            try:
                return backend.decompose(user_input, forest, round=round)
            except NoRuleMatch:
                continue
        return self.backends[-1].decompose(user_input, forest, round=round)


def decompose(
    user_input: str,
    forest: Forest | None,
    backend: Any,
    round: int | None = None,
) -> list[SubtaskIntent]:
    if not user_input or not user_input.strip():
        raise ValueError("user_input must be non-empty")
    return backend.decompose(user_input, forest, round=round)


def make_classifier(kind: str, **config: Any) -> Any:
    if kind == "scripted":
        if "rounds" in config:
            return ScriptedClassifier(config["rounds"], key=config.get("key", "intents"))
        return ScriptedClassifier.from_file(config["path"], key=config.get("key", "intents"))
    if kind == "rule_based":
        return RuleBasedClassifier(strict=config.get("strict", False))
    if kind == "random":
        return RandomClassifier(int(config.get("seed", 0)))
    if kind == "llm":
        return LlmClassifier(
            config["responder"],
            model=config.get("model", "gpt-4o"),
            temperature=config.get("temperature", 0.3),
        )
    if kind == "hybrid":
        llm = make_classifier("llm", **config)
        return ChainClassifier([RuleBasedClassifier(strict=True), llm])
    raise ValueError(f"unknown classifier kind {kind!r}")
