"""Per-turn orchestration: classify, mutate the forest, retrieve context, prompt, respond."""

from __future__ import annotations

import copy
import json
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .gateway import ChatRequest, canonical_text, prompt_hash
from .memory import (
    AlreadyInactive,
    ContextSubgraph,
    CycleDetected,
    Forest,
    InactiveNode,
    TaskNode,
    normalize,
    render_node,
    slugify,
    title_of,
    tokens,
)
from .trim import MalformedOutput, SubtaskIntent, decompose

TME_DAG = "tme_dag"
TME_FLAT = "tme_flat"
TME_RANDOM_TRIM = "tme_random_trim"
BASELINE_FLAT = "baseline_flat"
VARIANTS = (TME_DAG, TME_FLAT, TME_RANDOM_TRIM, BASELINE_FLAT)
DAG_VARIANTS = (TME_DAG, TME_RANDOM_TRIM)
FLAT_VARIANTS = (TME_FLAT, BASELINE_FLAT)

_SUMMARY_CUES = {"summary", "summarize", "summarise", "repeat", "complete", "list", "all"}


class EngineError(Exception):
    pass


class ClassificationFailed(EngineError):
    def __init__(self, round: int, cause: MalformedOutput) -> None:
        super().__init__(f"round {round}: classifier output rejected ({cause})")
        self.round = round
        self.cause = cause


class EmptyContext(EngineError):
    pass


class UnrecordedPrompt(EngineError):
    pass


# ---------------------------------------------------------------------------
# token accounting


@dataclass
class TokenLedger:
    rows: list[tuple[int, int]] = field(default_factory=list)

    def add(self, round: int, tokens: int) -> None:
        if tokens < 0:
            raise ValueError("token counts are non-negative")
        if self.rows and round <= self.rows[-1][0]:
            raise ValueError(f"round {round} does not follow round {self.rows[-1][0]}")
        self.rows.append((round, tokens))

    @property
    def total(self) -> int:
        return sum(t for _, t in self.rows)

    def __len__(self) -> int:
        return len(self.rows)


_APPROX = re.compile(r"\w+|[^\w\s]")


class ApproximateCounter:
    """Counts words and individual punctuation marks. Only good for comparisons."""

    kind = "approximate"

    def count(self, text: str) -> int:
        return len(_APPROX.findall(text))


class RecordedCounter:
    """Looks up token counts by the sha256 of the canonical prompt text."""

    kind = "recorded"

    def __init__(self, table: Mapping[str, int]) -> None:
        self.table = dict(table)

    @classmethod
    def from_file(cls, path: str | Path) -> RecordedCounter:
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def count(self, text: str) -> int:
        if not canonical_text(text):
            return 0
        key = prompt_hash(text)
        try:
            return self.table[key]
        except KeyError:
            raise UnrecordedPrompt(f"no recorded token count for prompt {key[:12]}") from None


TokenCounter = ApproximateCounter | RecordedCounter


def count_tokens(text: str, counter: TokenCounter) -> int:
    return counter.count(text)


def node_cost(node: TaskNode) -> int:
    """Approximate size of one rendered node; recorded tables only cover whole prompts."""
    return ApproximateCounter().count(render_node(node))


# ---------------------------------------------------------------------------
# session state


@dataclass
class SessionState:
    variant: str = TME_DAG
    forest: Forest | None = None
    transcript: list[tuple[str, str]] | None = None
    round: int = 1
    focus: str | None = None
    ledger: TokenLedger = field(default_factory=TokenLedger)
    log: list[dict[str, Any]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant in DAG_VARIANTS:
            if self.forest is None:
                self.forest = Forest()
            self.transcript = None
        else:
            if self.transcript is None:
                self.transcript = []
            self.forest = None

    @property
    def uses_forest(self) -> bool:
        return self.variant in DAG_VARIANTS


def new_session(variant: str = TME_DAG) -> SessionState:
    return SessionState(variant=variant)


# ---------------------------------------------------------------------------
# prompt rendering


def synthesize_prompt(
    state: SessionState,
    subgraph: ContextSubgraph | Sequence[str] | None,
    user_input: str,
    as_of: Mapping[str, str] | None = None,
) -> str:
    """Canonical prompt text for one turn.

    Graph variants render one ``Task: ...`` line per context node in
    topological order, then the user line. ``as_of`` overrides node values,
    which lets a turn show memory as it stood before the turn's own edits.
    Flat variants replay the whole transcript before the new input.
    """
    if state.uses_forest:
        slots = list(subgraph.nodes if isinstance(subgraph, ContextSubgraph) else subgraph or [])
        if not slots:
            raise EmptyContext("graph variants need a non-empty context subgraph")
        forest = state.forest
        as_of = as_of or {}
        lines = []
        for slot in forest.topological_order(slots):
            node = forest.node(slot)
            if slot in as_of:
                node = copy.copy(node)
                node.value = as_of[slot]
            lines.append(render_node(node))
        lines = [line for line in lines if line]
    else:
        speaker = {"user": "User", "assistant": "Assistant"}
        lines = [f"{speaker[who]}: {text}" for who, text in state.transcript]
    lines.append(f"User: {user_input}")
    return "\n".join(lines)


def summary_nodes(forest: Forest, roots: Sequence[str] | None = None) -> list[str]:
    scope = roots if roots is not None else [r for dag in forest.dags for r in dag.roots]
    chosen: set[str] = set()
    for root in scope:
        chosen.update(forest.task_view(root))
    return forest.topological_order(chosen)


def summarize_all(state: SessionState, roots: Sequence[str] | None = None) -> str:
    """Every active node's current value, grouped under its root task."""
    if not state.uses_forest:
        raise ValueError(f"{state.variant} keeps no task graph to summarize")
    forest = state.forest
    scope = roots if roots is not None else [r for dag in forest.dags for r in dag.roots]
    blocks = []
    for root in scope:
        if not forest.node(root).active:
            continue
        head = forest.node(root)
        lines = [f"{head.title}: {head.value}" if head.value else f"{head.title}:"]
        for slot in forest.task_view(root):
            if slot != root:
                node = forest.node(slot)
                lines.append(f"  {node.title}: {node.value}")
        blocks.append("\n".join(lines))
    return "\n".join(blocks)


# ---------------------------------------------------------------------------
# applying intents


def substitute(old: str, replaced: str, replacement: str) -> str:
    """Swap the words that differ between ``replaced`` and ``replacement`` inside ``old``.

    ``("wash and chop celery", "Prepare celery", "Prepare mushrooms")`` gives
    ``"wash and chop mushrooms"``. Falls back to ``replacement`` when the
    differing words cannot be located in ``old``.
    """
    before, after = tokens(replaced), tokens(replacement)
    removed = [t for t in before if t not in after]
    added = [t for t in after if t not in before]
    if not removed or len(removed) != len(added):
        return replacement
    out = old
    for gone, new in zip(removed, added):
        pattern = re.compile(rf"\b{re.escape(gone)}\b", re.I)
        if not pattern.search(out):
            return replacement
        out = pattern.sub(new, out)
    return out


class _Round:
    """Applies one turn's intents to a forest and records what happened."""

    def __init__(self, forest: Forest, round: int) -> None:
        self.forest = forest
        self.round = round
        self.operations: list[dict[str, Any]] = []
        self.warnings: list[str] = []
        self.focus: list[str] = []
        self.summary_roots: list[str] = []
        self.summary_all = False
        self.mutated = False

    def op(self, name: str, **details: Any) -> None:
        self.operations.append({"op": name, **details})
        if name != "check":
            self.mutated = True

    def resolve(self, ref: str | None) -> str | None:
        if not ref:
            return None
        if ref in self.forest and self.forest.node(ref).active:
            return ref
        return self.forest.find_node(ref)

    def resolve_strict(self, ref: str) -> str | None:
        if ref in self.forest:
            return ref
        shared = self.forest.shared_index.get(normalize(ref))
        if shared is not None:
            return shared
        return None

    def apply(self, intent: SubtaskIntent) -> None:
        if intent.intent_type == "new":
            self.new(intent)
        elif intent.intent_type == "update":
            self.update(intent)
        else:
            self.check(intent)

    def parent_for(self, ref: str | None) -> str | None:
        if ref is None:
            return None
        found = self.resolve_strict(ref) or self.resolve(ref)
        if found is not None:
            return found
        slot = self.unique_slot(slugify(ref))
        self.forest.add_node(TaskNode(slot, ""))
        self.op("add", slot=slot, implicit=True)
        self.warnings.append(f"parent {ref!r} did not exist; created root {slot!r}")
        return slot

    def unique_slot(self, slot: str) -> str:
        if slot not in self.forest:
            return slot
        n = 2
        while f"{slot}_{n}" in self.forest:
            n += 1
        return f"{slot}_{n}"

    def new(self, intent: SubtaskIntent) -> None:
        forest = self.forest
        parent = self.parent_for(intent.parent_node)
        slot = intent.slot or slugify(intent.subtask_title)
        existing = None
        if slot in forest and forest.node(slot).active:
            existing = slot
        else:
            shared = forest.shared_index.get(normalize(intent.subtask_title))
            if shared is not None and forest.node(shared).active:
                existing = shared

        deps = []
        for ref in intent.dependency_nodes:
            found = self.resolve_strict(ref) or self.resolve(ref)
            if found is None:
                self.warnings.append(f"dependency {ref!r} of {intent.subtask_title!r} not found")
            elif found not in deps:
                deps.append(found)

        if existing is not None:
            node = forest.node(existing)
            linked = False
            if parent is not None and parent != existing and node.parent != parent:
                try:
                    linked = forest.add_dependency(parent, existing)
                except CycleDetected as exc:
                    self.warnings.append(str(exc))
            if linked:
                self.op("link", slot=parent, dependency=existing)
                self.focus.append(parent)
            else:
                self.focus.append(existing)
            for dep in deps:
                try:
                    if forest.add_dependency(existing, dep):
                        self.op("link", slot=existing, dependency=dep)
                except CycleDetected as exc:
                    self.warnings.append(str(exc))
            return

        slot = self.unique_slot(slot)
        value = intent.value if intent.value is not None else intent.subtask_title
        forest.add_node(TaskNode(slot, value, parent=parent, dependencies=[d for d in deps if d != slot]))
        self.op("add", slot=slot, parent=parent, dependencies=deps)
        self.focus.append(slot)

    def update(self, intent: SubtaskIntent) -> None:
        forest = self.forest
        if intent.action == "rollback":
            target = self.resolve(intent.slot) or self.resolve(intent.subtask_title)
            if target is None:
                self.warnings.append(f"nothing to roll back for {intent.subtask_title!r}")
                return
            history = forest.node(target).history
            steps = 1
            if intent.value is not None and intent.value in history:
                steps = len(history) - max(i for i, v in enumerate(history) if v == intent.value)
            if not history:
                self.warnings.append(f"{target!r} has no history to roll back")
                return
            rev = forest.rollback_node(target, steps, self.round)
            self.op("rollback", slot=target, steps=steps, value=rev.new_value if rev else None)
            self.focus.append(target)
            return

        if intent.action == "inactivate":
            target = self.resolve(intent.slot) or self.resolve(intent.subtask_title)
            if target is None:
                self.warnings.append(f"nothing to inactivate for {intent.subtask_title!r}")
                return
            try:
                forest.inactivate_node(target)
            except AlreadyInactive as exc:
                self.warnings.append(str(exc))
                return
            self.op("inactivate", slot=target)
            parent = forest.node(target).parent
            if parent is not None and forest.node(parent).active:
                self.focus.append(parent)
            return

        if intent.replaced is not None:
            if forest.matching(intent.replaced):
                if intent.value is not None:
                    new_value: Any = intent.value
                else:
                    def new_value(old: str) -> str:
                        return substitute(old, intent.replaced, intent.replacement)
                revisions = forest.replace_global(intent.replaced, new_value, self.round)
                touched = forest.matching(intent.replaced) or [r.slot for r in revisions]
                self.op(
                    "replace_global",
                    replaced=intent.replaced,
                    slots=[r.slot for r in revisions],
                    propagated=sorted(forest.stale),
                )
                self.focus.extend(r.slot for r in revisions[:1] or [])
                if not revisions and touched:
                    self.focus.append(touched[0])
                return
            self.warnings.append(
                f"update target {intent.replaced!r} not found; created it as a new subtask"
            )
            self.new(
                SubtaskIntent(
                    "new",
                    intent.replacement or intent.subtask_title,
                    parent_node=intent.parent_node,
                    dependency_nodes=intent.dependency_nodes,
                    value=intent.value,
                )
            )
            return

        target = self.resolve(intent.slot) if intent.slot else None
        if target is None:
            target = self.resolve(intent.subtask_title)
        if target is None:
            self.warnings.append(
                f"update target {intent.slot or intent.subtask_title!r} not found; "
                "created it as a new subtask"
            )
            self.new(
                SubtaskIntent(
                    "new",
                    intent.subtask_title,
                    parent_node=intent.parent_node,
                    dependency_nodes=intent.dependency_nodes,
                    slot=intent.slot,
                    value=intent.value,
                )
            )
            return
        value = intent.value if intent.value is not None else intent.subtask_title
        try:
            rev = forest.update_node(target, value, self.round)
        except InactiveNode as exc:
            self.warnings.append(str(exc))
            return
        self.op("update", slot=target, changed=rev is not None)
        self.focus.append(target)

    def check(self, intent: SubtaskIntent) -> None:
        target = self.resolve(intent.slot) if intent.slot else None
        if target is None:
            target = self.resolve(intent.subtask_title)
        if target is None and intent.parent_node:
            target = self.resolve(intent.parent_node)
        self.op("check", slot=target)
        if target is not None:
            self.focus.append(target)
        if set(tokens(intent.subtask_title)) & _SUMMARY_CUES:
            scope = target
            if intent.parent_node:
                scope = self.resolve(intent.parent_node) or scope
            if scope is None:
                self.summary_all = True
            else:
                self.summary_roots.append(self.forest.root_of(scope))


# ---------------------------------------------------------------------------


def step(
    state: SessionState,
    user_input: str,
    classifier: Any,
    responder: Any,
    counter: TokenCounter | None = None,
    model: str = "gpt-4o",
    temperature: float = 0.3,
) -> tuple[SessionState, str]:
    """Process one user turn and return the new state with the response.

    The input state is left untouched; the returned state is a fresh copy.
    """
    if not user_input or not user_input.strip():
        raise ValueError("user_input must be non-empty")
    counter = counter or ApproximateCounter()
    state = copy.deepcopy(state)
    rnd = state.round
    entry: dict[str, Any] = {"variant": state.variant, "round": rnd, "user_input": user_input}

    intents: list[SubtaskIntent] | None = None
    if state.variant != BASELINE_FLAT:
        try:
            intents = decompose(user_input, state.forest, classifier, round=rnd)
        except MalformedOutput as exc:
            raise ClassificationFailed(rnd, exc) from exc
    entry["intents"] = None if intents is None else [i.to_dict("internal") for i in intents]

    if state.uses_forest:
        forest = state.forest
        before = {n.slot: n.value for n in forest.iter_nodes()}
        applied = _Round(forest, rnd)
        for intent in intents:
            applied.apply(intent)
        focus = applied.focus[-1] if applied.focus else None
        if focus is None and state.focus in forest and forest.node(state.focus).active:
            focus = state.focus
        context: list[str] = []
        if applied.summary_all or applied.summary_roots:
            context = summary_nodes(forest, None if applied.summary_all else applied.summary_roots)
        if focus is not None and forest.node(focus).active:
            sub = forest.retrieve_subgraph(focus, node_cost)
            context = forest.topological_order(set(context) | set(sub.nodes))
        if context:
            prompt = synthesize_prompt(state, context, user_input, as_of=before)
        else:
            applied.warnings.append("no task context available; prompting with the input alone")
            prompt = f"User: {user_input}"
        forest.stale.difference_update(context)
        entry.update(operations=applied.operations, warnings=applied.warnings, focus=focus)
        state.focus = focus
    else:
        prompt = synthesize_prompt(state, None, user_input)
        entry.update(operations=[], warnings=[], focus=None)

    tokens_used = counter.count(prompt)
    state.ledger.add(rnd, tokens_used)
    response = responder.respond(ChatRequest.for_prompt(prompt, model=model, temperature=temperature))

    if state.uses_forest:
        if applied.mutated and state.focus is not None:
            state.forest.set_responses(state.focus, user_input, response)
    else:
        state.transcript.append(("user", user_input))
        state.transcript.append(("assistant", response))

    entry.update(prompt=prompt, prompt_hash=prompt_hash(prompt), tokens=tokens_used, response=response)
    state.log.append(entry)
    state.round = rnd + 1
    return state, response


def title_for(slot: str) -> str:
    return title_of(slot)
