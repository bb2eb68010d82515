"""Task memory structure: a forest of acyclic task graphs.

Nodes are addressed by dot-separated slots (``prepare.celery``). Each node
keeps one parent link and a list of dependency slots; the union of both edge
kinds must stay acyclic across the whole forest. Every mutating method
validates before it touches anything, so a rejected call leaves the forest
exactly as it was.
"""

from __future__ import annotations

import copy
import heapq
import itertools
import json
import re
import string
from collections import deque
from collections.abc import Callable, Iterable, Iterator
from dataclasses import dataclass, field
from typing import Any

ACTIVE = "active"
INACTIVE = "inactive"

NODE_FIELDS = (
    "slot",
    "value",
    "history",
    "parent",
    "dependencies",
    "status",
    "user_response",
    "ai_response",
)


class TaskMemoryError(Exception):
    """Base class for task-memory errors."""


class DuplicateSlot(TaskMemoryError):
    pass


class DanglingReference(TaskMemoryError):
    pass


class UnknownSlot(TaskMemoryError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else "unknown slot"


class InactiveNode(TaskMemoryError):
    pass


class AlreadyInactive(TaskMemoryError):
    pass


class HistoryUnderflow(TaskMemoryError):
    pass


class CycleDetected(TaskMemoryError):
    pass


class NoMatch(TaskMemoryError):
    pass


class InactiveFocus(TaskMemoryError):
    pass


class BudgetTooSmall(TaskMemoryError):
    pass


class MalformedSnapshot(TaskMemoryError):
    pass


class IntegrityError(TaskMemoryError):
    pass


# ---------------------------------------------------------------------------
# text helpers shared by matching, slot naming and rendering

_PUNCT = re.compile(f"[{re.escape(string.punctuation)}\u2018\u2019\u201c\u201d\u2014\u2013]")


def normalize(text: str) -> str:
    """Lowercase, turn punctuation into spaces, collapse whitespace."""
    return " ".join(_PUNCT.sub(" ", text.lower()).split())


def tokens(text: str) -> list[str]:
    return normalize(text).split()


def title_of(slot: str) -> str:
    """Human title for a slot: ``collect.name`` -> ``Collect name``."""
    words = " ".join(slot.replace(".", " ").replace("_", " ").split())
    return words[:1].upper() + words[1:]


def slugify(title: str) -> str:
    """Slot for a title: ``schedule team meeting`` -> ``schedule.team_meeting``."""
    words = tokens(title)
    if not words:
        raise ValueError(f"cannot derive a slot from {title!r}")
    head, rest = words[0], words[1:]
    return f"{head}.{'_'.join(rest)}" if rest else head


# ---------------------------------------------------------------------------


@dataclass
class TaskNode:
    slot: str
    value: str = ""
    history: list[str] = field(default_factory=list)
    parent: str | None = None
    dependencies: list[str] = field(default_factory=list)
    status: str = ACTIVE
    user_response: str = ""
    ai_response: str = ""

    @property
    def title(self) -> str:
        return title_of(self.slot)

    @property
    def active(self) -> bool:
        return self.status == ACTIVE

    def to_dict(self) -> dict[str, Any]:
        return {
            "slot": self.slot,
            "value": self.value,
            "history": list(self.history),
            "parent": self.parent,
            "dependencies": list(self.dependencies),
            "status": self.status,
            "user_response": self.user_response,
            "ai_response": self.ai_response,
        }


@dataclass
class TaskDAG:
    nodes: dict[str, TaskNode] = field(default_factory=dict)
    roots: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class NodeRevision:
    slot: str
    old_value: str
    new_value: str
    round: int


@dataclass
class ContextSubgraph:
    """Nodes selected for a prompt, in topological order, with per-node cost."""

    focus: str
    path: list[str]
    dependencies: list[str]
    stale: list[str]
    nodes: list[str]
    costs: dict[str, int]

    @property
    def total_cost(self) -> int:
        return sum(self.costs[s] for s in self.nodes)

    def __contains__(self, slot: object) -> bool:
        return slot in self.nodes

    def __len__(self) -> int:
        return len(self.nodes)


def render_node(node: TaskNode) -> str:
    """Prompt line for one node. Structural nodes with no value render empty."""
    if not node.value:
        return ""
    return f"Task: {node.title} (current value: {node.value})."


def check_acyclic(dag: TaskDAG) -> bool:
    """True iff the parent and dependency edges of ``dag`` admit a topological order.

    Edges leaving the DAG (dependencies on nodes owned elsewhere) are ignored.
    """
    indegree = {slot: 0 for slot in dag.nodes}
    children: dict[str, list[str]] = {slot: [] for slot in dag.nodes}
    for node in dag.nodes.values():
        for pre in _prerequisites(node):
            if pre in dag.nodes:
                children[pre].append(node.slot)
                indegree[node.slot] += 1
    ready = deque(s for s, d in indegree.items() if d == 0)
    seen = 0
    while ready:
        slot = ready.popleft()
        seen += 1
        for child in children[slot]:
            indegree[child] -= 1
            if indegree[child] == 0:
                ready.append(child)
    return seen == len(dag.nodes)


def _prerequisites(node: TaskNode) -> Iterator[str]:
    if node.parent is not None:
        yield node.parent
    yield from node.dependencies


class Forest:
    """All task DAGs of one session.

    ``shared_index`` maps a normalized node title to its slot so that a new
    subtask naming an existing one links to it instead of duplicating it.
    ``stale`` holds dependents touched by propagation that the next context
    retrieval should include; it is session-transient and not persisted.
    """

    def __init__(self, dags: Iterable[TaskDAG] = ()) -> None:
        self.dags: list[TaskDAG] = []
        self.shared_index: dict[str, str] = {}
        self.stale: set[str] = set()
        self.revisions: list[NodeRevision] = []
        self._owner: dict[str, TaskDAG] = {}
        self._dependents: dict[str, set[str]] = {}
        for dag in dags:
            self.dags.append(dag)
            for slot, node in dag.nodes.items():
                self._owner[slot] = dag
                self.shared_index.setdefault(normalize(node.title), slot)
        for node in self.iter_nodes():
            for dep in node.dependencies:
                self._dependents.setdefault(dep, set()).add(node.slot)

    # -- lookup ------------------------------------------------------------

    def __contains__(self, slot: object) -> bool:
        return slot in self._owner

    def __len__(self) -> int:
        return len(self._owner)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Forest):
            return NotImplemented
        return _structure(self) == _structure(other)

    def node(self, slot: str) -> TaskNode:
        try:
            return self._owner[slot].nodes[slot]
        except KeyError:
            raise UnknownSlot(f"no node with slot {slot!r}") from None

    def dag_of(self, slot: str) -> TaskDAG:
        self.node(slot)
        return self._owner[slot]

    def iter_nodes(self) -> Iterator[TaskNode]:
        """Nodes in creation order within each DAG, DAGs in creation order."""
        for dag in self.dags:
            yield from dag.nodes.values()

    def root_of(self, slot: str) -> str:
        node = self.node(slot)
        while node.parent is not None:
            node = self.node(node.parent)
        return node.slot

    def path_to(self, slot: str) -> list[str]:
        """Root-to-node parent chain, inclusive."""
        chain = [slot]
        node = self.node(slot)
        while node.parent is not None:
            chain.append(node.parent)
            node = self.node(node.parent)
        return chain[::-1]

    def children(self, slot: str) -> list[str]:
        dag = self.dag_of(slot)
        return [n.slot for n in dag.nodes.values() if n.parent == slot]

    def dependents(self, slot: str) -> set[str]:
        """Nodes listing ``slot`` among their dependencies (one hop)."""
        return set(self._dependents.get(slot, ()))

    def copy(self) -> Forest:
        return copy.deepcopy(self)

    # -- mutations -----------------------------------------------------------

    def add_node(self, node: TaskNode) -> TaskNode:
        if not node.slot or not node.slot.strip():
            raise ValueError("slot must be non-empty")
        if node.slot in self._owner:
            raise DuplicateSlot(f"slot {node.slot!r} already exists")
        if node.slot in node.dependencies:
            raise CycleDetected(f"{node.slot!r} cannot depend on itself")
        if node.parent is not None and node.parent not in self._owner:
            raise DanglingReference(f"parent {node.parent!r} of {node.slot!r} does not exist")
        for dep in node.dependencies:
            if dep not in self._owner:
                raise DanglingReference(f"dependency {dep!r} of {node.slot!r} does not exist")
        if len(set(node.dependencies)) != len(node.dependencies):
            raise ValueError(f"duplicate dependencies on {node.slot!r}")

        node = copy.deepcopy(node)
        if node.parent is None:
            dag = TaskDAG()
            self.dags.append(dag)
            dag.roots.append(node.slot)
        else:
            dag = self._owner[node.parent]
        dag.nodes[node.slot] = node
        self._owner[node.slot] = dag
        self.shared_index.setdefault(normalize(node.title), node.slot)
        for dep in node.dependencies:
            self._dependents.setdefault(dep, set()).add(node.slot)
        return node

    def add_dependency(self, slot: str, dependency: str) -> bool:
        """Make ``slot`` depend on ``dependency``. Returns False if already present."""
        node = self.node(slot)
        self.node(dependency)
        if dependency in node.dependencies:
            return False
        if dependency == slot or self._reaches(slot, dependency):
            raise CycleDetected(f"{slot!r} -> {dependency!r} would close a cycle")
        node.dependencies.append(dependency)
        self._dependents.setdefault(dependency, set()).add(slot)
        return True

    def _reaches(self, start: str, target: str) -> bool:
        """Is ``target`` downstream of ``start`` (i.e. does it already need ``start``)?"""
        seen = {start}
        queue = deque([start])
        while queue:
            current = queue.popleft()
            if current == target:
                return True
            for nxt in self._downstream(current):
                if nxt not in seen:
                    seen.add(nxt)
                    queue.append(nxt)
        return False

    def _downstream(self, slot: str) -> list[str]:
        dag = self._owner[slot]
        out = [n.slot for n in dag.nodes.values() if n.parent == slot]
        out.extend(sorted(self._dependents.get(slot, ())))
        return out

    def update_node(self, slot: str, new_value: str, round: int = 0) -> NodeRevision | None:
        node = self.node(slot)
        if not node.active:
            raise InactiveNode(f"{slot!r} is inactive")
        if new_value == node.value:
            return None
        revision = NodeRevision(slot, node.value, new_value, round)
        node.history.append(node.value)
        node.value = new_value
        self.revisions.append(revision)
        self.propagate_dependencies(slot)
        return revision

    def matching(self, title: str) -> list[str]:
        """Active nodes addressed by ``title``.

        A node matches when ``title`` is its slot, its normalized title, or
        when every token of ``title`` occurs in the node's slot or value.
        """
        query = tokens(title)
        if not query:
            return []
        norm = " ".join(query)
        out = []
        for node in self.iter_nodes():
            if not node.active:
                continue
            if title.strip() == node.slot or norm == normalize(node.title):
                out.append(node.slot)
                continue
            bag = set(tokens(node.title)) | set(tokens(node.value))
            if all(t in bag for t in query):
                out.append(node.slot)
        return out

    def replace_global(
        self,
        replaced_title: str,
        replacement_value: str | Callable[[str], str],
        round: int = 0,
    ) -> list[NodeRevision]:
        """Update every active node matching ``replaced_title``, in any DAG.

        ``replacement_value`` may be a function of the node's old value.
        """
        targets = self.matching(replaced_title)
        if not targets:
            raise NoMatch(f"no active node matches {replaced_title!r}")
        revisions = []
        for slot in targets:
            old = self.node(slot).value
            new = replacement_value(old) if callable(replacement_value) else replacement_value
            rev = self.update_node(slot, new, round)
            if rev is not None:
                revisions.append(rev)
        return revisions

    def rollback_node(self, slot: str, steps: int = 1, round: int = 0) -> NodeRevision | None:
        """Restore the value ``steps`` entries back, dropping the rolled-past entries."""
        node = self.node(slot)
        if steps < 0:
            raise ValueError("steps must be non-negative")
        if steps == 0:
            return None
        if steps > len(node.history):
            raise HistoryUnderflow(
                f"{slot!r} has {len(node.history)} history entries, cannot roll back {steps}"
            )
        restored = node.history[-steps]
        revision = NodeRevision(slot, node.value, restored, round)
        del node.history[-steps:]
        node.value = restored
        self.revisions.append(revision)
        self.propagate_dependencies(slot)
        return revision

    def inactivate_node(self, slot: str) -> None:
        node = self.node(slot)
        if not node.active:
            raise AlreadyInactive(f"{slot!r} is already inactive")
        node.status = INACTIVE
        self.stale.discard(slot)

    def set_responses(self, slot: str, user_response: str, ai_response: str) -> None:
        node = self.node(slot)
        node.user_response = user_response
        node.ai_response = ai_response

    # -- queries -------------------------------------------------------------

    def find_node(self, query_title: str) -> str | None:
        """Best active match for a free-text title, or None.

        Priority: exact slot, exact normalized title, then the largest overlap
        between query tokens and the tokens of the slot's last segment plus
        the value. Ties go to the node met first in forest order.
        """
        raw = query_title.strip()
        if not raw:
            return None
        active = [n for n in self.iter_nodes() if n.active]
        for node in active:
            if node.slot == raw:
                return node.slot
        norm = normalize(raw)
        for node in active:
            if normalize(node.title) == norm:
                return node.slot
        query = set(norm.split())
        best, best_score = None, 0
        for node in active:
            score = len(query & _match_tokens(node))
            if score > best_score:
                best, best_score = node.slot, score
        return best

    def topological_order(self, slots: Iterable[str] | None = None) -> list[str]:
        """Deterministic topological order (prerequisites first) over the forest.

        Ready nodes are released in forest order. With ``slots`` given, the
        result is restricted to those slots.
        """
        position = {n.slot: i for i, n in enumerate(self.iter_nodes())}
        indegree = {slot: 0 for slot in position}
        for node in self.iter_nodes():
            indegree[node.slot] = sum(1 for _ in _prerequisites(node))
        ready = [(position[s], s) for s, d in indegree.items() if d == 0]
        heapq.heapify(ready)
        order = []
        while ready:
            _, slot = heapq.heappop(ready)
            order.append(slot)
            for nxt in self._downstream(slot):
                indegree[nxt] -= 1
                if indegree[nxt] == 0:
                    heapq.heappush(ready, (position[nxt], nxt))
        if len(order) != len(position):
            raise CycleDetected("forest contains a cycle")
        if slots is None:
            return order
        wanted = set(slots)
        return [s for s in order if s in wanted]

    def propagate_dependencies(self, slot: str) -> list[str]:
        """Transitive dependents of ``slot``, topologically ordered, marked stale.

        A node is a dependent when its dependency list or its parent chain
        leads back to ``slot``.
        """
        self.node(slot)
        seen: set[str] = set()
        queue = deque([slot])
        while queue:
            current = queue.popleft()
            for nxt in self._downstream(current):
                if nxt not in seen and nxt != slot:
                    seen.add(nxt)
                    queue.append(nxt)
        ordered = self.topological_order(seen)
        self.stale.update(s for s in ordered if self.node(s).active)
        return ordered

    def retrieve_subgraph(
        self,
        focus: str,
        token_cost: Callable[[TaskNode], int],
        budget: int | None = None,
    ) -> ContextSubgraph:
        """Root-to-focus path, the focus's direct dependencies and its stale dependents.

        Inactive nodes are never included. When ``budget`` is exceeded, stale
        dependents are dropped first (furthest in topological order first),
        then dependencies; the path is never cut.
        """
        node = self.node(focus)
        if not node.active:
            raise InactiveFocus(f"focus {focus!r} is inactive")
        path = [s for s in self.path_to(focus) if self.node(s).active]
        on_path = set(path)
        deps = [d for d in node.dependencies if self.node(d).active and d not in on_path]
        taken = on_path | set(deps)
        downstream = self._transitive_downstream(focus)
        stale = [
            s
            for s in self.topological_order(downstream)
            if s in self.stale and self.node(s).active and s not in taken
        ]
        costs = {s: token_cost(self.node(s)) for s in itertools.chain(path, deps, stale)}

        if budget is not None:
            path_cost = sum(costs[s] for s in path)
            if path_cost > budget:
                raise BudgetTooSmall(f"path to {focus!r} costs {path_cost} > budget {budget}")
            total = path_cost + sum(costs[s] for s in deps) + sum(costs[s] for s in stale)
            while total > budget and stale:
                total -= costs[stale.pop()]
            while total > budget and deps:
                total -= costs[deps.pop()]

        chosen = set(path) | set(deps) | set(stale)
        return ContextSubgraph(
            focus=focus,
            path=path,
            dependencies=deps,
            stale=stale,
            nodes=self.topological_order(chosen),
            costs={s: costs[s] for s in chosen},
        )

    def _transitive_downstream(self, slot: str) -> set[str]:
        seen: set[str] = set()
        queue = deque([slot])
        while queue:
            for nxt in self._downstream(queue.popleft()):
                if nxt not in seen and nxt != slot:
                    seen.add(nxt)
                    queue.append(nxt)
        return seen

    def task_view(self, slot: str) -> list[str]:
        """Active nodes that make up the task rooted at ``slot``.

        The node itself, its active descendants, and the active dependencies
        of any of those, in topological order.
        """
        self.node(slot)
        members: set[str] = set()
        queue = deque([slot])
        while queue:
            current = queue.popleft()
            if current in members or not self.node(current).active:
                continue
            members.add(current)
            queue.extend(self.children(current))
        for member in list(members):
            for dep in self.node(member).dependencies:
                if self.node(dep).active:
                    members.add(dep)
        return self.topological_order(members)

    def check_integrity(self) -> None:
        """Raise IntegrityError unless every invariant holds."""
        seen: set[str] = set()
        for dag in self.dags:
            expected_roots = [s for s, n in dag.nodes.items() if n.parent is None]
            if sorted(dag.roots) != sorted(expected_roots):
                raise IntegrityError(f"roots {dag.roots} do not match parentless nodes")
            for slot, node in dag.nodes.items():
                if slot != node.slot or not slot:
                    raise IntegrityError(f"node keyed {slot!r} carries slot {node.slot!r}")
                if slot in seen:
                    raise IntegrityError(f"slot {slot!r} appears in more than one DAG")
                seen.add(slot)
                if node.status not in (ACTIVE, INACTIVE):
                    raise IntegrityError(f"{slot!r} has status {node.status!r}")
                if node.parent is not None and node.parent not in dag.nodes:
                    raise IntegrityError(f"parent {node.parent!r} of {slot!r} is not in its DAG")
        for node in self.iter_nodes():
            for dep in node.dependencies:
                if dep not in seen:
                    raise IntegrityError(f"dependency {dep!r} of {node.slot!r} does not exist")
        try:
            self.topological_order()
        except CycleDetected as exc:
            raise IntegrityError(str(exc)) from None


def _match_tokens(node: TaskNode) -> set[str]:
    tail = node.slot.rsplit(".", 1)[-1]
    return set(tokens(tail)) | set(tokens(node.value))


def _structure(forest: Forest) -> list[tuple[list[str], list[dict[str, Any]]]]:
    return [
        (list(dag.roots), [n.to_dict() for n in dag.nodes.values()]) for dag in forest.dags
    ]


# ---------------------------------------------------------------------------
# persistence


def snapshot(forest: Forest, indent: int | None = None) -> str:
    doc = {
        "dags": [
            {
                "roots": list(dag.roots),
                "nodes": {slot: node.to_dict() for slot, node in dag.nodes.items()},
            }
            for dag in forest.dags
        ]
    }
    return json.dumps(doc, indent=indent, ensure_ascii=False)


def load(text: str) -> Forest:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedSnapshot(f"not JSON: {exc}") from None
    if not isinstance(doc, dict) or not isinstance(doc.get("dags"), list):
        raise MalformedSnapshot('expected an object with a "dags" array')
    dags = []
    for i, raw in enumerate(doc["dags"]):
        if not isinstance(raw, dict):
            raise MalformedSnapshot(f"dags[{i}] is not an object")
        roots, nodes = raw.get("roots"), raw.get("nodes")
        if not isinstance(roots, list) or not all(isinstance(r, str) for r in roots):
            raise MalformedSnapshot(f"dags[{i}].roots must be a list of strings")
        if not isinstance(nodes, dict):
            raise MalformedSnapshot(f"dags[{i}].nodes must be an object")
        dag = TaskDAG(roots=list(roots))
        for key, fields in nodes.items():
            dag.nodes[key] = _node_from_dict(fields, f"dags[{i}].nodes[{key!r}]")
        dags.append(dag)
    forest = Forest(dags)
    forest.check_integrity()
    return forest


def _node_from_dict(fields: Any, where: str) -> TaskNode:
    if not isinstance(fields, dict) or set(fields) != set(NODE_FIELDS):
        raise MalformedSnapshot(f"{where} must have exactly the fields {', '.join(NODE_FIELDS)}")
    for name in ("slot", "value", "status", "user_response", "ai_response"):
        if not isinstance(fields[name], str):
            raise MalformedSnapshot(f"{where}.{name} must be a string")
    if fields["parent"] is not None and not isinstance(fields["parent"], str):
        raise MalformedSnapshot(f"{where}.parent must be a string or null")
    for name in ("history", "dependencies"):
        value = fields[name]
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise MalformedSnapshot(f"{where}.{name} must be a list of strings")
    return TaskNode(**{name: copy.deepcopy(fields[name]) for name in NODE_FIELDS})


# ---------------------------------------------------------------------------
# DOT export


def _dot_quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'


def to_dot(forest: Forest) -> str:
    """One ``digraph`` per DAG: solid parent edges, dashed dependencies, grey inactive nodes."""
    out = []
    for i, dag in enumerate(forest.dags):
        name = dag.roots[0] if dag.roots else f"dag{i}"
        lines = [f"digraph {_dot_quote(name)} {{", "  node [shape=box, style=rounded];"]
        for node in dag.nodes.values():
            label = f"{node.title}\nvalue: {node.value}"
            if node.history:
                label += f"\nhistory: {', '.join(node.history)}"
            attrs = [f"label={_dot_quote(label)}"]
            if not node.active:
                attrs.append('color="grey"')
                attrs.append('fontcolor="grey"')
            lines.append(f"  {_dot_quote(node.slot)} [{', '.join(attrs)}];")
        for node in dag.nodes.values():
            if node.parent is not None:
                lines.append(f"  {_dot_quote(node.parent)} -> {_dot_quote(node.slot)};")
            for dep in node.dependencies:
                lines.append(f"  {_dot_quote(dep)} -> {_dot_quote(node.slot)} [style=dashed];")
        lines.append("}")
        out.append("\n".join(lines))
    return "\n".join(out) + ("\n" if out else "")
