"""Revision-aware task memory for multi-turn agents."""

from .engine import (
    ApproximateCounter,
    RecordedCounter,
    SessionState,
    TokenLedger,
    new_session,
    step,
    summarize_all,
    synthesize_prompt,
)
from .gateway import ChatRequest, HttpResponder, RecordedResponder, StaticResponder
from .memory import Forest, TaskNode, load, snapshot, to_dot
from .trim import SubtaskIntent, make_classifier, parse_intent_json

__all__ = [
    "ApproximateCounter",
    "ChatRequest",
    "Forest",
    "HttpResponder",
    "RecordedCounter",
    "RecordedResponder",
    "SessionState",
    "StaticResponder",
    "SubtaskIntent",
    "TaskNode",
    "TokenLedger",
    "load",
    "make_classifier",
    "new_session",
    "parse_intent_json",
    "snapshot",
    "step",
    "summarize_all",
    "synthesize_prompt",
    "to_dot",
]
