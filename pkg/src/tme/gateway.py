"""Chat-completion responders: recorded replay and an OpenAI-compatible HTTP client."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

log = logging.getLogger(__name__)

DEFAULT_MODEL = "gpt-4o"
DEFAULT_TEMPERATURE = 0.3
API_KEY_ENV = "TME_API_KEY"
ROLES = ("system", "user", "assistant")

RESPONDER_SYSTEM_PROMPT = (
    "You are a task assistant. Answer the user using only the task memory given in the prompt."
)


class GatewayError(Exception):
    pass


class Transport(GatewayError):
    """Network failure or timeout that survived every retry."""


class ApiError(GatewayError):
    def __init__(self, status: int, body: str) -> None:
        super().__init__(f"HTTP {status}: {body[:300]}")
        self.status = status
        self.body = body


class UnrecordedRequest(GatewayError):
    pass


def canonical_text(text: str) -> str:
    """Whitespace-collapsed form used for every prompt and request hash."""
    return " ".join(text.split())


def prompt_hash(text: str) -> str:
    return hashlib.sha256(canonical_text(text).encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple[Mapping[str, str], ...]
    model: str = DEFAULT_MODEL
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self) -> None:
        messages = tuple(dict(m) for m in self.messages)
        if not messages:
            raise ValueError("a chat request needs at least one message")
        for m in messages:
            if m.get("role") not in ROLES or not isinstance(m.get("content"), str):
                raise ValueError(f"bad message {m!r}")
        if messages[0]["role"] not in ("system", "user"):
            raise ValueError("the first message must come from system or user")
        if not 0 <= self.temperature <= 2:
            raise ValueError("temperature must lie in [0, 2]")
        object.__setattr__(self, "messages", messages)

    @classmethod
    def for_prompt(
        cls,
        prompt: str,
        model: str = DEFAULT_MODEL,
        temperature: float = DEFAULT_TEMPERATURE,
        system: str = RESPONDER_SYSTEM_PROMPT,
    ) -> ChatRequest:
        return cls(
            messages=({"role": "system", "content": system}, {"role": "user", "content": prompt}),
            model=model,
            temperature=temperature,
        )

    def body(self) -> dict[str, Any]:
        return {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [dict(m) for m in self.messages],
        }

    def hash(self) -> str:
        """sha256 over canonical JSON of model, temperature and canonicalized messages."""
        doc = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": m["role"], "content": canonical_text(m["content"])} for m in self.messages
            ],
        }
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


class RecordedResponder:
    """Replays responses keyed by request hash; never touches the network."""

    kind = "recorded"

    def __init__(self, table: Mapping[str, str]) -> None:
        self.table = dict(table)

    @classmethod
    def from_file(cls, path: str | Path) -> RecordedResponder:
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def respond(self, request: ChatRequest) -> str:
        key = request.hash()
        try:
            return self.table[key]
        except KeyError:
            raise UnrecordedRequest(f"no recorded response for request {key[:12]}") from None


class StaticResponder:
    """Answers every request with the same text. Offline stand-in for the REPL."""

    kind = "static"

    def __init__(self, text: str = "Noted.") -> None:
        self.text = text

    def respond(self, request: ChatRequest) -> str:
        return self.text


class HttpResponder:
    """Client for ``POST <base>/v1/chat/completions``.

    Transport errors, 429 and 5xx responses are retried with exponential
    backoff (``backoff * 2**attempt``), at most ``retries`` times. Other
    non-2xx statuses raise :class:`ApiError` immediately. ``max_in_flight``
    caps concurrent requests across threads sharing this instance.
    """

    kind = "http"

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        timeout: float = 30.0,
        retries: int = 2,
        backoff: float = 0.5,
        max_in_flight: int = 4,
        transport: Any = None,
    ) -> None:
        self.base_url = base_url.rstrip("/")
        self._api_key = api_key if api_key is not None else os.environ.get(API_KEY_ENV, "")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._transport = transport

    def __repr__(self) -> str:
        return f"HttpResponder(base_url={self.base_url!r}, retries={self.retries})"

    def respond(self, request: ChatRequest) -> str:
        import httpx

        url = f"{self.base_url}/v1/chat/completions"
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"
        last: Exception | None = None
        with self._slots, httpx.Client(timeout=self.timeout, transport=self._transport) as client:
            for attempt in range(self.retries + 1):
                if attempt:
                    time.sleep(self.backoff * 2 ** (attempt - 1))
                try:
                    resp = client.post(url, json=request.body(), headers=headers)
                except httpx.TransportError as exc:
                    last = exc
                    log.warning("chat request attempt %d failed: %s", attempt + 1, type(exc).__name__)
                    continue
                if resp.status_code == 429 or resp.status_code >= 500:
                    last = ApiError(resp.status_code, resp.text)
                    log.warning("chat request attempt %d got HTTP %d", attempt + 1, resp.status_code)
                    continue
                if not 200 <= resp.status_code < 300:
                    raise ApiError(resp.status_code, resp.text)
                return _content(resp.text)
        if isinstance(last, ApiError):
            raise last
        raise Transport(f"{url} unreachable after {self.retries + 1} attempts: {last}")


def _content(body: str) -> str:
    try:
        return json.loads(body)["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError):
        raise ApiError(200, f"unexpected response body: {body}") from None


def respond(backend: Any, request: ChatRequest) -> str:
    return backend.respond(request)


def make_responder(kind: str, **config: Any) -> Any:
    if kind == "recorded":
        if "table" in config:
            return RecordedResponder(config["table"])
        return RecordedResponder.from_file(config["path"])
    if kind == "http":
        return HttpResponder(**config)
    if kind == "static":
        return StaticResponder(config.get("text", "Noted."))
    raise ValueError(f"unknown responder kind {kind!r}")


def merge_tables(tables: Sequence[Mapping[str, str]]) -> dict[str, str]:
    merged: dict[str, str] = {}
    for table in tables:
        for key, value in table.items():
            if key in merged and merged[key] != value:
                raise ValueError(f"conflicting recorded entries for {key[:12]}")
            merged[key] = value
    return merged
