"""Chat-model access: a remote HTTP backend and a file-scripted backend.

Both expose the same duck-typed surface::

    backend.complete(messages, params, turn_index=0) -> str

and both honor stop sequences the same way: the returned text never extends
past the first stop sequence, and the stop sequence itself is included. The
closing action tags are always part of the stop set, so a well-behaved
generation ends exactly at its action tag.

The scripted backend replays a JSONL rule file and is a pure function of
(rules, messages, turn_index); it exists so rollouts, the trajectory
factory, and CI can run without a model server.
"""

from __future__ import annotations

import json
import logging
import re
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import requests

from .errors import BackendError, DataError
from .protocol import CLOSING_ACTION_TAGS

__all__ = [
    "ChatMessage",
    "GenerationParams",
    "EmptyGenerationError",
    "ChatBackendError",
    "ScriptError",
    "ScriptedRule",
    "ScriptedBackend",
    "HttpChatBackend",
    "load_script",
    "truncate_at_stop",
]

logger = logging.getLogger(__name__)


class ChatBackendError(BackendError):
    """The chat backend failed or returned an unusable response."""


class EmptyGenerationError(ChatBackendError):
    """The backend produced no text (or no scripted rule matched)."""


class ScriptError(DataError):
    """Scripted-backend rule file failed validation."""


@dataclass(frozen=True)
class ChatMessage:
    """One chat message. ``images`` carries refs the server resolves."""

    role: str
    content: str
    images: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.role not in ("system", "user", "assistant"):
            raise ValueError(f"unknown chat role: {self.role!r}")
        if not self.content and not self.images:
            raise ValueError("chat message needs content or an image attachment")


@dataclass
class GenerationParams:
    temperature: float = 0.0
    max_new_tokens: int = 1024
    stop_sequences: list[str] = field(default_factory=lambda: list(CLOSING_ACTION_TAGS))

    def __post_init__(self) -> None:
        # The closing action tags are non-negotiable members of the stop set.
        for tag in CLOSING_ACTION_TAGS:
            if tag not in self.stop_sequences:
                self.stop_sequences.append(tag)


def truncate_at_stop(text: str, stop_sequences: Sequence[str]) -> str:
    """Cut at the earliest stop sequence, keeping the stop sequence itself."""
    best: int | None = None
    for stop in stop_sequences:
        pos = text.find(stop)
        if pos >= 0:
            end = pos + len(stop)
            if best is None or end < best:
                best = end
    return text if best is None else text[:best]


@dataclass(frozen=True)
class ScriptedRule:
    """Either ``turn_index`` or ``pattern`` is set, never both.

    ``pattern`` is a regex searched (DOTALL) against the most recent
    user-role message content.
    """

    output: str
    turn_index: int | None = None
    pattern: str | None = None

    def matches(self, last_user_content: str, turn_index: int) -> bool:
        if self.turn_index is not None:
            return self.turn_index == turn_index
        assert self.pattern is not None
        return re.search(self.pattern, last_user_content, re.DOTALL) is not None


class ScriptedBackend:
    """Deterministic replay backend driven by first-match-wins rules."""

    def __init__(self, rules: Sequence[ScriptedRule]):
        self.rules = list(rules)

    def complete(
        self,
        messages: Sequence[ChatMessage],
        params: GenerationParams,
        turn_index: int = 0,
    ) -> str:
        last_user = next((m.content for m in reversed(messages) if m.role == "user"), "")
        for rule in self.rules:
            if rule.matches(last_user, turn_index):
                return truncate_at_stop(rule.output, params.stop_sequences)
        raise EmptyGenerationError(f"no scripted rule matched turn {turn_index}")


def load_script(path: str | Path) -> ScriptedBackend:
    """Load JSONL rules: {"match": {"turn_index": N} | {"pattern": S}, "output": S}."""
    path = Path(path)
    rules: list[ScriptedRule] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ScriptError(f"{path}: line {line_no}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict) or not isinstance(obj.get("match"), dict):
                raise ScriptError(f"{path}: line {line_no}: rule needs a 'match' object")
            if not isinstance(obj.get("output"), str) or not obj["output"]:
                raise ScriptError(f"{path}: line {line_no}: rule needs a non-empty 'output' string")
            match = obj["match"]
            has_turn = "turn_index" in match
            has_pattern = "pattern" in match
            if has_turn == has_pattern:
                raise ScriptError(
                    f"{path}: line {line_no}: match needs exactly one of 'turn_index'/'pattern'"
                )
            if has_turn and not isinstance(match["turn_index"], int):
                raise ScriptError(f"{path}: line {line_no}: 'turn_index' must be an integer")
            if has_pattern:
                if not isinstance(match["pattern"], str):
                    raise ScriptError(f"{path}: line {line_no}: 'pattern' must be a string")
                try:
                    re.compile(match["pattern"])
                except re.error as exc:
                    raise ScriptError(f"{path}: line {line_no}: bad pattern: {exc}") from exc
            rules.append(
                ScriptedRule(
                    output=obj["output"],
                    turn_index=match.get("turn_index"),
                    pattern=match.get("pattern"),
                )
            )
    return ScriptedBackend(rules)


@dataclass
class HttpChatBackend:
    """Client for a POST /chat endpoint.

    Request: {"messages": [{"role", "content", "images"?}], "temperature",
    "max_tokens", "stop"}; response: {"text": str}. Requests carry a
    client-generated X-Request-Id that is reused across retries of the same
    call, so server-side dedup is possible and the id is logged once.
    """

    url: str
    api_key: str | None = None
    timeout: float = 60.0
    retries: int = 2

    def complete(
        self,
        messages: Sequence[ChatMessage],
        params: GenerationParams,
        turn_index: int = 0,
    ) -> str:
        payload_messages = []
        for m in messages:
            entry: dict = {"role": m.role, "content": m.content}
            if m.images:
                entry["images"] = list(m.images)
            payload_messages.append(entry)
        payload = {
            "messages": payload_messages,
            "temperature": params.temperature,
            "max_tokens": params.max_new_tokens,
            "stop": list(params.stop_sequences),
        }
        request_id = str(uuid.uuid4())
        headers = {"X-Request-Id": request_id}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        logger.debug("chat request %s: %d message(s)", request_id, len(messages))

        last_error: Exception | None = None
        attempts = 0
        for attempt in range(self.retries + 1):
            attempts = attempt + 1
            try:
                resp = requests.post(self.url, json=payload, headers=headers, timeout=self.timeout)
            except requests.RequestException as exc:
                last_error = exc
                time.sleep(min(0.2 * (attempt + 1), 1.0))
                continue
            if resp.status_code >= 500:
                last_error = ChatBackendError(f"server error {resp.status_code}: {resp.text[:200]}")
                time.sleep(min(0.2 * (attempt + 1), 1.0))
                continue
            if resp.status_code != 200:
                raise ChatBackendError(f"chat endpoint returned {resp.status_code}: {resp.text[:200]}")
            try:
                text = resp.json()["text"]
            except (ValueError, KeyError) as exc:
                raise ChatBackendError(f"malformed chat response: {exc}") from exc
            if not isinstance(text, str) or not text.strip():
                raise EmptyGenerationError("chat endpoint returned empty text")
            return truncate_at_stop(text, params.stop_sequences)
        raise ChatBackendError(
            f"chat endpoint unreachable after {attempts} attempt(s): {last_error}"
        )
