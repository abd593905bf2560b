"""Translate a natural-language research goal into a structured workflow intent.

Two backends: a deterministic keyword-table fallback that keeps the engine and
tests hermetic, and a chat-completion HTTP client for model-backed parsing with
bounded retries on unparseable output.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from typing import Callable

import httpx


class Modality(Enum):
    SMRI = "SMRI"
    FMRI = "FMRI"
    DMRI = "DMRI"
    PET = "PET"
    TABULAR = "TABULAR"


class DownstreamTask(Enum):
    CLASSIFICATION = "CLASSIFICATION"
    REGRESSION = "REGRESSION"
    CORRELATION_ANALYSIS = "CORRELATION_ANALYSIS"
    GROUP_ANALYSIS = "GROUP_ANALYSIS"


@dataclass
class WorkflowIntent:
    modalities: set[Modality]
    tasks: set[DownstreamTask]
    raw_prompt: str
    backend_id: str
    attempts_used: int = 1

    def to_dict(self) -> dict:
        return {
            "modalities": sorted(m.value for m in self.modalities),
            "tasks": sorted(t.value for t in self.tasks),
            "raw_prompt": self.raw_prompt,
            "backend_id": self.backend_id,
            "attempts_used": self.attempts_used,
        }

    @classmethod
    def from_dict(cls, d: dict) -> WorkflowIntent:
        return cls(
            modalities={Modality(m) for m in d["modalities"]},
            tasks={DownstreamTask(t) for t in d["tasks"]},
            raw_prompt=d["raw_prompt"],
            backend_id=d["backend_id"],
            attempts_used=d["attempts_used"],
        )


@dataclass
class ParseOutcome:
    status: str  # VALID | INVALID
    intent: WorkflowIntent | None = None
    failure_reason: str | None = None

    @property
    def valid(self) -> bool:
        return self.status == "VALID"


@dataclass
class UsageStats:
    prompt_tokens: int = 0
    completion_tokens: int = 0

    def add(self, other: "UsageStats") -> None:
        self.prompt_tokens += other.prompt_tokens
        self.completion_tokens += other.completion_tokens


@dataclass
class BackendConfig:
    kind: str = "RULE_BASED"  # RULE_BASED | HTTP_CHAT
    endpoint_url: str | None = None
    model_name: str | None = None
    timeout: float = 60.0
    max_parse_retries: int = 3

    def __post_init__(self) -> None:
        if self.kind not in ("RULE_BASED", "HTTP_CHAT"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "HTTP_CHAT" and not (self.endpoint_url and self.model_name):
            raise ValueError("HTTP_CHAT backend requires endpoint_url and model_name")
        if self.max_parse_retries < 1:
            raise ValueError("max_parse_retries must be >= 1")

    @property
    def backend_id(self) -> str:
        return self.model_name if self.kind == "HTTP_CHAT" else "rule_based"


class TransportError(Exception):
    """HTTP backend unreachable, non-2xx, or returned a malformed body."""


# Event sink signature: sink(kind, payload_dict). The engine wires this to the
# workflow event log; tests pass a list collector.
EventSink = Callable[[str, dict], None]


_KEYWORD_RULES: list[tuple[str, str, str]] | None = None


def _load_keyword_table() -> list[tuple[str, str, str]]:
    global _KEYWORD_RULES
    if _KEYWORD_RULES is None:
        text = resources.files("neuropipe.data").joinpath("keywords.tsv").read_text("utf-8")
        rules = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            keyword, kind, token = line.split("\t")
            rules.append((keyword, kind, token))
        _KEYWORD_RULES = rules
    return _KEYWORD_RULES


def _keyword_matches(keyword: str, text: str) -> bool:
    # Left word boundary always; right boundary unless the rule is a stem
    # (trailing '*'), which permits suffix continuation ("diagnos*").
    stem = keyword.endswith("*")
    kw = keyword[:-1] if stem else keyword
    pattern = r"(?<![a-z0-9])" + re.escape(kw)
    if not stem:
        pattern += r"(?![a-z0-9])"
    return re.search(pattern, text) is not None


def rule_based_parse(prompt: str) -> ParseOutcome:
    """Deterministic fallback: scan the lower-cased prompt against the keyword table."""
    text = prompt.lower()
    modalities: set[Modality] = set()
    tasks: set[DownstreamTask] = set()
    for keyword, kind, token in _load_keyword_table():
        if _keyword_matches(keyword, text):
            if kind == "MODALITY":
                modalities.add(Modality(token))
            else:
                tasks.add(DownstreamTask(token))
    if not modalities:
        return ParseOutcome(status="INVALID", failure_reason="no modality keyword matched")
    intent = WorkflowIntent(
        modalities=modalities, tasks=tasks, raw_prompt=prompt, backend_id="rule_based"
    )
    return ParseOutcome(status="VALID", intent=intent)


INTENT_INSTRUCTIONS = (
    "You route neuroimaging analysis requests. Reply with a single flat JSON object "
    "with exactly two keys: \"modalities\" and \"tasks\". \"modalities\" is a list "
    "drawn from [\"SMRI\", \"FMRI\", \"DMRI\", \"PET\", \"TABULAR\"]; \"tasks\" is a "
    "list drawn from [\"CLASSIFICATION\", \"REGRESSION\", \"CORRELATION_ANALYSIS\", "
    "\"GROUP_ANALYSIS\"]. No other text."
)


def http_chat_complete(
    messages: list[dict], backend: BackendConfig, client: httpx.Client | None = None
) -> tuple[str, UsageStats]:
    """POST a chat-completion request and return (content, token usage)."""
    if backend.kind != "HTTP_CHAT":
        raise ValueError("http_chat_complete requires an HTTP_CHAT backend")
    payload = {"model": backend.model_name, "messages": messages, "temperature": 0}
    try:
        if client is None:
            response = httpx.post(backend.endpoint_url, json=payload, timeout=backend.timeout)
        else:
            response = client.post(backend.endpoint_url, json=payload, timeout=backend.timeout)
    except httpx.HTTPError as exc:
        raise TransportError(f"backend request failed: {exc}") from exc
    if response.status_code // 100 != 2:
        raise TransportError(f"backend returned status {response.status_code}")
    try:
        body = response.json()
        content = body["choices"][0]["message"]["content"]
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise TransportError(f"malformed backend body: {exc}") from exc
    usage = body.get("usage") or {}
    stats = UsageStats(
        prompt_tokens=int(usage.get("prompt_tokens", 0) or 0),
        completion_tokens=int(usage.get("completion_tokens", 0) or 0),
    )
    return content, stats


def _extract_braces(text: str) -> str | None:
    """Strip prose around the structured document by locating the outermost braces."""
    start, end = text.find("{"), text.rfind("}")
    if start == -1 or end <= start:
        return None
    return text[start : end + 1]


def _decode_intent_document(raw: str) -> tuple[set[Modality], set[DownstreamTask]] | None:
    """Parse one backend attempt. None means the attempt counts as unparseable.

    Any token outside the closed vocabularies fails the attempt; nothing is
    silently coerced. An empty modality set also fails (it cannot seed a graph).
    """
    snippet = _extract_braces(raw)
    if snippet is None:
        return None
    try:
        doc = json.loads(snippet)
    except json.JSONDecodeError:
        return None
    if not isinstance(doc, dict) or "modalities" not in doc or "tasks" not in doc:
        return None
    try:
        modalities = {Modality(str(m).upper()) for m in doc["modalities"]}
        tasks = {DownstreamTask(str(t).upper()) for t in doc["tasks"]}
    except (ValueError, TypeError):
        return None
    if not modalities:
        return None
    return modalities, tasks


def parse_intent(
    prompt: str,
    backend: BackendConfig,
    event_sink: EventSink | None = None,
    usage_out: UsageStats | None = None,
) -> ParseOutcome:
    """Parse a prompt into a WorkflowIntent with at most max_parse_retries attempts."""
    if not prompt:
        raise ValueError("prompt must be non-empty")
    sink = event_sink or (lambda kind, payload: None)

    if backend.kind == "RULE_BASED":
        outcome = rule_based_parse(prompt)
        sink(
            "NOTE",
            {
                "what": "intent_parse_attempt",
                "attempt": 1,
                "backend": backend.backend_id,
                "raw_response": outcome.status,
            },
        )
        return outcome

    messages = [
        {"role": "system", "content": INTENT_INSTRUCTIONS},
        {"role": "user", "content": prompt},
    ]
    last_failure = "unparseable structured output"
    transport_failures = 0
    for attempt in range(1, backend.max_parse_retries + 1):
        try:
            raw, usage = http_chat_complete(messages, backend)
        except TransportError as exc:
            transport_failures += 1
            last_failure = str(exc)
            sink(
                "NOTE",
                {
                    "what": "intent_parse_attempt",
                    "attempt": attempt,
                    "backend": backend.backend_id,
                    "error": str(exc),
                },
            )
            continue
        if usage_out is not None:
            usage_out.add(usage)
        sink(
            "NOTE",
            {
                "what": "intent_parse_attempt",
                "attempt": attempt,
                "backend": backend.backend_id,
                "raw_response": raw,
            },
        )
        decoded = _decode_intent_document(raw)
        if decoded is not None:
            modalities, tasks = decoded
            intent = WorkflowIntent(
                modalities=modalities,
                tasks=tasks,
                raw_prompt=prompt,
                backend_id=backend.backend_id,
                attempts_used=attempt,
            )
            return ParseOutcome(status="VALID", intent=intent)
    if transport_failures == backend.max_parse_retries:
        return ParseOutcome(status="INVALID", failure_reason="backend_unreachable")
    return ParseOutcome(status="INVALID", failure_reason=last_failure)
