"""Chat-completion providers and tolerant parsing of entity-list answers.

Providers share one small interface (``check`` and ``complete``):

* :class:`OpenAIChatProvider` talks to any OpenAI-compatible
  ``/chat/completions`` endpoint.
* :class:`MockProvider` answers offline (``echo-gold``, ``empty``,
  ``malformed``).
* :class:`ReplayProvider` answers from a transcript written by an earlier run.
"""

from __future__ import annotations

import ast
import hashlib
import json
import os
import re
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import httpx

from ._http import post_json
from .corpus import EntitySpan
from .errors import ConfigError, ParseFailure, ProtocolError, ProviderError
from .promptkit import RenderedPrompt

RESPONSE_FORMATS = ("structured-entities", "free-text")

ENTITY_SCHEMA = {
    "type": "object",
    "properties": {
        "entities": {
            "type": "array",
            "items": {
                "type": "object",
                "properties": {"Entity": {"type": "string"}, "Label": {"type": "string"}},
                "required": ["Entity", "Label"],
                "additionalProperties": False,
            },
        }
    },
    "required": ["entities"],
    "additionalProperties": False,
}


@dataclass(frozen=True)
class CompletionParams:
    model_id: str = "mock"
    temperature: float = 0.0
    seed: int = 42
    max_output_tokens: int = 1024
    response_format: str = "structured-entities"

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError(f"temperature must be >= 0, got {self.temperature}")
        if self.response_format not in RESPONSE_FORMATS:
            raise ConfigError(f"unknown response format {self.response_format!r}")
        if self.max_output_tokens <= 0:
            raise ConfigError("max_output_tokens must be positive")


def request_fingerprint(prompt: RenderedPrompt, params: CompletionParams) -> str:
    blob = prompt.sha256 + json.dumps(asdict(params), sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class RawCompletion:
    text: str
    model_id: str
    latency_ms: float
    request_fingerprint: str
    system_fingerprint: str | None = None
    usage: dict | None = None


@dataclass(frozen=True)
class PredictedEntity:
    surface: str
    category: str


class ChatProvider(Protocol):
    name: str

    def check(self) -> None: ...

    def complete(self, prompt: RenderedPrompt, params: CompletionParams) -> RawCompletion: ...


def serialize_entities(spans: Sequence[EntitySpan]) -> str:
    return json.dumps([{"Entity": sp.surface, "Label": sp.category} for sp in spans])


class MockProvider:
    MODES = ("echo-gold", "empty", "malformed")

    def __init__(self, mode: str, gold: Mapping[int, Sequence[EntitySpan]] | None = None):
        if mode not in self.MODES:
            raise ConfigError(f"unknown mock mode {mode!r}; choose from {self.MODES}")
        if mode == "echo-gold" and gold is None:
            raise ConfigError("echo-gold mock needs the gold spans of the targets")
        self.mode = mode
        self.gold = gold or {}
        self.name = f"mock:{mode}"

    def check(self) -> None:
        pass

    def complete(self, prompt: RenderedPrompt, params: CompletionParams) -> RawCompletion:
        if self.mode == "empty":
            text = "[]"
        elif self.mode == "malformed":
            text = "not json {"
        else:
            text = serialize_entities(self.gold.get(prompt.input_sentence_id, ()))
        return RawCompletion(text, self.name, 0.0, request_fingerprint(prompt, params))


class OpenAIChatProvider:
    def __init__(
        self,
        endpoint: str,
        api_key_env: str = "ANNOTATOR_API_KEY",
        supports_structured: bool = True,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
        timeout: float = 120.0,
    ):
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.supports_structured = supports_structured
        self.client = client or httpx.Client(timeout=timeout)
        self.sleep = sleep
        self.name = f"openai:{endpoint}"

    def _headers(self) -> dict:
        key = os.environ.get(self.api_key_env)
        return {"Authorization": f"Bearer {key}"} if key else {}

    def check(self) -> None:
        """Cheap reachability probe so a dead endpoint fails before any spend."""
        url = re.sub(r"/chat/completions/?$", "", self.endpoint) + "/models"
        try:
            resp = self.client.get(url, headers=self._headers())
        except httpx.TransportError as exc:
            raise ProviderError(f"{self.endpoint} unreachable: {exc!r}", 1) from exc
        if resp.status_code in (401, 403):
            raise ProviderError(f"{self.endpoint} rejected credentials (HTTP {resp.status_code})", 1)

    def build_request(self, prompt: RenderedPrompt, params: CompletionParams) -> dict:
        payload = {
            "model": params.model_id,
            "messages": [{"role": "user", "content": prompt.text}],
            "temperature": params.temperature,
            "seed": params.seed,
            "max_tokens": params.max_output_tokens,
        }
        if params.response_format == "structured-entities" and self.supports_structured:
            payload["response_format"] = {
                "type": "json_schema",
                "json_schema": {"name": "entities", "strict": True, "schema": ENTITY_SCHEMA},
            }
        return payload

    def complete(self, prompt: RenderedPrompt, params: CompletionParams) -> RawCompletion:
        t0 = time.perf_counter()
        body = post_json(
            self.client, self.endpoint, self.build_request(prompt, params), self._headers(), sleep=self.sleep
        )
        latency = (time.perf_counter() - t0) * 1000.0
        try:
            text = body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise ProtocolError(f"malformed chat response: {exc!r}", 1) from exc
        if not text:
            raise ProtocolError("empty completion text", 1)
        return RawCompletion(
            text=text,
            model_id=body.get("model", params.model_id),
            latency_ms=latency,
            request_fingerprint=request_fingerprint(prompt, params),
            system_fingerprint=body.get("system_fingerprint"),
            usage=body.get("usage"),
        )


class ReplayProvider:
    """Answers requests from a JSONL transcript.

    Lookup is by (target id, request fingerprint) so that two targets whose
    prompts happen to coincide still get their own recorded answers; a bare
    fingerprint match is the fallback.
    """

    def __init__(self, transcript: str | Path):
        self.path = Path(transcript)
        self.name = f"replay:{self.path.name}"
        self.records: dict[str, dict] = {}
        self.by_target: dict[tuple, dict] = {}
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    self.records.setdefault(rec["fingerprint"], rec)
                    self.by_target[(rec.get("target_id"), rec["fingerprint"])] = rec

    def check(self) -> None:
        if not self.records:
            raise ProviderError(f"transcript {self.path} holds no responses", 0)

    def complete(self, prompt: RenderedPrompt, params: CompletionParams) -> RawCompletion:
        fp = request_fingerprint(prompt, params)
        rec = self.by_target.get((prompt.input_sentence_id, fp)) or self.records.get(fp)
        if rec is None:
            raise ProviderError(f"no transcript entry for request {fp[:12]}", 1)
        if rec.get("error"):
            raise ProviderError(f"recorded failure: {rec['error']}", rec.get("attempts", 1))
        return RawCompletion(
            text=rec["response_text"],
            model_id=rec.get("model_id", params.model_id),
            latency_ms=rec.get("latency_ms", 0.0),
            request_fingerprint=fp,
            system_fingerprint=rec.get("system_fingerprint"),
            usage=rec.get("usage"),
        )


# --- output parsing -------------------------------------------------------

PARSE_LEVELS = ("strict", "wrapped", "pythonic", "embedded", "unquoted")


@dataclass
class ParsedOutput:
    entities: list[PredictedEntity]
    level: str
    field_errors: int = 0
    skipped: list = field(default_factory=list)


def _as_entity_list(obj) -> list | None:
    if isinstance(obj, list):
        return obj
    if isinstance(obj, dict):
        for k, v in obj.items():
            if isinstance(k, str) and k.lower() == "entities" and isinstance(v, list):
                return v
    return None


def _decode(text: str):
    try:
        return json.loads(text), False
    except ValueError:
        pass
    try:
        return ast.literal_eval(text), True
    except (ValueError, SyntaxError, TypeError, MemoryError, RecursionError):
        return None, False


def _balanced_end(s: str, start: int, quote_aware: bool) -> int | None:
    depth = 0
    quote = None
    i = start
    while i < len(s):
        ch = s[i]
        if quote:
            if ch == "\\":
                i += 2
                continue
            if ch == quote:
                quote = None
        elif quote_aware and ch in "\"'":
            quote = ch
        elif ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
            if depth == 0:
                return i
        i += 1
    return None


def _embedded_candidates(s: str):
    for start in (i for i, ch in enumerate(s) if ch == "["):
        ends = {_balanced_end(s, start, True), _balanced_end(s, start, False)}
        for end in sorted(e for e in ends if e is not None):
            yield s[start : end + 1]


_UNQUOTED = re.compile(
    r"\{\s*['\"]?entity['\"]?\s*:\s*(.*?)\s*,\s*['\"]?label['\"]?\s*:\s*(.*?)\s*\}",
    re.I | re.S,
)


def _items_to_entities(items: list) -> ParsedOutput:
    out = ParsedOutput([], "")
    for item in items:
        if not isinstance(item, dict):
            out.field_errors += 1
            out.skipped.append(item)
            continue
        lowered = {k.lower(): v for k, v in item.items() if isinstance(k, str)}
        surface, label = lowered.get("entity"), lowered.get("label")
        if not isinstance(surface, str) or not isinstance(label, str) or not surface.strip():
            out.field_errors += 1
            out.skipped.append(item)
            continue
        out.entities.append(PredictedEntity(surface, label))
    return out


def _looks_like_entities(items: list) -> bool:
    return all(isinstance(x, dict) for x in items)


def parse_entity_output(raw: str) -> ParsedOutput:
    """Extract ``{Entity, Label}`` predictions from a model answer.

    Tries, in order: a JSON array; an object wrapping the array under
    ``entities``; the same in Python-literal (single-quoted) form; the first
    balanced ``[...]`` inside surrounding prose; and finally bare
    ``{Entity: x, Label: y}`` records with no quoting at all. Raises
    ParseFailure when none of these yields a list.
    """
    s = (raw or "").strip()
    if s:
        obj, pythonic = _decode(s)
        if isinstance(obj, list):
            res = _items_to_entities(obj)
            res.level = "pythonic" if pythonic else "strict"
            return res
        items = _as_entity_list(obj)
        if items is not None:
            res = _items_to_entities(items)
            res.level = "pythonic" if pythonic else "wrapped"
            return res
        for cand in _embedded_candidates(s):
            obj, _ = _decode(cand)
            if isinstance(obj, list) and _looks_like_entities(obj):
                res = _items_to_entities(obj)
                res.level = "embedded"
                return res
        pairs = _UNQUOTED.findall(s)
        if pairs:
            res = _items_to_entities(
                [{"Entity": e.strip("'\""), "Label": lab.strip("'\"")} for e, lab in pairs]
            )
            res.level = "unquoted"
            return res
    raise ParseFailure(f"no entity list found in output: {s[:80]!r}")
