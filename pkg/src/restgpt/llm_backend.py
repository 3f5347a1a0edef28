"""Completion backends: live OpenAI-compatible HTTP, replay cache, scripted stub.

Every backend exposes one method, ``complete(request) -> CompletionResult``.
Requests are digested over their semantically relevant fields (messages,
model name, temperature, output-token cap), which makes record/replay exact:
a fully populated replay cache turns the whole pipeline deterministic.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import requests

logger = logging.getLogger(__name__)

API_KEY_ENV = "RESTGPT_API_KEY"
DEFAULT_BASE_URL = "https://api.openai.com"
DEFAULT_MODEL = "gpt-3.5-turbo"
DEFAULT_MAX_IN_FLIGHT = 4
DEFAULT_MAX_ATTEMPTS = 5
DEFAULT_BACKOFF_BASE = 0.5  # seconds
DEFAULT_BACKOFF_FACTOR = 2.0
DEFAULT_BACKOFF_JITTER = 0.2  # +/- fraction of the delay


class BackendError(Exception):
    """A completion could not be produced."""


class CacheMissError(BackendError):
    """Strict replay was asked for a request that was never recorded."""


class ReplayCacheError(Exception):
    """The replay cache file is unreadable or corrupt."""


@dataclass(frozen=True)
class ChatMessage:
    role: str  # system | user | assistant
    content: str


@dataclass(frozen=True)
class RequestTag:
    """Descriptor identity plus rule kind, for logging and audit trails."""

    service: str
    path: str
    method: str
    parameter: str
    rule_kind: str

    def as_dict(self) -> dict[str, str]:
        return {"service": self.service, "path": self.path, "method": self.method,
                "parameter": self.parameter, "rule_kind": self.rule_kind}


@dataclass(frozen=True)
class CompletionRequest:
    messages: tuple[ChatMessage, ...]
    model_name: str = DEFAULT_MODEL
    temperature: float = 0.0
    max_output_tokens: int = 512
    request_tag: RequestTag | None = None

    def __post_init__(self):
        if not self.messages:
            raise ValueError("messages must be non-empty")
        if not 0.0 <= self.temperature <= 2.0:
            raise ValueError(f"temperature must be in [0, 2], got {self.temperature}")
        object.__setattr__(self, "messages", tuple(self.messages))


@dataclass(frozen=True)
class Usage:
    prompt_units: int
    output_units: int


@dataclass(frozen=True)
class CompletionResult:
    text: str
    finish_reason: str
    usage: Usage
    backend_kind: str  # live | replay | scripted
    latency_ms: float


def canonical_request(request: CompletionRequest) -> dict:
    """The digest-relevant view of a request (tags and timing excluded)."""
    return {
        "messages": [{"role": m.role, "content": m.content} for m in request.messages],
        "model_name": request.model_name,
        "temperature": request.temperature,
        "max_output_tokens": request.max_output_tokens,
    }


def cache_key(request: CompletionRequest) -> str:
    """Platform-stable digest of a request's canonical serialization."""
    payload = json.dumps(canonical_request(request), sort_keys=True,
                         separators=(",", ":"), ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _result_to_json(result: CompletionResult) -> dict:
    return {
        "text": result.text,
        "finish_reason": result.finish_reason,
        "usage": {"prompt_units": result.usage.prompt_units,
                  "output_units": result.usage.output_units},
        "backend_kind": result.backend_kind,
        "latency_ms": result.latency_ms,
    }


def _result_from_json(data: dict) -> CompletionResult:
    usage = data.get("usage") or {}
    return CompletionResult(
        text=data["text"],
        finish_reason=data.get("finish_reason", "stop"),
        usage=Usage(int(usage.get("prompt_units", 0)), int(usage.get("output_units", 0))),
        backend_kind=data.get("backend_kind", "live"),
        latency_ms=float(data.get("latency_ms", 0.0)),
    )


class ReplayCache:
    """JSONL-backed request/result store; one record per exchange.

    Record shape: {"digest": ..., "request": <canonical>, "result": ...}.
    Writes are appended under a lock; loading a corrupt file names the
    offending line.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._records: dict[str, CompletionResult] = {}
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path: str | Path) -> "ReplayCache":
        cache = cls(path)
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                    digest = record["digest"]
                    result = _result_from_json(record["result"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                    raise ReplayCacheError(
                        f"{path}: corrupt cache record at line {lineno}: {exc}") from exc
                cache._records[digest] = result
        return cache

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, digest: str) -> bool:
        return digest in self._records

    def get(self, digest: str) -> CompletionResult | None:
        return self._records.get(digest)

    def put(self, request: CompletionRequest, result: CompletionResult) -> str:
        digest = cache_key(request)
        record = {"digest": digest, "request": canonical_request(request),
                  "result": _result_to_json(result)}
        with self._lock:
            self._records[digest] = result
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")
        return digest


def _estimate_units(text: str) -> int:
    # Model-agnostic size estimate: ~4 characters per token.
    return max(1, len(text) // 4)


class ScriptedBackend:
    """Returns programmed responses in call order; ideal for tests.

    With ``default`` set, the backend keeps answering that text after the
    programmed responses run out (or when none were programmed at all).
    """

    kind = "scripted"

    def __init__(self, responses: Sequence[str] = (), default: str | None = None):
        self._responses = list(responses)
        self._default = default
        self._lock = threading.Lock()
        self.requests: list[CompletionRequest] = []

    @property
    def call_count(self) -> int:
        return len(self.requests)

    def complete(self, request: CompletionRequest) -> CompletionResult:
        with self._lock:
            self.requests.append(request)
            if self._responses:
                text = self._responses.pop(0)
            elif self._default is not None:
                text = self._default
            else:
                raise BackendError("scripted backend ran out of programmed responses")
        prompt_units = sum(_estimate_units(m.content) for m in request.messages)
        return CompletionResult(
            text=text,
            finish_reason="stop",
            usage=Usage(prompt_units, _estimate_units(text)),
            backend_kind=self.kind,
            latency_ms=0.0,
        )


class ReplayBackend:
    """Serves previously recorded completions; a miss is an error (strict)."""

    kind = "replay"

    def __init__(self, cache: ReplayCache):
        self._cache = cache

    def complete(self, request: CompletionRequest) -> CompletionResult:
        digest = cache_key(request)
        stored = self._cache.get(digest)
        if stored is None:
            tag = request.request_tag.as_dict() if request.request_tag else {}
            raise CacheMissError(
                f"no recorded completion for digest {digest[:12]}… (tag: {tag})")
        return CompletionResult(
            text=stored.text,
            finish_reason=stored.finish_reason,
            usage=stored.usage,
            backend_kind=self.kind,
            latency_ms=stored.latency_ms,
        )


class RecordingBackend:
    """Memoizing wrapper: cache hit short-circuits, miss calls upstream and records."""

    kind = "record"

    def __init__(self, upstream, cache: ReplayCache):
        self._upstream = upstream
        self._cache = cache
        self._lock = threading.Lock()
        self.upstream_calls = 0

    def complete(self, request: CompletionRequest) -> CompletionResult:
        digest = cache_key(request)
        stored = self._cache.get(digest)
        if stored is not None:
            return stored
        result = self._upstream.complete(request)
        with self._lock:
            self.upstream_calls += 1
        self._cache.put(request, result)
        return result


class LiveBackend:
    """OpenAI-compatible chat-completions client with retry and backoff.

    Transient failures (HTTP 429, 5xx, timeouts, connection drops) are
    retried with exponential backoff and jitter up to ``max_attempts``; other
    HTTP errors fail immediately. At most ``max_in_flight`` requests run
    concurrently. The API key comes from the RESTGPT_API_KEY environment
    variable unless provided explicitly.
    """

    kind = "live"

    def __init__(
        self,
        base_url: str = DEFAULT_BASE_URL,
        api_key: str | None = None,
        session: requests.Session | None = None,
        timeout: float = 60.0,
        max_attempts: int = DEFAULT_MAX_ATTEMPTS,
        backoff_base: float = DEFAULT_BACKOFF_BASE,
        backoff_factor: float = DEFAULT_BACKOFF_FACTOR,
        backoff_jitter: float = DEFAULT_BACKOFF_JITTER,
        max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
        sleeper: Callable[[float], None] = time.sleep,
        rng: random.Random | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self._api_key = api_key
        self._session = session or requests.Session()
        self._timeout = timeout
        self._max_attempts = max(1, max_attempts)
        self._backoff_base = backoff_base
        self._backoff_factor = backoff_factor
        self._backoff_jitter = backoff_jitter
        self._sleeper = sleeper
        self._rng = rng or random.Random()
        self._gate = threading.BoundedSemaphore(max(1, max_in_flight))

    def _delay(self, retry_index: int) -> float:
        base = self._backoff_base * (self._backoff_factor ** retry_index)
        spread = self._backoff_jitter * base
        return max(0.0, base + self._rng.uniform(-spread, spread))

    def complete(self, request: CompletionRequest) -> CompletionResult:
        api_key = self._api_key or os.environ.get(API_KEY_ENV)
        if not api_key:
            raise BackendError(
                f"no API key: set {API_KEY_ENV} or pass api_key explicitly")
        url = f"{self.base_url}/v1/chat/completions"
        payload = {
            "model": request.model_name,
            "messages": [{"role": m.role, "content": m.content}
                         for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        }
        headers = {"Authorization": f"Bearer {api_key}",
                   "Content-Type": "application/json"}

        last_error = "unknown"
        with self._gate:
            for attempt in range(self._max_attempts):
                if attempt:
                    delay = self._delay(attempt - 1)
                    logger.warning("retrying completion (attempt %d/%d) in %.2fs: %s",
                                   attempt + 1, self._max_attempts, delay, last_error)
                    self._sleeper(delay)
                started = time.monotonic()
                try:
                    response = self._session.post(url, json=payload, headers=headers,
                                                  timeout=self._timeout)
                except (requests.Timeout, requests.ConnectionError) as exc:
                    last_error = f"transport error: {exc}"
                    continue
                latency_ms = (time.monotonic() - started) * 1000.0
                if response.status_code == 429 or response.status_code >= 500:
                    last_error = f"HTTP {response.status_code}"
                    continue
                if response.status_code != 200:
                    raise BackendError(
                        f"completion endpoint returned HTTP {response.status_code}: "
                        f"{getattr(response, 'text', '')[:200]}")
                return self._parse_response(response, latency_ms)
        raise BackendError(
            f"completion failed after {self._max_attempts} attempts; last error: {last_error}")

    def _parse_response(self, response, latency_ms: float) -> CompletionResult:
        try:
            body = response.json()
            choice = body["choices"][0]
            text = choice["message"]["content"]
            finish_reason = choice.get("finish_reason", "stop")
            usage = body.get("usage") or {}
            prompt_units = int(usage.get("prompt_tokens", 0))
            output_units = int(usage.get("completion_tokens", 0))
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise BackendError(f"malformed endpoint response: {exc}") from exc
        if text is None:
            raise BackendError("malformed endpoint response: empty message content")
        return CompletionResult(
            text=text,
            finish_reason=finish_reason,
            usage=Usage(prompt_units, output_units),
            backend_kind=self.kind,
            latency_ms=latency_ms,
        )
