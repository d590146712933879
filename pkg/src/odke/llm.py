"""Chat-completion client with an HTTP provider and an offline fixture provider.

The fixture provider answers from ``<fixture_dir>/<sha256(prompt)>.json``,
so any change to prompt rendering surfaces as a missing fixture instead of
silently different output.

Environment:
    ODKE_LLM_PROVIDER     ``http`` or ``fixture``
    ODKE_LLM_ENDPOINT     OpenAI-compatible ``/chat/completions`` URL
    ODKE_LLM_API_KEY      bearer token for the HTTP provider
    ODKE_LLM_MODEL        model name sent to the HTTP provider
    ODKE_LLM_FIXTURE_DIR  directory of recorded responses
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Protocol

import httpx

from .errors import ConfigError, MissingFixture, PromptTooLong, TransportError

log = logging.getLogger(__name__)

DEFAULT_MAX_IN_FLIGHT = 8
DEFAULT_RATE_PER_MIN = 60
DEFAULT_MAX_PROMPT_CHARS = 100_000
RETRY_ATTEMPTS = 3
RETRY_BACKOFF_S = 1.0


@dataclass(frozen=True)
class LlmRequest:
    prompt: str
    role_preamble: str = ""
    max_output_chars: int = 8000
    provider_tag: str = ""
    temperature: float = 0.0

    def __post_init__(self) -> None:
        if not self.prompt:
            raise ValueError("empty prompt")
        if self.temperature != 0.0:
            raise ValueError("temperature is pinned to 0")


@dataclass(frozen=True)
class LlmResponse:
    text: str
    latency_ms: int
    provider_tag: str


class Provider(Protocol):
    tag: str

    def complete(self, request: LlmRequest) -> LlmResponse: ...


def prompt_digest(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


class FixtureProvider:
    tag = "fixture"

    def __init__(self, fixture_dir: str | Path):
        self.fixture_dir = Path(fixture_dir)
        if not self.fixture_dir.is_dir():
            raise ConfigError(f"fixture dir {self.fixture_dir} does not exist")

    def path_for(self, prompt: str) -> Path:
        return self.fixture_dir / f"{prompt_digest(prompt)}.json"

    def complete(self, request: LlmRequest) -> LlmResponse:
        path = self.path_for(request.prompt)
        try:
            record = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise MissingFixture(f"no fixture {path.name} for prompt starting {request.prompt[:60]!r}") from None
        return LlmResponse(record["text"], 0, self.tag)


class RecordingProvider:
    """Forwards to ``inner`` and stores every answer as a fixture file."""

    def __init__(self, inner: Provider, fixture_dir: str | Path, label: Callable[[str], str] | None = None):
        self.inner = inner
        self.tag = inner.tag
        self.fixture_dir = Path(fixture_dir)
        self.fixture_dir.mkdir(parents=True, exist_ok=True)
        self.label = label
        self.written: set[str] = set()

    def complete(self, request: LlmRequest) -> LlmResponse:
        response = self.inner.complete(request)
        digest = prompt_digest(request.prompt)
        record = {"text": response.text}
        if self.label is not None:
            record["label"] = self.label(request.prompt)
        (self.fixture_dir / f"{digest}.json").write_text(
            json.dumps(record, indent=2, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8")
        self.written.add(digest)
        return response


class TokenBucket:
    def __init__(self, rate_per_min: float, burst: float = 1.0,
                 clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if rate_per_min <= 0:
            raise ValueError("rate must be positive")
        self.capacity = max(1.0, burst)
        self.rate = rate_per_min / 60.0
        self.tokens = self.capacity
        self.clock = clock
        self.sleep = sleep
        self.last = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self.clock()
                self.tokens = min(self.capacity, self.tokens + (now - self.last) * self.rate)
                self.last = now
                if self.tokens >= 1.0:
                    self.tokens -= 1.0
                    return
                wait = (1.0 - self.tokens) / self.rate
            self.sleep(wait)


class HttpProvider:
    """OpenAI-compatible chat-completions provider."""

    tag = "http"

    def __init__(self, endpoint: str, api_key: str = "", model: str = "default",
                 rate_per_min: float = DEFAULT_RATE_PER_MIN, timeout: float = 60.0,
                 transport: httpx.BaseTransport | None = None,
                 bucket: TokenBucket | None = None):
        if not endpoint:
            raise ConfigError("ODKE_LLM_ENDPOINT is not set")
        self.endpoint = endpoint
        self.model = model
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = httpx.Client(timeout=timeout, headers=headers, transport=transport)
        self.bucket = bucket or TokenBucket(rate_per_min)

    def payload(self, request: LlmRequest) -> dict:
        messages = []
        if request.role_preamble:
            messages.append({"role": "system", "content": request.role_preamble})
        messages.append({"role": "user", "content": request.prompt})
        return {"model": self.model, "messages": messages, "temperature": 0}

    def complete(self, request: LlmRequest) -> LlmResponse:
        self.bucket.acquire()
        start = time.monotonic()
        try:
            resp = self._client.post(self.endpoint, json=self.payload(request))
        except httpx.HTTPError as exc:
            raise TransportError(str(exc)) from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise TransportError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise ConfigError(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            text = resp.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed completion payload: {exc}") from exc
        latency = int((time.monotonic() - start) * 1000)
        return LlmResponse(text[:request.max_output_chars], latency, self.tag)


class LlmClient:
    """Adds the in-flight cap, prompt-length guard and retries to a provider."""

    def __init__(self, provider: Provider, max_in_flight: int = DEFAULT_MAX_IN_FLIGHT,
                 max_prompt_chars: int = DEFAULT_MAX_PROMPT_CHARS,
                 attempts: int = RETRY_ATTEMPTS, backoff: float = RETRY_BACKOFF_S,
                 sleep: Callable[[float], None] = time.sleep):
        self.provider = provider
        self.max_prompt_chars = max_prompt_chars
        self.attempts = attempts
        self.backoff = backoff
        self.sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self.calls = 0
        self._count_lock = threading.Lock()

    def complete(self, request: LlmRequest) -> LlmResponse:
        if len(request.prompt) > self.max_prompt_chars:
            raise PromptTooLong(f"{len(request.prompt)} chars > {self.max_prompt_chars}")
        delay = self.backoff
        for attempt in range(1, self.attempts + 1):
            with self._slots:
                with self._count_lock:
                    self.calls += 1
                try:
                    return self.provider.complete(request)
                except TransportError as exc:
                    if attempt == self.attempts:
                        raise TransportError(f"gave up after {attempt} attempts: {exc}") from exc
                    log.warning("llm transport error (attempt %d): %s", attempt, exc)
            self.sleep(delay)
            delay *= 2
        raise AssertionError("unreachable")

    def ask(self, prompt: str, preamble: str = "") -> str:
        return self.complete(LlmRequest(prompt, role_preamble=preamble,
                                        provider_tag=self.provider.tag)).text


def provider_from_env(env: Mapping[str, str] | None = None, fixture_dir: str | Path | None = None,
                      default: str = "fixture") -> Provider:
    env = os.environ if env is None else env
    kind = env.get("ODKE_LLM_PROVIDER", default)
    if kind == "fixture":
        directory = env.get("ODKE_LLM_FIXTURE_DIR") or fixture_dir
        if not directory:
            raise ConfigError("fixture provider needs ODKE_LLM_FIXTURE_DIR")
        return FixtureProvider(directory)
    if kind == "http":
        return HttpProvider(env.get("ODKE_LLM_ENDPOINT", ""), env.get("ODKE_LLM_API_KEY", ""),
                            env.get("ODKE_LLM_MODEL", "default"))
    raise ConfigError(f"unknown provider {kind!r}")
