"""Single point of contact with a chat-completion endpoint.

Three modes:

* ``live``    — every call goes to the injected transport (HTTP in production).
* ``record``  — live, plus every call is appended to a JSONL transcript.
* ``replay``  — calls are answered from a loaded transcript by request digest;
  no transport is ever touched, so replayed runs perform zero network work.

The request digest is a SHA-256 over the canonical JSON serialisation of
(model_id, messages, temperature, max_output_tokens), making replay matching a
pure function of the request content.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

log = logging.getLogger(__name__)

TRANSCRIPT_SCHEMA_VERSION = 1


class GatewayError(RuntimeError):
    pass


class TransportError(GatewayError):
    """A transport-level failure; retryable up to the configured attempts."""


class ReplayMissError(GatewayError):
    def __init__(self, digest: str):
        super().__init__(f"no recorded response for request digest {digest}")
        self.digest = digest


class TranscriptError(GatewayError):
    pass


@dataclass(frozen=True)
class TokenUsage:
    input_tokens: int = 0
    output_tokens: int = 0

    def __add__(self, other: "TokenUsage") -> "TokenUsage":
        return TokenUsage(
            self.input_tokens + other.input_tokens,
            self.output_tokens + other.output_tokens,
        )


@dataclass(frozen=True)
class ModelRequest:
    messages: tuple[tuple[str, str], ...]
    model_id: str
    temperature: float = 0.0
    max_output_tokens: int = 4096

    def __post_init__(self) -> None:
        if not self.messages:
            raise ValueError("a request needs at least one message")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")


@dataclass(frozen=True)
class ModelResponse:
    text: str
    usage: TokenUsage
    latency_ms: int


Transport = Callable[[ModelRequest], ModelResponse]


def request_digest(req: ModelRequest) -> str:
    payload = json.dumps(
        {
            "model_id": req.model_id,
            "temperature": req.temperature,
            "max_output_tokens": req.max_output_tokens,
            "messages": [[role, text] for role, text in req.messages],
        },
        sort_keys=True,
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class TranscriptEntry:
    request: dict
    text: str
    usage: TokenUsage
    latency_ms: int


def _request_payload(req: ModelRequest) -> dict:
    return {
        "model_id": req.model_id,
        "temperature": req.temperature,
        "max_output_tokens": req.max_output_tokens,
        "messages": [[role, text] for role, text in req.messages],
    }


def load_transcript(path: str | Path) -> dict[str, TranscriptEntry]:
    """Load a JSONL transcript into a digest-keyed replay store.

    Duplicate digests keep the later entry (a warning is emitted); a corrupt
    line raises TranscriptError naming the line number.
    """
    store: dict[str, TranscriptEntry] = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            digest = record["digest"]
            usage = TokenUsage(
                int(record["usage"]["input_tokens"]),
                int(record["usage"]["output_tokens"]),
            )
            entry = TranscriptEntry(
                request=record["request"],
                text=record["response"]["text"],
                usage=usage,
                latency_ms=int(record.get("latency_ms", 0)),
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise TranscriptError(f"{path}: corrupt transcript at line {lineno}: {exc}") from exc
        if digest in store:
            log.warning("transcript %s: duplicate digest %s, later entry wins", path, digest)
        store[digest] = entry
    return store


class ModelGateway:
    """Mode-aware completion client with token accounting.

    Safe for concurrent calls: the usage ledger accumulates under a lock and
    the replay store is read-only after load.
    """

    def __init__(
        self,
        mode: str = "replay",
        transport: Transport | None = None,
        replay_store: dict[str, TranscriptEntry] | None = None,
        transcript_path: str | Path | None = None,
        model_id: str = "default-model",
        temperature: float = 0.0,
        max_output_tokens: int = 4096,
        max_attempts: int = 3,
        backoff_s: float = 0.5,
    ):
        if mode not in ("live", "record", "replay"):
            raise ValueError(f"unknown gateway mode {mode!r}")
        if mode in ("live", "record") and transport is None:
            raise ValueError(f"{mode} mode requires a transport")
        if mode == "replay" and replay_store is None:
            if transcript_path is None:
                raise ValueError("replay mode requires a replay store or transcript path")
            replay_store = load_transcript(transcript_path)
        self.mode = mode
        self.model_id = model_id
        self.temperature = temperature
        self.max_output_tokens = max_output_tokens
        self._transport = transport
        self._replay_store = replay_store or {}
        self._transcript_path = Path(transcript_path) if transcript_path else None
        self._max_attempts = max_attempts
        self._backoff_s = backoff_s
        self._lock = threading.Lock()
        self._usage = TokenUsage()
        self._latency_ms = 0
        self.call_count = 0

    @property
    def usage_total(self) -> TokenUsage:
        with self._lock:
            return self._usage

    @property
    def latency_total_ms(self) -> int:
        with self._lock:
            return self._latency_ms

    def complete(self, req: ModelRequest) -> ModelResponse:
        if self.mode == "replay":
            response = self._replay(req)
        else:
            response = self._call_transport(req)
            if self.mode == "record":
                self._record(req, response)
        with self._lock:
            self._usage = self._usage + response.usage
            self._latency_ms += response.latency_ms
            self.call_count += 1
        return response

    def ask(self, text: str, system: str | None = None) -> str:
        """Convenience single-turn completion using the gateway defaults."""
        messages: tuple[tuple[str, str], ...]
        if system is not None:
            messages = (("system", system), ("user", text))
        else:
            messages = (("user", text),)
        req = ModelRequest(
            messages=messages,
            model_id=self.model_id,
            temperature=self.temperature,
            max_output_tokens=self.max_output_tokens,
        )
        return self.complete(req).text

    def _replay(self, req: ModelRequest) -> ModelResponse:
        digest = request_digest(req)
        entry = self._replay_store.get(digest)
        if entry is None:
            raise ReplayMissError(digest)
        return ModelResponse(text=entry.text, usage=entry.usage, latency_ms=entry.latency_ms)

    def _call_transport(self, req: ModelRequest) -> ModelResponse:
        assert self._transport is not None
        last: TransportError | None = None
        for attempt in range(self._max_attempts):
            try:
                return self._transport(req)
            except TransportError as exc:
                last = exc
                if attempt + 1 < self._max_attempts:
                    delay = self._backoff_s * (2**attempt)
                    log.warning("transport failure (%s); retrying in %.1fs", exc, delay)
                    if delay:
                        time.sleep(delay)
        raise TransportError(f"transport failed after {self._max_attempts} attempts: {last}")

    def _record(self, req: ModelRequest, response: ModelResponse) -> None:
        if self._transcript_path is None:
            raise ValueError("record mode requires a transcript path")
        record = {
            "schema_version": TRANSCRIPT_SCHEMA_VERSION,
            "digest": request_digest(req),
            "request": _request_payload(req),
            "response": {"text": response.text},
            "usage": {
                "input_tokens": response.usage.input_tokens,
                "output_tokens": response.usage.output_tokens,
            },
            "latency_ms": response.latency_ms,
        }
        line = json.dumps(record, ensure_ascii=False, sort_keys=True)
        with self._lock:
            self._transcript_path.parent.mkdir(parents=True, exist_ok=True)
            with self._transcript_path.open("a", encoding="utf-8") as handle:
                handle.write(line + "\n")


class HttpTransport:
    """POSTs chat-completion requests to an OpenAI-compatible endpoint."""

    def __init__(
        self,
        endpoint: str,
        api_key: str | None = None,
        timeout_s: float = 120.0,
        session=None,
    ):
        import requests

        self.endpoint = endpoint
        self.timeout_s = timeout_s
        self._headers = {"Content-Type": "application/json"}
        if api_key:
            self._headers["Authorization"] = f"Bearer {api_key}"
        self._session = session or requests.Session()
        self._requests = requests

    def __call__(self, req: ModelRequest) -> ModelResponse:
        body = {
            "model": req.model_id,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
            "messages": [{"role": role, "content": text} for role, text in req.messages],
        }
        started = time.perf_counter()
        try:
            response = self._session.post(
                self.endpoint, json=body, headers=self._headers, timeout=self.timeout_s
            )
        except self._requests.RequestException as exc:
            raise TransportError(str(exc)) from exc
        if response.status_code >= 400:
            raise TransportError(f"endpoint returned HTTP {response.status_code}")
        latency_ms = int((time.perf_counter() - started) * 1000)
        try:
            payload = response.json()
            text = payload["choices"][0]["message"]["content"]
            usage = payload.get("usage", {})
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"unexpected endpoint payload: {exc}") from exc
        return ModelResponse(
            text=text,
            usage=TokenUsage(
                int(usage.get("prompt_tokens", 0)),
                int(usage.get("completion_tokens", 0)),
            ),
            latency_ms=latency_ms,
        )
