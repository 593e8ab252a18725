"""Wire-protocol clients for VLM / solver / world-model backends.

Every backend call goes through a :class:`Transport`. ``HttpTransport`` talks
JSON over HTTP with a per-attempt deadline, bounded retries and an optional
transcript recorder; ``ReplayTransport`` serves the same calls from a
recorded transcript and never touches the network.

Chat protocol (POST ``chat_path``)::

    {"system": str, "parts": [{"type": "text", "text": str} | {"type": "image", "data": <base64 png>}],
     "options": {...}}
    -> {"text": str}

Teacher-forced log-probability protocol (POST ``logprob_path``)::

    {"prompt": str, "images": [<base64 png>, ...], "answer_text": str}
    -> {"token_logprobs": [float, ...], "answer_start": int}
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Optional, Protocol, Sequence, Union

import httpx

from .errors import (
    BackendError,
    BackendTimeout,
    CapabilityError,
    GenerationError,
    ProtocolError,
    ReplayMiss,
    TransportError,
)
from .images import ImageStore, b64encode
from .prompts import Image, Part, Text

log = logging.getLogger(__name__)

DEFAULT_RETRIES = 2


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# -- transcripts ------------------------------------------------------------


class TranscriptRecorder:
    """Appends one JSON line per backend call: {request, response, wall_ms[, error]}."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def record(self, request: dict, response: Any, wall_ms: float, error: Optional[dict] = None) -> None:
        row: dict[str, Any] = {"request": request, "response": response, "wall_ms": round(wall_ms, 3)}
        if error is not None:
            row["error"] = error
        line = json.dumps(row, sort_keys=True)
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line + "\n")


def load_transcript(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


_ERROR_TYPES: dict[str, type[BackendError]] = {
    "TransportError": TransportError,
    "BackendTimeout": BackendTimeout,
    "ProtocolError": ProtocolError,
    "GenerationError": GenerationError,
}


# -- transports -------------------------------------------------------------


class Transport(Protocol):
    def post_json(self, path: str, body: dict) -> Any: ...


class HttpTransport:
    """JSON-over-HTTP with deadline, retry with exponential backoff, and in-flight cap."""

    def __init__(
        self,
        base_url: str,
        *,
        token: Optional[str] = None,
        auth_header: str = "Authorization",
        deadline_s: float = 60.0,
        retries: int = DEFAULT_RETRIES,
        backoff_s: float = 0.5,
        limiter: Optional[threading.Semaphore] = None,
        max_in_flight: int = 4,
        recorder: Optional[TranscriptRecorder] = None,
        client: Optional[httpx.Client] = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url.rstrip("/")
        self.headers = {"Content-Type": "application/json"}
        if token:
            self.headers[auth_header] = token
        self.deadline_s = deadline_s
        self.retries = retries
        self.backoff_s = backoff_s
        self.limiter = limiter or threading.BoundedSemaphore(max_in_flight)
        self.recorder = recorder
        self._client = client or httpx.Client()
        self._sleep = sleep

    def _attempt(self, path: str, payload: bytes) -> Any:
        try:
            with self.limiter:
                resp = self._client.post(
                    self.base_url + path, content=payload, headers=self.headers, timeout=self.deadline_s
                )
        except httpx.TimeoutException as e:
            raise BackendTimeout(f"deadline of {self.deadline_s}s exceeded for {path}") from e
        except httpx.HTTPError as e:
            raise TransportError(f"{type(e).__name__} talking to {path}: {e}") from e
        if resp.status_code == 422:
            try:
                msg = resp.json().get("error", resp.text)
            except ValueError:
                msg = resp.text
            raise GenerationError(str(msg))
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code} from {path}")
        try:
            return json.loads(resp.text)
        except ValueError as e:
            raise ProtocolError(f"non-JSON body from {path}") from e

    def post_json(self, path: str, body: dict) -> Any:
        payload = json.dumps(body).encode("utf-8")
        request = {"path": path, "body": body}
        err: Optional[BackendError] = None
        t0 = time.perf_counter()
        for attempt in range(self.retries + 1):
            try:
                out = self._attempt(path, payload)
            except BackendError as e:
                err = e
                if not e.retryable or attempt == self.retries:
                    break
                log.warning("retrying %s after %s (attempt %d)", path, e, attempt + 1)
                self._sleep(self.backoff_s * 2**attempt)
            else:
                if self.recorder:
                    self.recorder.record(request, out, (time.perf_counter() - t0) * 1000)
                return out
        assert err is not None
        if self.recorder:
            self.recorder.record(
                request, None, (time.perf_counter() - t0) * 1000, {"type": type(err).__name__, "message": str(err)}
            )
        raise err


class ReplayTransport:
    """Serves recorded responses keyed by request; identical requests replay FIFO."""

    def __init__(self, rows: Iterable[dict]):
        self._queues: dict[str, deque] = defaultdict(deque)
        for row in rows:
            self._queues[canonical_json(row["request"])].append(row)
        self._lock = threading.Lock()
        self.calls = 0
        self.misses = 0

    @classmethod
    def from_file(cls, path: str | Path) -> "ReplayTransport":
        return cls(load_transcript(path))

    def post_json(self, path: str, body: dict) -> Any:
        key = canonical_json({"path": path, "body": json.loads(json.dumps(body))})
        with self._lock:
            self.calls += 1
            q = self._queues.get(key)
            if not q:
                self.misses += 1
                raise ReplayMiss(f"no recorded response for {path}")
            row = q.popleft() if len(q) > 1 else q[0]
        if row.get("error"):
            cls = _ERROR_TYPES.get(row["error"]["type"], TransportError)
            raise cls(row["error"]["message"])
        return row["response"]


class CallableTransport:
    """In-process transport around a handler ``(path, body) -> json``; used by stub servers."""

    def __init__(self, handler: Callable[[str, dict], Any], recorder: Optional[TranscriptRecorder] = None):
        self.handler = handler
        self.recorder = recorder
        self.calls = 0

    def post_json(self, path: str, body: dict) -> Any:
        self.calls += 1
        body = json.loads(json.dumps(body))
        t0 = time.perf_counter()
        try:
            out = self.handler(path, body)
        except BackendError as e:
            if self.recorder:
                self.recorder.record({"path": path, "body": body}, None, 0.0, {"type": type(e).__name__, "message": str(e)})
            raise
        out = json.loads(json.dumps(out))
        if self.recorder:
            self.recorder.record({"path": path, "body": body}, out, (time.perf_counter() - t0) * 1000)
        return out


# -- chat / logprob clients -------------------------------------------------


@dataclass(frozen=True)
class TokenLogprobs:
    token_logprobs: tuple[float, ...]
    answer_start: int


class ChatBackend(Protocol):
    def chat_with_images(self, system: str, parts: Sequence[Part], options: Optional[dict] = None) -> str: ...


class LogprobBackend(Protocol):
    supports_logprobs: bool

    def teacher_forced_logprobs(self, prompt: str, images: Sequence[str], answer_text: str) -> TokenLogprobs: ...


def check_logprobs(payload: Any) -> TokenLogprobs:
    if not isinstance(payload, dict) or "token_logprobs" not in payload or "answer_start" not in payload:
        raise ProtocolError("logprob response needs token_logprobs and answer_start")
    lps = payload["token_logprobs"]
    start = payload["answer_start"]
    if not isinstance(lps, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in lps):
        raise ProtocolError("token_logprobs must be a list of numbers")
    if any(math.isnan(x) or x == math.inf for x in lps):
        raise ProtocolError("token_logprobs may only hold finite values or -inf")
    if not isinstance(start, int) or isinstance(start, bool) or not 0 <= start < len(lps):
        raise ProtocolError(f"answer_start {start!r} outside [0, {len(lps)})")
    return TokenLogprobs(tuple(float(x) for x in lps), start)


class HttpVLMClient:
    """VLM / solver client over a :class:`Transport`; images resolved from an :class:`ImageStore`."""

    def __init__(
        self,
        transport: Transport,
        store: ImageStore,
        *,
        chat_path: str = "/v1/chat",
        logprob_path: str = "/v1/logprobs",
        supports_logprobs: bool = False,
        options: Optional[dict] = None,
    ):
        self.transport = transport
        self.store = store
        self.chat_path = chat_path
        self.logprob_path = logprob_path
        self.supports_logprobs = supports_logprobs
        self.options = dict(options or {})

    def _wire_parts(self, parts: Sequence[Part]) -> list[dict]:
        out = []
        for p in parts:
            if isinstance(p, Image):
                out.append({"type": "image", "data": b64encode(self.store.get(p.ref))})
            else:
                out.append({"type": "text", "text": p.text})
        return out

    def chat_with_images(self, system: str, parts: Sequence[Part], options: Optional[dict] = None) -> str:
        wire = self._wire_parts(parts)  # resolution errors surface before any network call
        body = {"system": system, "parts": wire, "options": {**self.options, **(options or {})}}
        resp = self.transport.post_json(self.chat_path, body)
        if not isinstance(resp, dict) or not isinstance(resp.get("text"), str):
            raise ProtocolError("chat response must be an object with a string 'text'")
        return resp["text"]

    def teacher_forced_logprobs(self, prompt: str, images: Sequence[str], answer_text: str) -> TokenLogprobs:
        if not self.supports_logprobs:
            raise CapabilityError("backend is not configured for teacher-forced log-probabilities")
        body = {
            "prompt": prompt,
            "images": [b64encode(self.store.get(r)) for r in images],
            "answer_text": answer_text,
        }
        return check_logprobs(self.transport.post_json(self.logprob_path, body))


Reply = Union[str, Exception]


class ScriptedChat:
    """Stub chat backend: replies come from a list (consumed in order) or a function.

    Makes zero network calls; ``calls`` records every (system, parts) pair.
    """

    def __init__(self, replies: Union[Sequence[Reply], Callable[[str, Sequence[Part]], str]], default: Optional[str] = None):
        self._fn = replies if callable(replies) else None
        self._queue = deque([] if callable(replies) else replies)
        self.default = default
        self.calls: list[tuple[str, list[Part]]] = []
        self._lock = threading.Lock()

    def chat_with_images(self, system: str, parts: Sequence[Part], options: Optional[dict] = None) -> str:
        with self._lock:
            self.calls.append((system, list(parts)))
            if self._fn is None:
                if self._queue:
                    reply = self._queue.popleft()
                elif self.default is not None:
                    reply = self.default
                else:
                    raise TransportError("scripted backend ran out of replies")
        if self._fn is not None:
            reply = self._fn(system, parts)
        if isinstance(reply, Exception):
            raise reply
        return reply


class StubLogprobs:
    """Stub teacher-forcing backend returning canned token log-probabilities."""

    supports_logprobs = True

    def __init__(self, fn: Callable[[str, Sequence[str], str], dict]):
        self._fn = fn
        self.calls = 0

    def teacher_forced_logprobs(self, prompt: str, images: Sequence[str], answer_text: str) -> TokenLogprobs:
        self.calls += 1
        return check_logprobs(self._fn(prompt, images, answer_text))


def text_of(parts: Sequence[Part]) -> str:
    return "\n".join(p.text for p in parts if isinstance(p, Text))


def images_of(parts: Sequence[Part]) -> list[str]:
    return [p.ref for p in parts if isinstance(p, Image)]
