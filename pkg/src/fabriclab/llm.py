"""Chat-completion client with record/replay for offline runs.

The API key is read from an environment variable (name in ``ChatConfig``),
never from config files, and never written to logs or recordings. Every
request is hashed canonically so a recorded session can be replayed
byte-for-byte without network access.
"""

import base64
import hashlib
import io
import json
import logging
import os
import pathlib
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import requests
from PIL import Image

log = logging.getLogger("fabriclab.llm")

CHAT_PATH = "/v1/chat/completions"


class LlmError(Exception):
    pass


class AuthError(LlmError):
    """Missing key or a 401/403 from the endpoint. Never retried."""


class RateLimitedExhausted(LlmError):
    """Still rate limited after the full retry budget."""


class TransportError(LlmError):
    """Connection failures, timeouts after retries, or non-retryable 4xx/5xx."""


class MalformedResponse(LlmError):
    """The endpoint answered but not in the chat-completion shape."""


class MissingRecording(LlmError):
    """Replay transport has no entry for the request hash."""


class OversizedImage(LlmError):
    """Image exceeds the configured size cap; rejected before any send."""


class _Transient(Exception):
    """Internal: a retryable failure (429, 5xx, timeout, connection reset)."""

    def __init__(self, message: str, rate_limited: bool):
        super().__init__(message)
        self.rate_limited = rate_limited


@dataclass(frozen=True)
class ChatConfig:
    base_url: str = "https://api.openai.com"
    model: str = "gpt-4o"
    temperature: float = 0.0
    max_tokens: int = 512
    timeout_s: float = 60.0
    max_attempts: int = 5
    backoff_base_s: float = 1.0
    backoff_factor: float = 2.0
    min_interval_s: float = 0.0
    max_image_side_px: int = 2048
    api_key_env: str = "FABRICLAB_API_KEY"

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.backoff_base_s < 0 or self.backoff_factor < 1:
            raise ValueError("backoff must be non-negative with factor >= 1")
        if self.max_image_side_px < 1:
            raise ValueError("max_image_side_px must be positive")


def encode_image_png(rgb: np.ndarray) -> str:
    """uint8 HxWx3 array to a base64 PNG data URL."""
    img = Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def build_messages(
    text: str, images: Sequence[np.ndarray] = (), system: Optional[str] = None
) -> list[dict]:
    messages: list[dict] = []
    if system:
        messages.append({"role": "system", "content": system})
    if images:
        content: list[dict] = [{"type": "text", "text": text}]
        for img in images:
            content.append(
                {"type": "image_url", "image_url": {"url": encode_image_png(img)}}
            )
        messages.append({"role": "user", "content": content})
    else:
        messages.append({"role": "user", "content": text})
    return messages


def canonical_hash(body: dict) -> str:
    """Order-independent sha256 of a request body."""
    blob = json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _extract_content(response: dict) -> str:
    try:
        content = response["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise MalformedResponse(f"no message content in response: {exc}") from exc
    if not isinstance(content, str):
        raise MalformedResponse(f"content has type {type(content).__name__}, not str")
    return content


def _completion_shape(text: str, model: str) -> dict:
    return {
        "object": "chat.completion",
        "model": model,
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}}],
    }


class MockTransport:
    """Answers from a callable; used by tests and scripted oracles."""

    live = False

    def __init__(self, responder: Callable[[dict], object]):
        self._responder = responder
        self.requests: list[dict] = []

    def send(self, body: dict) -> dict:
        self.requests.append(body)
        out = self._responder(body)
        if isinstance(out, dict):
            return out
        return _completion_shape(str(out), body.get("model", "mock"))


class HttpTransport:
    """POSTs to ``{base_url}/v1/chat/completions`` with a bearer token."""

    live = True

    def __init__(self, config: ChatConfig):
        self.config = config
        key = os.environ.get(config.api_key_env, "")
        if not key:
            raise AuthError(
                f"environment variable {config.api_key_env} is not set; the API "
                "key must come from the environment"
            )
        self._headers = {"Authorization": f"Bearer {key}"}

    def send(self, body: dict) -> dict:
        url = self.config.base_url.rstrip("/") + CHAT_PATH
        try:
            resp = requests.post(
                url, json=body, headers=self._headers, timeout=self.config.timeout_s
            )
        except (requests.Timeout, requests.ConnectionError) as exc:
            raise _Transient(f"{type(exc).__name__}: {exc}", rate_limited=False)
        status = resp.status_code
        if status in (401, 403):
            raise AuthError(f"endpoint rejected credentials (HTTP {status})")
        if status == 429:
            raise _Transient("HTTP 429", rate_limited=True)
        if status >= 500:
            raise _Transient(f"HTTP {status}", rate_limited=False)
        if status >= 400:
            raise TransportError(f"HTTP {status}: {resp.text[:200]}")
        try:
            return resp.json()
        except ValueError as exc:
            raise MalformedResponse(f"response body is not JSON: {exc}") from exc


class ReplayTransport:
    """Serves previously recorded responses; raises on anything unseen."""

    live = False

    def __init__(self, path: str | pathlib.Path):
        self.path = pathlib.Path(path)
        self._responses: dict[str, dict] = {}
        if self.path.exists():
            with self.path.open() as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    entry = json.loads(line)
                    self._responses[entry["hash"]] = entry["response"]

    def __len__(self) -> int:
        return len(self._responses)

    def send(self, body: dict) -> dict:
        h = canonical_hash(body)
        if h not in self._responses:
            raise MissingRecording(
                f"no recording for request {h[:12]}... in {self.path}"
            )
        return self._responses[h]


class RecordingTransport:
    """Wraps a transport and appends each new (request, response) pair to a
    JSONL file. Repeating a recorded request reuses the stored response
    without touching the inner transport."""

    def __init__(self, inner, path: str | pathlib.Path):
        self.inner = inner
        self.live = getattr(inner, "live", False)
        self.path = pathlib.Path(path)
        self._recorded: dict[str, dict] = {}
        if self.path.exists():
            with self.path.open() as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    entry = json.loads(line)
                    self._recorded[entry["hash"]] = entry["response"]

    def send(self, body: dict) -> dict:
        h = canonical_hash(body)
        if h in self._recorded:
            return self._recorded[h]
        response = self.inner.send(body)
        self._recorded[h] = response
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a") as fh:
            fh.write(
                json.dumps({"hash": h, "request": body, "response": response}) + "\n"
            )
        return response


class _RateLimiter:
    """Process-wide minimum spacing between live requests."""

    def __init__(self):
        self._lock = threading.Lock()
        self._last = 0.0

    def wait(self, min_interval_s: float, sleep=time.sleep, now=time.monotonic) -> None:
        if min_interval_s <= 0:
            return
        with self._lock:
            gap = now() - self._last
            if gap < min_interval_s:
                sleep(min_interval_s - gap)
            self._last = now()


_rate_limiter = _RateLimiter()


@dataclass
class ChatClient:
    """Retrying chat-completion caller over a pluggable transport.

    ``sleep`` and ``rng`` exist so tests can observe the backoff schedule
    deterministically; production uses the defaults.
    """

    config: ChatConfig = field(default_factory=ChatConfig)
    transport: object = None
    sleep: Callable[[float], None] = time.sleep
    rng: np.random.Generator = None

    def __post_init__(self) -> None:
        if self.transport is None:
            self.transport = HttpTransport(self.config)
        if self.rng is None:
            self.rng = np.random.default_rng()

    def _validate_images(self, images: Sequence[np.ndarray]) -> None:
        cap = self.config.max_image_side_px
        for img in images:
            arr = np.asarray(img)
            if arr.ndim != 3 or arr.shape[2] < 3:
                raise ValueError(f"image must be HxWx3, got shape {arr.shape}")
            h, w = arr.shape[:2]
            if h > cap or w > cap:
                raise OversizedImage(f"image {w}x{h} exceeds the {cap} px side cap")

    def _backoff(self, attempt: int) -> float:
        nominal = self.config.backoff_base_s * self.config.backoff_factor ** (attempt - 1)
        return nominal * (0.5 + 0.5 * float(self.rng.random()))

    def complete(
        self,
        text: str,
        images: Sequence[np.ndarray] = (),
        system: Optional[str] = None,
        temperature: Optional[float] = None,
        max_tokens: Optional[int] = None,
    ) -> str:
        self._validate_images(images)
        body = {
            "model": self.config.model,
            "messages": build_messages(text, images, system),
            "temperature": self.config.temperature if temperature is None else temperature,
            "max_tokens": self.config.max_tokens if max_tokens is None else max_tokens,
        }
        last: _Transient | None = None
        for attempt in range(1, self.config.max_attempts + 1):
            if getattr(self.transport, "live", False):
                _rate_limiter.wait(self.config.min_interval_s)
            try:
                response = self.transport.send(body)
            except _Transient as exc:
                last = exc
                if attempt == self.config.max_attempts:
                    break
                delay = self._backoff(attempt)
                log.warning(
                    "attempt %d/%d failed (%s); retrying in %.2fs",
                    attempt,
                    self.config.max_attempts,
                    exc,
                    delay,
                )
                self.sleep(delay)
                continue
            return _extract_content(response)
        assert last is not None
        if last.rate_limited:
            raise RateLimitedExhausted(
                f"rate limited after {self.config.max_attempts} attempts"
            )
        raise TransportError(
            f"transport failed after {self.config.max_attempts} attempts: {last}"
        )


__all__ = [
    "ChatConfig",
    "ChatClient",
    "MockTransport",
    "HttpTransport",
    "ReplayTransport",
    "RecordingTransport",
    "LlmError",
    "AuthError",
    "RateLimitedExhausted",
    "TransportError",
    "MalformedResponse",
    "MissingRecording",
    "OversizedImage",
    "build_messages",
    "encode_image_png",
    "canonical_hash",
]
