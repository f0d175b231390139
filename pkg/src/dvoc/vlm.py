"""Provider-agnostic vision-language model client.

Requests are plain JSON over HTTP. An endpoint adapter shapes the
payload and interprets the response, so different providers plug in
without touching the retry or rate-limit logic. Credentials come from
an environment variable only; nothing here reads config files or flags.
"""
from __future__ import annotations

import base64
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Protocol

import requests

from .errors import InputError, PermanentProviderError, TransientProviderError

DEFAULT_API_KEY_ENV = "DVOC_VLM_API_KEY"

# (url, headers, json payload, timeout) -> (status code, parsed body)
Transport = Callable[[str, Mapping[str, str], dict, float], tuple[int, dict]]


@dataclass(frozen=True)
class VlmRequest:
    """One captioning request: interleaved text and image parts."""

    model: str
    text_parts: tuple[str, ...]
    image_parts: tuple[bytes, ...]
    image_mime: str = "image/jpeg"
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not self.text_parts or not self.image_parts:
            raise InputError("a captioning request needs >= 1 text and >= 1 image part")


@dataclass(frozen=True)
class VlmResponse:
    caption: str
    finish: str = "stop"
    meta: Mapping[str, Any] = field(default_factory=dict)


class VlmEndpoint(Protocol):
    url: str

    def build(self, request: VlmRequest) -> dict: ...

    def parse(self, body: dict) -> VlmResponse: ...


class JsonVlmEndpoint:
    """Default adapter speaking the toolkit's own request schema.

    Payload: {"model", "parts": [{"text": ...} | {"image": b64, "mime": ...}],
    "params": {...}}; response: {"caption": ..., "finish": ...}.
    """

    def __init__(self, url: str):
        self.url = url

    def build(self, request: VlmRequest) -> dict:
        parts: list[dict] = [{"text": t} for t in request.text_parts]
        parts.extend(
            {"image": base64.b64encode(img).decode("ascii"), "mime": request.image_mime}
            for img in request.image_parts
        )
        return {"model": request.model, "parts": parts, "params": dict(request.params)}

    def parse(self, body: dict) -> VlmResponse:
        caption = body.get("caption")
        if not isinstance(caption, str):
            raise PermanentProviderError(f"response carries no caption: {body!r}")
        return VlmResponse(caption=caption, finish=str(body.get("finish", "stop")),
                           meta=body)


@dataclass(frozen=True)
class RequestPolicy:
    """Retry and pacing behavior for captioning requests."""

    max_attempts: int = 4
    backoff_base: float = 0.5
    backoff_factor: float = 2.0
    backoff_cap: float = 8.0

    def __post_init__(self):
        if self.max_attempts < 1:
            raise InputError(f"max_attempts must be >= 1, got {self.max_attempts}")
        if self.backoff_base < 0 or self.backoff_cap < 0 or self.backoff_factor < 1:
            raise InputError("backoff parameters out of range")

    def delay(self, attempt: int) -> float:
        return min(self.backoff_cap, self.backoff_base * self.backoff_factor ** attempt)


class TokenBucket:
    """Thread-safe request pacing: `rate` tokens per second, bounded burst."""

    def __init__(self, rate: float, capacity: float = 1.0,
                 clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if rate <= 0 or capacity <= 0:
            raise InputError("rate and capacity must be positive")
        self.rate = rate
        self.capacity = capacity
        self._clock = clock
        self._sleep = sleep
        self._tokens = capacity
        self._updated = clock()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._clock()
                self._tokens = min(self.capacity, self._tokens + (now - self._updated) * self.rate)
                self._updated = now
                if self._tokens >= 1.0:
                    self._tokens -= 1.0
                    return
                wait = (1.0 - self._tokens) / self.rate
            self._sleep(wait)


def _requests_transport(url: str, headers: Mapping[str, str], payload: dict,
                        timeout: float) -> tuple[int, dict]:
    try:
        response = requests.post(url, headers=dict(headers), json=payload, timeout=timeout)
    except requests.RequestException as exc:
        raise TransientProviderError(f"transport failure: {exc}") from exc
    try:
        body = response.json()
    except ValueError:
        body = {"raw": response.text}
    return response.status_code, body


class VlmClient:
    """HTTP client bound to one endpoint adapter.

    The transport is injectable for tests; the API key is read from the
    environment at call time and sent as a bearer token when present.
    """

    def __init__(self, endpoint: VlmEndpoint, *, api_key_env: str = DEFAULT_API_KEY_ENV,
                 timeout: float = 60.0, transport: Transport | None = None,
                 rate_limiter: TokenBucket | None = None):
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.timeout = timeout
        self.transport = transport or _requests_transport
        self.rate_limiter = rate_limiter

    def _headers(self) -> dict[str, str]:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def complete(self, request: VlmRequest) -> VlmResponse:
        """One round trip; raises transient or permanent provider errors."""
        if self.rate_limiter is not None:
            self.rate_limiter.acquire()
        status, body = self.transport(self.endpoint.url, self._headers(),
                                      self.endpoint.build(request), self.timeout)
        if status == 429 or status >= 500:
            raise TransientProviderError(f"provider returned {status}: {_brief(body)}")
        if status >= 400:
            raise PermanentProviderError(f"provider returned {status}: {_brief(body)}")
        return self.endpoint.parse(body)


def _brief(body: dict) -> str:
    text = repr(body)
    return text if len(text) <= 200 else text[:197] + "..."


def complete_with_retries(client: VlmClient, request: VlmRequest,
                          policy: RequestPolicy | None = None,
                          sleep: Callable[[float], None] = time.sleep) -> VlmResponse:
    """Retry transient failures with capped exponential backoff.

    Permanent provider errors propagate immediately; the last transient
    error propagates once the attempt budget is spent.
    """
    policy = policy or RequestPolicy()
    for attempt in range(policy.max_attempts):
        try:
            return client.complete(request)
        except TransientProviderError:
            if attempt + 1 >= policy.max_attempts:
                raise
            sleep(policy.delay(attempt))
    raise AssertionError("unreachable")
