"""HTTP client for an OpenAI-compatible model server.

Two endpoints are used:

``POST {base_url}/chat/completions``
    body ``{"model", "messages", "temperature", "top_p", "max_tokens"[, "seed"]}``;
    the text is read from ``choices[0].message.content`` and token usage from
    ``usage.prompt_tokens`` / ``usage.completion_tokens``.

``POST {base_url}/completions``
    teacher-forced scoring: body ``{"model", "prompt": context + target,
    "max_tokens": 0, "echo": true, "logprobs": 1, "temperature": 0}``; per-token
    log-probabilities are read from ``choices[0].logprobs.token_logprobs`` and
    aligned to the target with ``choices[0].logprobs.text_offset``.
"""
from __future__ import annotations

import asyncio
import logging
import os
import random
import time
from dataclasses import dataclass
from typing import Any, Awaitable, Callable

import httpx

log = logging.getLogger(__name__)

RETRYABLE_STATUS = frozenset({429}) | frozenset(range(500, 600))


@dataclass(frozen=True)
class SamplingParams:
    temperature: float = 0.7
    top_p: float = 0.9
    max_tokens: int = 1024
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


# annotation samples; evaluation decodes greedily
ANNOTATION_SAMPLING = SamplingParams()
GREEDY = SamplingParams(temperature=0.0, top_p=1.0)


@dataclass(frozen=True)
class ServerConfig:
    base_url: str = "http://localhost:8000/v1"
    model: str = "meta-llama/Meta-Llama-3-8B-Instruct"
    api_key_env: str = "MODEL_API_KEY"
    timeout: float = 120.0
    max_retries: int = 3
    concurrency: int = 8
    backoff_base: float = 1.0
    backoff_ceiling: float = 60.0

    def __post_init__(self) -> None:
        if self.concurrency < 1:
            raise ValueError("concurrency must be >= 1")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.backoff_base < 0 or self.backoff_ceiling < self.backoff_base:
            raise ValueError("need 0 <= backoff_base <= backoff_ceiling")


class TransportError(Exception):
    """A request that did not produce a usable response."""

    def __init__(self, message: str, status: int | None = None, attempts: int = 1):
        super().__init__(message)
        self.status = status
        self.attempts = attempts


class AuthError(TransportError):
    """401/403 from the server. Retrying cannot help, so callers abort the run."""


class CapabilityError(Exception):
    """The server does not offer what was asked of it (e.g. echoed logprobs)."""


@dataclass(frozen=True)
class Completion:
    text: str
    prompt_tokens: int = 0
    completion_tokens: int = 0
    attempts: int = 1
    latency_ms: float = 0.0


@dataclass(frozen=True)
class TokenScores:
    tokens: tuple[str, ...]
    logprobs: tuple[float, ...]
    attempts: int = 1


def backoff_delay(attempt: int, base: float, ceiling: float, rng: Callable[[], float] = random.random) -> float:
    """Exponential delay for the given 1-based retry, with jitter in [50%, 100%]."""
    delay = min(ceiling, base * 2 ** (attempt - 1))
    return delay * (0.5 + 0.5 * rng())


class ModelClient:
    def __init__(
        self,
        config: ServerConfig,
        *,
        transport: httpx.AsyncBaseTransport | None = None,
        api_key: str | None = None,
        sleep: Callable[[float], Awaitable[Any]] = asyncio.sleep,
    ) -> None:
        self.config = config
        key = api_key if api_key is not None else os.environ.get(config.api_key_env, "")
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._http = httpx.AsyncClient(
            base_url=config.base_url.rstrip("/") + "/",
            headers=headers,
            timeout=config.timeout,
            transport=transport,
        )
        self._sleep = sleep
        self.requests_sent = 0

    async def __aenter__(self) -> ModelClient:
        return self

    async def __aexit__(self, *exc: object) -> None:
        await self.aclose()

    async def aclose(self) -> None:
        await self._http.aclose()

    async def _post(self, path: str, body: dict[str, Any]) -> tuple[httpx.Response, int]:
        cfg = self.config
        last: TransportError | None = None
        for attempt in range(1, cfg.max_retries + 2):
            if attempt > 1:
                await self._sleep(backoff_delay(attempt - 1, cfg.backoff_base, cfg.backoff_ceiling))
            self.requests_sent += 1
            try:
                resp = await self._http.post(path, json=body)
            except httpx.TransportError as exc:
                last = TransportError(f"{type(exc).__name__}: {exc}", None, attempt)
                log.debug("attempt %d to %s failed: %s", attempt, path, exc)
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f"authentication rejected by {resp.url} ({resp.status_code})", resp.status_code, attempt)
            if resp.status_code in RETRYABLE_STATUS:
                last = TransportError(f"HTTP {resp.status_code} from {path}", resp.status_code, attempt)
                log.debug("attempt %d to %s got %d", attempt, path, resp.status_code)
                continue
            return resp, attempt
        assert last is not None
        last.attempts = cfg.max_retries + 1
        raise last

    async def chat(self, messages: list[dict[str, str]], sampling: SamplingParams) -> Completion:
        body: dict[str, Any] = {
            "model": self.config.model,
            "messages": messages,
            "temperature": sampling.temperature,
            "top_p": sampling.top_p,
            "max_tokens": sampling.max_tokens,
        }
        if sampling.seed is not None:
            body["seed"] = sampling.seed
        started = time.perf_counter()
        resp, attempts = await self._post("chat/completions", body)
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code} from chat/completions", resp.status_code, attempts)
        try:
            data = resp.json()
            text = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"malformed chat completion ({exc!r})", resp.status_code, attempts) from None
        usage = data.get("usage") or {}
        return Completion(
            text=text or "",
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
            attempts=attempts,
            latency_ms=(time.perf_counter() - started) * 1000.0,
        )

    async def score(self, context: str, target: str) -> TokenScores:
        """Log-probabilities of the tokens of ``target`` given ``context``."""
        body = {
            "model": self.config.model,
            "prompt": context + target,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 1,
            "temperature": 0,
        }
        endpoint = str(self._http.base_url.join("completions"))
        resp, attempts = await self._post("completions", body)
        if resp.status_code in (400, 404, 405, 422, 501):
            raise CapabilityError(f"{endpoint} rejected an echo+logprobs request (HTTP {resp.status_code})")
        if resp.status_code >= 400:
            raise TransportError(f"HTTP {resp.status_code} from completions", resp.status_code, attempts)
        try:
            lp = resp.json()["choices"][0]["logprobs"]
            tokens = lp["tokens"]
            values = lp["token_logprobs"]
            offsets = lp["text_offset"]
        except (ValueError, KeyError, IndexError, TypeError):
            raise CapabilityError(f"{endpoint} returned no echoed token logprobs") from None
        boundary = len(context)
        picked_tokens, picked = [], []
        for tok, value, off in zip(tokens, values, offsets):
            if off + len(tok) <= boundary or value is None:
                continue
            picked_tokens.append(tok)
            picked.append(float(value))
        return TokenScores(tuple(picked_tokens), tuple(picked), attempts)
