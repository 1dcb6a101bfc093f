"""Offline replay of recorded server responses (``--mock-server DIR``).

A fixture directory holds up to two JSONL files:

``chat.jsonl``
    one recorded chat-completions exchange per line:
    ``{"key": sha256(last user message), "body": {...}, "status": 200, "delay_ms": 0}``.
    ``"contains": "<substring>"`` may replace ``key``; ``"key": "*"`` is a fallback.
``score.jsonl``
    same shape, keyed by sha256 of the echoed ``prompt`` (context + target).

Requests without a matching record get HTTP 404, which the client reports as a
non-retryable failure.
"""
from __future__ import annotations

import asyncio
import hashlib
import json
from pathlib import Path
from typing import Any, Iterable

import httpx

from .records import dump_line, read_jsonl


def fixture_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def chat_body(text: str, prompt_tokens: int = 0, completion_tokens: int = 0) -> dict[str, Any]:
    return {
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}],
        "usage": {"prompt_tokens": prompt_tokens, "completion_tokens": completion_tokens},
    }


def echo_body(tokens: list[str], logprobs: list[float | None]) -> dict[str, Any]:
    offsets, pos = [], 0
    for tok in tokens:
        offsets.append(pos)
        pos += len(tok)
    return {
        "object": "text_completion",
        "choices": [
            {
                "index": 0,
                "text": "".join(tokens),
                "logprobs": {"tokens": tokens, "token_logprobs": logprobs, "text_offset": offsets},
            }
        ],
    }


class _Table:
    def __init__(self, records: Iterable[dict[str, Any]]):
        self.by_key: dict[str, dict[str, Any]] = {}
        self.contains: list[dict[str, Any]] = []
        self.fallback: dict[str, Any] | None = None
        for rec in records:
            key = rec.get("key")
            if key == "*":
                self.fallback = rec
            elif key is not None:
                self.by_key[key] = rec
            elif "contains" in rec:
                self.contains.append(rec)

    def lookup(self, text: str) -> dict[str, Any] | None:
        rec = self.by_key.get(fixture_key(text))
        if rec is not None:
            return rec
        for rec in self.contains:
            if rec["contains"] in text:
                return rec
        return self.fallback


class FixtureServer:
    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        if not self.directory.is_dir():
            raise FileNotFoundError(f"mock server fixture directory not found: {self.directory}")
        self.chat = _Table(self._load("chat.jsonl"))
        self.scores = _Table(self._load("score.jsonl"))
        self.requests = 0

    def _load(self, name: str) -> list[dict[str, Any]]:
        path = self.directory / name
        if not path.exists():
            return []
        return [obj for _, obj in read_jsonl(path)]

    async def handle(self, request: httpx.Request) -> httpx.Response:
        self.requests += 1
        payload = json.loads(request.content or b"{}")
        if request.url.path.endswith("/chat/completions"):
            users = [m["content"] for m in payload.get("messages", []) if m.get("role") == "user"]
            rec = self.chat.lookup(users[-1] if users else "")
        elif request.url.path.endswith("/completions"):
            rec = self.scores.lookup(payload.get("prompt", ""))
        else:
            rec = None
        if rec is None:
            return httpx.Response(404, json={"error": "no recorded response"})
        if rec.get("delay_ms"):
            await asyncio.sleep(rec["delay_ms"] / 1000.0)
        return httpx.Response(rec.get("status", 200), json=rec.get("body", {}))

    @property
    def transport(self) -> httpx.MockTransport:
        return httpx.MockTransport(self.handle)


def write_fixture(
    directory: str | Path,
    chat: Iterable[dict[str, Any]] = (),
    score: Iterable[dict[str, Any]] = (),
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "chat.jsonl").write_bytes(b"".join(dump_line(r) for r in chat))
    (directory / "score.jsonl").write_bytes(b"".join(dump_line(r) for r in score))
    return directory
