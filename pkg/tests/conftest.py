from __future__ import annotations

import json
from pathlib import Path
from typing import Callable

import httpx
import pytest

from plankit.client import ModelClient, ServerConfig
from plankit.mock import chat_body, echo_body
from plankit.records import FeatureCounts, PlanKind, TrainingTriple, ValidationReport, Verdict


async def no_sleep(_delay: float) -> None:
    return None


def make_client(handler: Callable[[httpx.Request], httpx.Response], **cfg) -> ModelClient:
    config = ServerConfig(base_url="http://mock/v1", **cfg)
    return ModelClient(config, transport=httpx.MockTransport(handler), api_key="k", sleep=no_sleep)


def chat_reply(text: str, status: int = 200) -> httpx.Response:
    return httpx.Response(status, json=chat_body(text, 3, 4))


def user_text(request: httpx.Request) -> str:
    payload = json.loads(request.content)
    return payload["messages"][-1]["content"]


def position_scorer(request: httpx.Request) -> httpx.Response:
    """Echo endpoint: one token per character, logprob depends only on position."""
    prompt = json.loads(request.content)["prompt"]
    tokens = list(prompt)
    return httpx.Response(200, json=echo_body(tokens, [-0.01 * (i % 7 + 1) for i in range(len(tokens))]))


def accepted_triple(id: str, prompt: str = "p q r", plan: str = "x = f(1)", response: str = "a b") -> TrainingTriple:
    report = ValidationReport(Verdict.ACCEPTED, (), len(plan.split()), FeatureCounts(calls=1))
    return TrainingTriple(id, prompt, plan, response, PlanKind.CODE, report, {})


@pytest.fixture
def plan_fixtures() -> list[dict]:
    path = Path(__file__).parent / "fixtures" / "plans.jsonl"
    return [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines() if line.strip()]


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance verdict lines, which pytest captures for passing tests."""
    lines = []
    for key in ("passed", "failed"):
        for report in terminalreporter.stats.get(key, []):
            if report.when == "call" and "test_acceptance" in report.nodeid:
                lines += [ln for ln in report.capstdout.splitlines() if ln.startswith(("PASS ", "FAIL "))]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda ln: int(ln.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
