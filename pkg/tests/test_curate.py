from __future__ import annotations

import asyncio
import json
from pathlib import Path

import httpx
import pytest

from plankit.client import ANNOTATION_SAMPLING, AuthError, backoff_delay
from plankit.curate import (
    AnnotationResult,
    EmptyPlanError,
    TrainFormat,
    annotate_batch,
    build_annotation_prompt,
    corpus_stats,
    curate,
    emit_training_file,
    extract_plan_from_completion,
    filter_records,
    info_gain,
)
from plankit.records import PlanKind, PromptResponsePair, parse_triples

from conftest import accepted_triple, chat_reply, make_client, user_text
from test_records import random_triples

FIXTURES = Path(__file__).parent / "fixtures"


def pair(i: int | str = 0, prompt: str = "P", response: str = "R") -> PromptResponsePair:
    return PromptResponsePair(f"p{i}", prompt, response)


# templates


def test_code_prompt_matches_fixture_bytes():
    rendered = build_annotation_prompt(pair(prompt="What is 2 + 3?", response="2 + 3 = 5. The answer is 5."), PlanKind.CODE)
    assert rendered.encode("utf-8") == (FIXTURES / "code_prompt_rendered.txt").read_bytes()


def test_prompt_contains_slots_and_instruction():
    text = build_annotation_prompt(pair(), "code")
    assert "Prompt:\nP\n" in text and "Response:\nR\n" in text
    assert "using a pseudo Python code" in text
    assert "less than 200 words" in text


def test_no_re_substitution():
    text = build_annotation_prompt(pair(prompt="{{Response}}", response="{{Prompt}}"), PlanKind.CODE)
    assert text.startswith("Prompt:\n{{Response}}\nResponse:\n{{Prompt}}\n")


def test_nl_and_code_differ_only_in_instruction():
    code = build_annotation_prompt(pair(), PlanKind.CODE).splitlines()
    nl = build_annotation_prompt(pair(), PlanKind.NL).splitlines()
    changed = [i for i, (a, b) in enumerate(zip(code, nl)) if a != b]
    assert len(code) == len(nl)
    assert changed and min(changed) > 4  # the Prompt/Response block is identical
    assert all("code" in code[i] and ("natural language" in nl[i] or "logic" in nl[i]) for i in changed)


def test_exec_template_wording():
    assert "into an executable Python code" in build_annotation_prompt(pair(), PlanKind.EXEC)


def test_unknown_kind():
    with pytest.raises(ValueError):
        build_annotation_prompt(pair(), "diagram")


# plan extraction


def test_extract_plan_examples():
    assert extract_plan_from_completion("```\ndef f():\n    return 1\n```") == "def f():\n    return 1"
    assert extract_plan_from_completion("def f():\n    return 1\n") == "def f():\n    return 1"
    assert extract_plan_from_completion("intro text\n```\nA\n```\n```\nB\n```") == "A"
    assert extract_plan_from_completion("```python\nx = 1\n```") == "x = 1"
    with pytest.raises(EmptyPlanError, match="empty plan"):
        extract_plan_from_completion("```\n\n```")


# annotation against scripted mocks


def test_results_in_input_order_with_out_of_order_replies():
    async def handler(request):
        text = user_text(request)
        idx = int(text.split("Prompt:\nq", 1)[1].split("\n", 1)[0])
        await asyncio.sleep((5 - idx) * 0.01)
        return chat_reply(f"x = {idx}")

    async def go():
        async with make_client(handler, concurrency=5) as client:
            pairs = [pair(i, prompt=f"q{i}") for i in range(5)]
            return await annotate_batch(pairs, client, ANNOTATION_SAMPLING, PlanKind.CODE)

    results = asyncio.run(go())
    assert [r.pair.id for r in results] == [f"p{i}" for i in range(5)]
    assert [r.completion for r in results] == [f"x = {i}" for i in range(5)]


def test_transient_failures_retried():
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        return chat_reply("", 503) if calls["n"] <= 2 else chat_reply("x = 1")

    async def go():
        async with make_client(handler, max_retries=3) as client:
            return await annotate_batch([pair()], client, ANNOTATION_SAMPLING, PlanKind.CODE)

    (result,) = asyncio.run(go())
    assert result.ok and result.attempts == 3


def test_exhausted_retries_record_status():
    def handler(request):
        return chat_reply("", 429)

    async def go():
        async with make_client(handler, max_retries=2) as client:
            return await annotate_batch([pair()], client, ANNOTATION_SAMPLING, PlanKind.CODE), client.requests_sent

    (result,), sent = asyncio.run(go())
    assert not result.ok and result.status == 429 and result.attempts == 3
    assert sent == 3


def test_transport_error_retried():
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        if calls["n"] == 1:
            raise httpx.ConnectError("refused")
        return chat_reply("x = 1")

    async def go():
        async with make_client(handler, max_retries=1) as client:
            return await annotate_batch([pair()], client, ANNOTATION_SAMPLING, PlanKind.CODE)

    (result,) = asyncio.run(go())
    assert result.ok and result.attempts == 2


def test_auth_failure_aborts():
    def handler(request):
        return chat_reply("", 401)

    async def go():
        async with make_client(handler) as client:
            return await annotate_batch([pair(i) for i in range(4)], client, ANNOTATION_SAMPLING, PlanKind.CODE)

    with pytest.raises(AuthError):
        asyncio.run(go())


def test_request_body_fields():
    seen = {}

    def handler(request):
        seen.update(json.loads(request.content))
        seen["path"] = request.url.path
        seen["auth"] = request.headers.get("authorization")
        return chat_reply("x = 1")

    async def go():
        async with make_client(handler) as client:
            await annotate_batch([pair()], client, ANNOTATION_SAMPLING, PlanKind.CODE)

    asyncio.run(go())
    assert seen["path"] == "/v1/chat/completions"
    assert seen["temperature"] == 0.7 and seen["top_p"] == 0.9
    assert seen["messages"][0]["role"] == "user"
    assert seen["auth"] == "Bearer k"


def test_backoff_bounds():
    for attempt in range(1, 10):
        lo = backoff_delay(attempt, 1.0, 60.0, rng=lambda: 0.0)
        hi = backoff_delay(attempt, 1.0, 60.0, rng=lambda: 1.0)
        assert 0 <= lo <= hi <= 60.0
        assert hi == min(60.0, 2 ** (attempt - 1))


# filtering and statistics


def test_filter_truncated_plan():
    results = [
        AnnotationResult(pair(1), "```\ndef f(a):\n    return a\n```"),
        AnnotationResult(pair(2), "```\ndef f(a):\n    return a +\n```"),
    ]
    outcome = filter_records(results)
    assert [t.id for t in outcome.accepted] == ["p1"]
    assert [r.reasons for r in outcome.rejected] == [("R3",)]
    assert outcome.accepted[0].validation.accepted


def test_filter_empty_and_all_valid():
    empty = filter_records([])
    assert empty.accepted == [] and empty.rejected == [] and empty.failed == []
    ok = filter_records([AnnotationResult(pair(i), f"y = g({i})") for i in range(3)])
    assert len(ok.accepted) == 3 and ok.rejected == []


def test_filter_transport_failure_kept():
    outcome = filter_records([AnnotationResult(pair(), None, 4, "HTTP 429", 429)])
    assert outcome.failed[0].reasons == ("transport",) and outcome.failed[0].status == 429


@pytest.mark.parametrize("without,with_plan,expected", [(0.689, 0.347, 0.342), (0.5, 0.5, 0.0), (0.5, 0.9, -0.4)])
def test_info_gain(without, with_plan, expected):
    triple = accepted_triple("t")

    async def scorer(context, target):
        return with_plan if "```" in context else without

    assert asyncio.run(info_gain(triple, scorer)) == pytest.approx(expected, abs=1e-12)


def test_info_gain_needs_scorer():
    with pytest.raises(RuntimeError, match="disable"):
        asyncio.run(info_gain(accepted_triple("t"), None))


def test_corpus_stats_examples():
    one = corpus_stats([accepted_triple("a", "w w w", "p = q(1) r", "a b c d e")])
    assert (one.avg_prompt_words, one.avg_plan_words, one.avg_response_words) == (3.0, 4.0, 5.0)
    empty = corpus_stats([])
    assert empty.n_accepted == 0 and empty.avg_plan_words is None
    two = corpus_stats([accepted_triple("a", plan="x " * 10), accepted_triple("b", plan="y " * 20)])
    assert two.avg_plan_words == 15.0


def test_emit_formats():
    t = accepted_triple("a")
    vanilla = json.loads(emit_training_file([t], TrainFormat.VANILLA))
    assert "plan" not in vanilla and vanilla["prompt"] == t.prompt and vanilla["response"] == t.response
    full = json.loads(emit_training_file([t], "triple"))
    assert {"prompt", "plan", "response"} <= full.keys()


def test_500_triples_round_trip():
    batch = random_triples(500, seed=5)
    assert parse_triples(emit_training_file(batch, TrainFormat.TRIPLE)) == batch


def test_curate_conservation_and_resample():
    calls: dict[str, int] = {}

    def handler(request):
        text = user_text(request)
        key = text.split("Prompt:\n", 1)[1].split("\n", 1)[0]
        calls[key] = calls.get(key, 0) + 1
        if key == "bad":
            return chat_reply("x = (1")
        if key == "flaky" and calls[key] == 1:
            return chat_reply("x = (1")
        if key == "down":
            return chat_reply("", 500)
        return chat_reply("x = f(1)")

    async def go(resample):
        calls.clear()
        async with make_client(handler, max_retries=0) as client:
            pairs = [pair(k, prompt=k) for k in ("good", "bad", "flaky", "down")]
            return await curate(pairs, client, ANNOTATION_SAMPLING, PlanKind.CODE, resample=resample)

    run = asyncio.run(go(0))
    s = run.stats
    assert s.n_input == s.n_accepted + s.n_rejected + s.n_transport_failures
    assert (s.n_accepted, s.n_rejected, s.n_transport_failures) == (1, 2, 1)
    assert s.n_rejected_by_rule == {"R1": 2}
    run = asyncio.run(go(1))
    assert [t.id for t in run.outcome.accepted] == ["pgood", "pflaky"]
    assert run.requests == 4 + 2
