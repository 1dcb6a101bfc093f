from __future__ import annotations

import asyncio
import json

import httpx
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plankit.client import GREEDY, CapabilityError
from plankit.mock import echo_body
from plankit.records import BenchmarkItem, Mode, Task, parse_traces
from plankit.render import render_plan_response, split_plan_response
from plankit.runner import (
    SPLIT_FAILED,
    Exemplar,
    FewShotSet,
    ScoreRequest,
    assemble_fewshot,
    generate,
    load_shots,
    run_benchmark,
    score_sequence,
    score_triples,
)

from conftest import accepted_triple, chat_reply, make_client, position_scorer, user_text

ITEM = BenchmarkItem("q", Task.LASTLETTER, 'Take the last letters of the words in "Ofe Aliza" and concatenate them.', ("ea",), 0)
SHOTS = FewShotSet.of(
    [
        Exemplar("in one", "The answer is a.", "x = one()"),
        Exemplar("in two", "The answer is b.", "y = two()"),
    ]
)


def run_gen(text: str, mode: Mode, item: BenchmarkItem = ITEM):
    async def go():
        async with make_client(lambda r: chat_reply(text)) as client:
            return await generate(item, SHOTS, mode, client, GREEDY)

    return asyncio.run(go())


# prompt assembly


def test_direct_prompt_has_two_examples_then_query():
    (msg,) = assemble_fewshot(ITEM, SHOTS, Mode.DIRECT)
    content = msg["content"]
    assert content.count("Output:") == 3
    assert content.index("in one") < content.index("in two") < content.index("Ofe Aliza")
    assert "```" not in content
    assert content.endswith("Output:\n")


def test_plan_prompt_has_plan_blocks():
    content = assemble_fewshot(ITEM, SHOTS, Mode.CODE_PLAN)[0]["content"]
    assert "```\nx = one()\n```\nThe answer is a." in content


def test_plan_mode_needs_plans():
    shots = FewShotSet.of([Exemplar("a", "t"), Exemplar("b", "t", "p")])
    with pytest.raises(ValueError):
        assemble_fewshot(ITEM, shots, Mode.CODE_PLAN)
    assemble_fewshot(ITEM, shots, Mode.DIRECT)


def test_exemplar_equal_to_query_rejected():
    shots = FewShotSet.of([Exemplar(ITEM.input, "t", "p"), Exemplar("b", "t", "p")])
    with pytest.raises(ValueError):
        assemble_fewshot(ITEM, shots, Mode.DIRECT)


def test_prompt_deterministic():
    assert assemble_fewshot(ITEM, SHOTS, Mode.PS) == assemble_fewshot(ITEM, SHOTS, Mode.PS)


def test_fewshot_k_invariant():
    with pytest.raises(ValueError):
        FewShotSet(SHOTS.exemplars, 3)


@pytest.mark.parametrize("task", ["coinflip", "lastletter", "boolean", "dyck", "multihop", "math"])
def test_packaged_shots_load(task):
    from plankit.cli import packaged_shots

    for mode in Mode:
        shots = load_shots(packaged_shots(Task(task)), 4, mode)
        assert shots.k == 4
        assert load_shots(packaged_shots(Task(task)), 2, mode).k == 2
    with pytest.raises(ValueError):
        load_shots(packaged_shots(Task(task)), 5, Mode.DIRECT)


# generation


def test_plan_mode_split():
    trace = run_gen("```\nplan\n```\nanswer text", Mode.CODE_PLAN)
    assert (trace.plan, trace.response) == ("plan", "answer text")


def test_direct_whole_response():
    trace = run_gen("answer", Mode.DIRECT)
    assert trace.response == "answer" and trace.plan is None


def test_split_failed_flag():
    trace = run_gen("no fence here. The answer is ea.", Mode.CODE_PLAN)
    assert SPLIT_FAILED in trace.flags
    assert trace.plan == "no fence here. The answer is ea."
    assert trace.extracted_answer == "ea"


def test_answer_extracted():
    trace = run_gen("```\nx = f()\n```\nThe answer is ea.", Mode.PS)
    assert trace.extracted_answer == "ea"
    assert trace.prompt_tokens == 3 and trace.completion_tokens == 4


def test_two_call_mode():
    seen = []

    def handler(request):
        seen.append(user_text(request))
        return chat_reply("```\nP\n```\nfirst" if len(seen) == 1 else "second. The answer is ea.")

    async def go():
        async with make_client(handler) as client:
            return await generate(ITEM, SHOTS, Mode.CODE_PLAN, client, GREEDY, two_call=True)

    trace = asyncio.run(go())
    assert trace.plan == "P" and trace.response == "second. The answer is ea."
    assert seen[1].endswith("Output:\n```\nP\n```\n")


fence_free = st.text(max_size=60).filter(lambda s: "```" not in s)


@settings(max_examples=300, deadline=None)
@given(fence_free, fence_free)
def test_split_inverse(plan, response):
    assert split_plan_response(render_plan_response(plan, response)) == (plan, response)


# scoring


def scorer_with(values):
    def handler(request):
        prompt = json.loads(request.content)["prompt"]
        n = len(values)
        context = prompt[: len(prompt) - n]
        return httpx.Response(200, json=echo_body([context, *prompt[len(context) :]], [None, *values]))

    return handler


def score(values, context="ctx ", target=None):
    target = target if target is not None else "t" * len(values)

    async def go():
        async with make_client(scorer_with(values)) as client:
            return await score_sequence(client, ScoreRequest(context, target))

    return asyncio.run(go())


def test_score_examples():
    r = score([-0.5, -0.5])
    assert (r.sum_nll, r.n_tokens, r.mean_nll) == (1.0, 2, 0.5)
    r = score([0.0])
    assert (r.sum_nll, r.mean_nll) == (0.0, 0.0)
    r = score([-0.237] * 3)
    assert r.mean_nll == pytest.approx(0.237, abs=1e-12)


def test_empty_target_rejected():
    with pytest.raises(ValueError):
        ScoreRequest("c", "")


def test_capability_error_names_endpoint():
    async def go():
        async with make_client(lambda r: httpx.Response(404, json={})) as client:
            return await score_sequence(client, ScoreRequest("c", "t"))

    with pytest.raises(CapabilityError, match="http://mock/v1/completions"):
        asyncio.run(go())

    async def no_logprobs():
        async with make_client(lambda r: httpx.Response(200, json={"choices": [{"text": ""}]})) as client:
            return await score_sequence(client, ScoreRequest("c", "t"))

    with pytest.raises(CapabilityError):
        asyncio.run(no_logprobs())


@settings(max_examples=100, deadline=None)
@given(st.text(min_size=0, max_size=20), st.text(min_size=1, max_size=20), st.text(min_size=1, max_size=20))
def test_additivity(c, a, b):
    async def go():
        async with make_client(position_scorer) as client:
            whole = await score_sequence(client, ScoreRequest(c, a + b))
            first = await score_sequence(client, ScoreRequest(c, a))
            second = await score_sequence(client, ScoreRequest(c + a, b))
            return whole, first, second

    whole, first, second = asyncio.run(go())
    assert whole.sum_nll == pytest.approx(first.sum_nll + second.sum_nll, abs=1e-9)
    assert whole.n_tokens == first.n_tokens + second.n_tokens


def test_score_triples_rows():
    async def go():
        async with make_client(position_scorer) as client:
            return await score_triples(client, [accepted_triple("a"), accepted_triple("b")], direct=True)

    rows = asyncio.run(go())
    assert [r["id"] for r in rows] == ["a", "b"]
    assert {"stage1", "stage2", "direct"} <= rows[0].keys()
    assert rows[0]["stage2"]["n_tokens"] == len("a b")


# benchmark runs


def items(n=5):
    return [BenchmarkItem(f"i{k}", Task.LASTLETTER, f"words {k}", ("ab",), 0) for k in range(n)]


def counting_handler(fail_on: str | None = None):
    calls = {"n": 0}

    def handler(request):
        calls["n"] += 1
        if fail_on and f"words {fail_on[1:]}" in user_text(request).rsplit("Input:", 1)[1]:
            return chat_reply("", 500)
        return chat_reply("```\nx = f()\n```\nThe answer is ab.")

    return handler, calls


def test_run_benchmark_writes_all(tmp_path):
    handler, calls = counting_handler()
    out = tmp_path / "traces.jsonl"

    async def go():
        async with make_client(handler) as client:
            return await run_benchmark(items(), SHOTS, Mode.CODE_PLAN, client, GREEDY, out)

    summary = asyncio.run(go())
    assert summary.completed == 5 and summary.failures == 0 and calls["n"] == 5
    assert sorted(t.item_id for t in parse_traces(out)) == [f"i{k}" for k in range(5)]


def test_run_benchmark_resume(tmp_path):
    out = tmp_path / "traces.jsonl"
    handler, calls = counting_handler()

    async def go(subset):
        async with make_client(handler) as client:
            return await run_benchmark(subset, SHOTS, Mode.CODE_PLAN, client, GREEDY, out)

    asyncio.run(go(items()[:3]))
    before = out.read_bytes()
    calls["n"] = 0
    summary = asyncio.run(go(items()))
    assert calls["n"] == 2 and summary.requests == 2 and summary.skipped == 3
    assert out.read_bytes().startswith(before)
    assert len(parse_traces(out)) == 5


def test_run_benchmark_failure_recorded(tmp_path):
    out = tmp_path / "traces.jsonl"
    handler, _ = counting_handler(fail_on="i2")

    async def go():
        async with make_client(handler, max_retries=1) as client:
            return await run_benchmark(items(), SHOTS, Mode.CODE_PLAN, client, GREEDY, out)

    summary = asyncio.run(go())
    traces = {t.item_id: t for t in parse_traces(out)}
    assert summary.completed == 4 and summary.failures == 1
    assert traces["i2"].error and all(traces[f"i{k}"].error is None for k in (0, 1, 3, 4))
