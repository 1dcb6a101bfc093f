"""Few-shot inference in direct, plan-and-solve and code-plan modes, and
teacher-forced scoring of plan/response segments."""
from __future__ import annotations

import asyncio
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Sequence

from .client import AuthError, CapabilityError, ModelClient, SamplingParams, TransportError
from .metrics import answer_extract
from .records import (
    BenchmarkItem,
    GenerationTrace,
    Mode,
    RecordError,
    TrainingTriple,
    dump_line,
    read_jsonl,
    trace_from_json,
    trace_to_json,
)
from .render import plan_block, planning_segments, realization_segments, direct_segments, split_plan_response

log = logging.getLogger(__name__)

SPLIT_FAILED = "split_failed"


@dataclass(frozen=True)
class Exemplar:
    input: str
    target: str
    plan: str | None = None


@dataclass(frozen=True)
class FewShotSet:
    exemplars: tuple[Exemplar, ...]
    k: int

    def __post_init__(self) -> None:
        if self.k != len(self.exemplars):
            raise ValueError(f"k={self.k} but {len(self.exemplars)} exemplars given")

    @classmethod
    def of(cls, exemplars: Sequence[Exemplar]) -> FewShotSet:
        return cls(tuple(exemplars), len(exemplars))


def load_shots(path: str | Path, k: int, mode: Mode | str, *, k_range: tuple[int, int] = (2, 4)) -> FewShotSet:
    """Read the first ``k`` exemplars of a shots file.

    Lines carry ``input`` and ``target`` plus optional ``plan`` (code plan) and
    ``nl_plan`` (natural-language plan used in plan-and-solve mode).
    """
    lo, hi = k_range
    if not lo <= k <= hi:
        raise ValueError(f"k must be between {lo} and {hi}, got {k}")
    mode = Mode(mode)
    plan_key = {Mode.DIRECT: None, Mode.PS: "nl_plan", Mode.CODE_PLAN: "plan"}[mode]
    rows = [obj for _, obj in read_jsonl(path)]
    if len(rows) < k:
        raise ValueError(f"{path} holds {len(rows)} exemplars, {k} requested")
    shots = []
    for obj in rows[:k]:
        plan = obj.get(plan_key) if plan_key else None
        shots.append(Exemplar(obj["input"], obj["target"], plan))
    return FewShotSet.of(shots)


def item_text(item: BenchmarkItem) -> str:
    if item.context:
        passages = "\n".join(f"- {p}" for p in item.context)
        return f"Passages:\n{passages}\n\nQuestion: {item.input}"
    return item.input


def _render_example(text: str, plan: str | None, target: str | None) -> str:
    out = f"Input: {text}\nOutput:\n"
    if target is None:
        return out
    if plan is not None:
        out += plan_block(plan)
    return out + target


def assemble_fewshot(item: BenchmarkItem, shots: FewShotSet, mode: Mode | str) -> list[dict[str, str]]:
    """One user message: the exemplars in order, then the unanswered query."""
    mode = Mode(mode)
    query = item_text(item)
    parts = []
    for n, ex in enumerate(shots.exemplars, start=1):
        if ex.input == query:
            raise ValueError(f"exemplar {n} has the same input as item {item.id!r}")
        if mode is not Mode.DIRECT and not ex.plan:
            raise ValueError(f"exemplar {n} has no plan but mode {mode.value!r} needs one")
        parts.append(_render_example(ex.input, ex.plan if mode is not Mode.DIRECT else None, ex.target))
    parts.append(_render_example(query, None, None))
    return [{"role": "user", "content": "\n\n".join(parts)}]


async def generate(
    item: BenchmarkItem,
    shots: FewShotSet,
    mode: Mode | str,
    client: ModelClient,
    sampling: SamplingParams,
    *,
    two_call: bool = False,
) -> GenerationTrace:
    mode = Mode(mode)
    messages = assemble_fewshot(item, shots, mode)
    started = time.perf_counter()
    first = await client.chat(messages, sampling)
    prompt_tokens, completion_tokens = first.prompt_tokens, first.completion_tokens
    flags: tuple[str, ...] = ()
    if mode is Mode.DIRECT:
        plan, response = None, first.text
    else:
        split = split_plan_response(first.text)
        if split is None:
            plan, response, flags = first.text, "", (SPLIT_FAILED,)
        else:
            plan, response = split
        if two_call and split is not None:
            follow = [{"role": "user", "content": messages[0]["content"] + plan_block(plan)}]
            second = await client.chat(follow, sampling)
            response = second.text
            prompt_tokens += second.prompt_tokens
            completion_tokens += second.completion_tokens
            flags += ("two_call",)
    answer = answer_extract(response if response.strip() else first.text, item.task)
    return GenerationTrace(
        item_id=item.id,
        mode=mode,
        response=response,
        plan=plan,
        extracted_answer=answer,
        prompt_tokens=prompt_tokens,
        completion_tokens=completion_tokens,
        latency_ms=(time.perf_counter() - started) * 1000.0,
        flags=flags,
    )


# --------------------------------------------------------------------------- #
# teacher-forced scoring
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class ScoreRequest:
    context: str
    target: str

    def __post_init__(self) -> None:
        if not self.target:
            raise ValueError("score target must be non-empty")


@dataclass(frozen=True)
class ScoreResult:
    sum_nll: float
    n_tokens: int
    mean_nll: float

    def to_json(self) -> dict[str, Any]:
        return {"sum_nll": self.sum_nll, "n_tokens": self.n_tokens, "mean_nll": self.mean_nll}


async def score_sequence(client: ModelClient, request: ScoreRequest) -> ScoreResult:
    """Negative log-likelihood of the target tokens only, given the context."""
    scores = await client.score(request.context, request.target)
    if not scores.logprobs:
        raise CapabilityError("the server scored no target tokens")
    total = -sum(scores.logprobs)
    total = total + 0.0  # normalize -0.0
    n = len(scores.logprobs)
    return ScoreResult(total, n, total / n)


async def score_triple(client: ModelClient, triple: TrainingTriple, *, direct: bool = False) -> dict[str, Any]:
    stage1 = await score_sequence(client, ScoreRequest(*planning_segments(triple.prompt, triple.plan)))
    stage2 = await score_sequence(client, ScoreRequest(*realization_segments(triple.prompt, triple.plan, triple.response)))
    row: dict[str, Any] = {"id": triple.id, "stage1": stage1.to_json(), "stage2": stage2.to_json()}
    if direct:
        row["direct"] = (await score_sequence(client, ScoreRequest(*direct_segments(triple.prompt, triple.response)))).to_json()
    return row


async def score_triples(
    client: ModelClient, triples: Sequence[TrainingTriple], *, direct: bool = False
) -> list[dict[str, Any]]:
    gate = asyncio.Semaphore(client.config.concurrency)

    async def one(t: TrainingTriple) -> dict[str, Any]:
        async with gate:
            return await score_triple(client, t, direct=direct)

    return list(await asyncio.gather(*(one(t) for t in triples)))


# --------------------------------------------------------------------------- #
# benchmark runs
# --------------------------------------------------------------------------- #


@dataclass
class RunSummary:
    total: int
    skipped: int
    completed: int
    failures: int
    requests: int

    def to_json(self) -> dict[str, int]:
        return dict(vars(self))


def existing_traces(path: str | Path) -> dict[str, GenerationTrace]:
    path = Path(path)
    if not path.exists():
        return {}
    out = {}
    for lineno, obj in read_jsonl(path):
        trace = trace_from_json(obj, lineno)
        if trace.item_id in out:
            raise RecordError(f"duplicate trace for {trace.item_id!r}", line=lineno)
        out[trace.item_id] = trace
    return out


async def run_benchmark(
    items: Sequence[BenchmarkItem],
    shots: FewShotSet | Callable[[BenchmarkItem], FewShotSet],
    mode: Mode | str,
    client: ModelClient,
    sampling: SamplingParams,
    out_path: str | Path,
    *,
    two_call: bool = False,
) -> RunSummary:
    """Write one trace per item to ``out_path``, skipping items already traced there.

    Workers run concurrently; a single writer appends completed traces in
    completion order. Failed items get a trace with ``error`` set.
    """
    mode = Mode(mode)
    out_path = Path(out_path)
    done = existing_traces(out_path)
    todo = [it for it in items if it.id not in done]
    shots_for = shots if callable(shots) else (lambda _item: shots)
    before = client.requests_sent
    queue: asyncio.Queue[GenerationTrace | None] = asyncio.Queue()
    gate = asyncio.Semaphore(client.config.concurrency)
    failures = 0

    async def worker(item: BenchmarkItem) -> None:
        nonlocal failures
        async with gate:
            try:
                trace = await generate(item, shots_for(item), mode, client, sampling, two_call=two_call)
            except AuthError:
                raise
            except (TransportError, ValueError) as exc:
                failures += 1
                trace = GenerationTrace(item.id, mode, "", error=f"{type(exc).__name__}: {exc}")
        await queue.put(trace)

    async def writer() -> None:
        with out_path.open("ab") as fh:
            while (trace := await queue.get()) is not None:
                fh.write(dump_line(trace_to_json(trace)))
                fh.flush()

    writing = asyncio.ensure_future(writer())
    workers = [asyncio.ensure_future(worker(it)) for it in todo]
    try:
        await asyncio.gather(*workers)
    except BaseException:
        for w in workers:
            w.cancel()
        await asyncio.gather(*workers, return_exceptions=True)
        raise
    finally:
        await queue.put(None)
        await writing
    return RunSummary(len(items), len(items) - len(todo), len(todo) - failures, failures, client.requests_sent - before)
