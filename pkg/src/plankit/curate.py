"""Plan annotation pipeline: prompt the annotator, extract, validate, filter, package."""
from __future__ import annotations

import asyncio
import logging
import re
import statistics
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Awaitable, Callable, Iterable, Sequence

from .client import AuthError, ModelClient, SamplingParams, TransportError
from .lint import LintLimits, validate_plan, word_count
from .records import (
    PlanKind,
    PromptResponsePair,
    RecordError,
    RuleFailure,
    TrainingTriple,
    ValidationReport,
    Verdict,
    read_jsonl,
    serialize_triples,
)
from .render import direct_segments, first_block, realization_segments

log = logging.getLogger(__name__)

_PLACEHOLDER_RE = re.compile(r"\{\{(Prompt|Response)\}\}")


def load_template(kind: PlanKind | str) -> str:
    kind = PlanKind(kind)
    return resources.files("plankit").joinpath(f"templates/{kind.value}.txt").read_text(encoding="utf-8")


def build_annotation_prompt(pair: PromptResponsePair, kind: PlanKind | str) -> str:
    """Fill the annotation template for ``kind``.

    Substitution is a single pass over the template, so placeholder-like text
    inside the prompt or response is carried through untouched.
    """
    try:
        kind = PlanKind(kind)
    except ValueError:
        raise ValueError(f"unknown plan kind {kind!r}") from None
    if not pair.prompt.strip() or not pair.response.strip():
        raise ValueError(f"pair {pair.id!r} has an empty prompt or response")
    values = {"Prompt": pair.prompt, "Response": pair.response}
    return _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], load_template(kind))


class EmptyPlanError(ValueError):
    pass


def extract_plan_from_completion(raw: str) -> str:
    block = first_block(raw)
    plan = block.rstrip() if block is not None else raw.strip()
    plan = plan.lstrip("\r\n")
    if not plan.strip():
        raise EmptyPlanError("empty plan")
    return plan


def default_limits(kind: PlanKind) -> LintLimits:
    if kind is PlanKind.NL:
        return LintLimits(require_def_or_statement=False, prose=True)
    return LintLimits()


@dataclass(frozen=True)
class AnnotationResult:
    pair: PromptResponsePair
    completion: str | None
    attempts: int = 1
    error: str | None = None
    status: int | None = None
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.error is None


async def _annotate_one(
    client: ModelClient, pair: PromptResponsePair, sampling: SamplingParams, kind: PlanKind
) -> AnnotationResult:
    prompt = build_annotation_prompt(pair, kind)
    meta = {
        "model": client.config.model,
        "temperature": sampling.temperature,
        "top_p": sampling.top_p,
        "max_tokens": sampling.max_tokens,
        "seed": sampling.seed,
    }
    try:
        done = await client.chat([{"role": "user", "content": prompt}], sampling)
    except AuthError:
        raise
    except TransportError as exc:
        return AnnotationResult(pair, None, exc.attempts, str(exc), exc.status, meta)
    meta["timestamp"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    return AnnotationResult(pair, done.text, done.attempts, None, None, meta)


async def annotate_batch(
    pairs: Sequence[PromptResponsePair],
    client: ModelClient,
    sampling: SamplingParams,
    kind: PlanKind | str,
    *,
    on_result: Callable[[int, AnnotationResult], Any] | None = None,
) -> list[AnnotationResult]:
    """Annotate every pair, at most ``client.config.concurrency`` requests at a time.

    Results come back in input order. Per-record transport failures are kept as
    failed results; an authentication failure cancels the whole batch.
    """
    kind = PlanKind(kind)
    gate = asyncio.Semaphore(client.config.concurrency)

    async def worker(i: int, pair: PromptResponsePair) -> AnnotationResult:
        async with gate:
            result = await _annotate_one(client, pair, sampling, kind)
        if on_result is not None:
            on_result(i, result)
        return result

    tasks = [asyncio.ensure_future(worker(i, p)) for i, p in enumerate(pairs)]
    try:
        return list(await asyncio.gather(*tasks))
    except BaseException:
        for t in tasks:
            t.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)
        raise


@dataclass(frozen=True)
class Rejection:
    id: str
    reasons: tuple[str, ...]
    plan: str | None = None
    report: ValidationReport | None = None
    error: str | None = None
    status: int | None = None

    def to_json(self) -> dict[str, Any]:
        obj: dict[str, Any] = {"id": self.id, "reasons": list(self.reasons)}
        if self.plan is not None:
            obj["plan"] = self.plan
        if self.report is not None:
            obj["validation"] = self.report.to_json()
        if self.error is not None:
            obj["error"] = self.error
            obj["status"] = self.status
        return obj


@dataclass
class FilterOutcome:
    accepted: list[TrainingTriple] = field(default_factory=list)
    rejected: list[Rejection] = field(default_factory=list)
    failed: list[Rejection] = field(default_factory=list)

    def rejected_by_rule(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for rej in self.rejected:
            for rule in rej.reasons:
                counts[rule] = counts.get(rule, 0) + 1
        return dict(sorted(counts.items()))


def check_completion(raw: str, limits: LintLimits) -> tuple[str | None, ValidationReport]:
    try:
        plan = extract_plan_from_completion(raw)
    except EmptyPlanError:
        failure = RuleFailure("R4", "empty plan")
        return None, ValidationReport(Verdict.REJECTED, (failure,))
    return plan, validate_plan(plan, limits)


def filter_records(
    results: Iterable[AnnotationResult],
    limits: LintLimits | None = None,
    kind: PlanKind | str = PlanKind.CODE,
) -> FilterOutcome:
    kind = PlanKind(kind)
    limits = limits or default_limits(kind)
    out = FilterOutcome()
    for res in results:
        if not res.ok or res.completion is None:
            out.failed.append(Rejection(res.pair.id, ("transport",), error=res.error, status=res.status))
            continue
        plan, report = check_completion(res.completion, limits)
        if report.accepted and plan is not None:
            meta = dict(res.meta)
            meta["attempts"] = res.attempts
            meta["source"] = res.pair.source
            out.accepted.append(
                TrainingTriple(res.pair.id, res.pair.prompt, plan, res.pair.response, kind, report, meta)
            )
        else:
            out.rejected.append(Rejection(res.pair.id, tuple(report.rules), plan, report))
    return out


# --------------------------------------------------------------------------- #
# optional information-gain filter
# --------------------------------------------------------------------------- #

Scorer = Callable[[str, str], Awaitable[float]]


async def info_gain(triple: TrainingTriple, scorer: Scorer | None) -> float:
    """Mean NLL of the response without the plan minus mean NLL with it.

    ``scorer(context, target)`` returns the mean per-token NLL of ``target``.
    Positive values mean the plan makes the response easier to predict.
    """
    if scorer is None:
        raise RuntimeError("information-gain filtering needs a teacher-forced scorer; disable the info-gain flag")
    without = await scorer(*direct_segments(triple.prompt, triple.response))
    with_plan = await scorer(*realization_segments(triple.prompt, triple.plan, triple.response))
    return without - with_plan


# --------------------------------------------------------------------------- #
# corpus statistics
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class CurationStats:
    n_input: int
    n_annotated: int
    n_accepted: int
    n_rejected_by_rule: dict[str, int]
    avg_prompt_words: float | None
    avg_plan_words: float | None
    avg_response_words: float | None
    n_rejected: int = 0
    n_transport_failures: int = 0

    def __post_init__(self) -> None:
        if self.n_accepted + self.n_rejected != self.n_annotated or self.n_annotated > self.n_input:
            raise ValueError("inconsistent curation counts")

    def to_json(self) -> dict[str, Any]:
        return {
            "n_input": self.n_input,
            "n_annotated": self.n_annotated,
            "n_accepted": self.n_accepted,
            "n_rejected": self.n_rejected,
            "n_transport_failures": self.n_transport_failures,
            "n_rejected_by_rule": dict(self.n_rejected_by_rule),
            "avg_prompt_words": self.avg_prompt_words,
            "avg_plan_words": self.avg_plan_words,
            "avg_response_words": self.avg_response_words,
        }

    def table(self) -> dict[str, Any]:
        """The four columns of a training-data statistics table."""
        return {
            "examples": self.n_accepted,
            "avg_prompt_length": self.avg_prompt_words,
            "avg_plan_length": self.avg_plan_words,
            "avg_response_length": self.avg_response_words,
        }


def _mean(values: list[int]) -> float | None:
    return statistics.fmean(values) if values else None


def corpus_stats(
    triples: Sequence[TrainingTriple],
    *,
    n_input: int | None = None,
    rejected_by_rule: dict[str, int] | None = None,
    n_rejected: int = 0,
    n_transport_failures: int = 0,
) -> CurationStats:
    n_accepted = len(triples)
    n_annotated = n_accepted + n_rejected
    return CurationStats(
        n_input=n_annotated + n_transport_failures if n_input is None else n_input,
        n_annotated=n_annotated,
        n_accepted=n_accepted,
        n_rejected_by_rule=dict(rejected_by_rule or {}),
        avg_prompt_words=_mean([word_count(t.prompt) for t in triples]),
        avg_plan_words=_mean([word_count(t.plan) for t in triples]),
        avg_response_words=_mean([word_count(t.response) for t in triples]),
        n_rejected=n_rejected,
        n_transport_failures=n_transport_failures,
    )


class TrainFormat(str, Enum):
    TRIPLE = "triple"
    VANILLA = "vanilla"


def emit_training_file(triples: Iterable[TrainingTriple], target: TrainFormat | str = TrainFormat.TRIPLE) -> bytes:
    """Triple format keeps prompt, plan and response as separate fields; vanilla drops the plan."""
    return serialize_triples(triples, include_plan=TrainFormat(target) is TrainFormat.TRIPLE)


# --------------------------------------------------------------------------- #
# whole run
# --------------------------------------------------------------------------- #


@dataclass
class CurationRun:
    outcome: FilterOutcome
    stats: CurationStats
    requests: int = 0


async def curate(
    pairs: Sequence[PromptResponsePair],
    client: ModelClient,
    sampling: SamplingParams,
    kind: PlanKind | str,
    *,
    limits: LintLimits | None = None,
    resample: int = 0,
    on_result: Callable[[int, AnnotationResult], Any] | None = None,
) -> CurationRun:
    """Annotate, validate and filter ``pairs``.

    ``resample`` (0 to 2) re-requests plans that failed validation; the last
    attempt decides the record's fate.
    """
    if not 0 <= resample <= 2:
        raise ValueError("resample must be between 0 and 2")
    kind = PlanKind(kind)
    limits = limits or default_limits(kind)
    before = client.requests_sent
    results = await annotate_batch(pairs, client, sampling, kind, on_result=on_result)
    for _ in range(resample):
        redo = [
            i
            for i, r in enumerate(results)
            if r.ok and r.completion is not None and not check_completion(r.completion, limits)[1].accepted
        ]
        if not redo:
            break
        again = await annotate_batch([results[i].pair for i in redo], client, sampling, kind)
        for i, res in zip(redo, again):
            if res.ok:
                results[i] = AnnotationResult(
                    res.pair, res.completion, results[i].attempts + res.attempts, None, None, res.meta
                )
    outcome = filter_records(results, limits, kind)
    stats = corpus_stats(
        outcome.accepted,
        n_input=len(pairs),
        rejected_by_rule=outcome.rejected_by_rule(),
        n_rejected=len(outcome.rejected),
        n_transport_failures=len(outcome.failed),
    )
    return CurationRun(outcome, stats, client.requests_sent - before)


def processed_ids(*paths: str | Path) -> set[str]:
    """Ids already recorded in existing output files (for ``--resume``)."""
    done: set[str] = set()
    for path in paths:
        path = Path(path)
        if not path.exists():
            continue
        for lineno, obj in read_jsonl(path):
            rid = obj.get("id")
            if not isinstance(rid, str):
                raise RecordError("record without an id in resume file", line=lineno, field="id")
            done.add(rid)
    return done
