"""Record types shared by every stage of the pipeline, and their JSONL carriers.

All records are frozen dataclasses. Text fields are kept verbatim: nothing here
strips, re-encodes or normalizes the prompt/plan/response strings.
"""
from __future__ import annotations

import io
import json
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import IO, Any, Iterable, Iterator, Union

Source = Union[str, os.PathLike, bytes, IO[bytes], IO[str]]


class RecordError(ValueError):
    """A malformed record. ``line`` is 1-based; ``field`` names the offending key."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


class PlanKind(str, Enum):
    CODE = "code"
    NL = "nl"
    EXEC = "exec"


class Verdict(str, Enum):
    ACCEPTED = "accepted"
    REJECTED = "rejected"


class Task(str, Enum):
    BOOLEAN = "boolean"
    COINFLIP = "coinflip"
    LASTLETTER = "lastletter"
    DYCK = "dyck"
    MULTIHOP = "multihop"
    MATH = "math"
    GENERIC = "generic"


class Mode(str, Enum):
    DIRECT = "direct"
    PS = "ps"
    CODE_PLAN = "codeplan"


@dataclass(frozen=True)
class PromptResponsePair:
    id: str
    prompt: str
    response: str
    source: str = ""
    line: int | None = field(default=None, compare=False)


@dataclass(frozen=True)
class RuleFailure:
    rule: str
    message: str
    line: int | None = None


@dataclass(frozen=True)
class FeatureCounts:
    defs: int = 0
    calls: int = 0
    if_branches: int = 0
    for_loops: int = 0
    while_loops: int = 0
    returns: int = 0

    def as_dict(self) -> dict[str, int]:
        return {
            "defs": self.defs,
            "calls": self.calls,
            "if_branches": self.if_branches,
            "for_loops": self.for_loops,
            "while_loops": self.while_loops,
            "returns": self.returns,
        }


@dataclass(frozen=True)
class ValidationReport:
    verdict: Verdict
    failures: tuple[RuleFailure, ...] = ()
    word_count: int = 0
    feature_counts: FeatureCounts = FeatureCounts()
    notes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if (self.verdict is Verdict.REJECTED) != bool(self.failures):
            raise ValueError("verdict must be rejected iff failures are present")

    @property
    def accepted(self) -> bool:
        return self.verdict is Verdict.ACCEPTED

    @property
    def rules(self) -> list[str]:
        return sorted({f.rule for f in self.failures})

    def to_json(self) -> dict[str, Any]:
        return {
            "verdict": self.verdict.value,
            "failures": [
                {"rule": f.rule, "message": f.message, "line": f.line} for f in self.failures
            ],
            "word_count": self.word_count,
            "feature_counts": self.feature_counts.as_dict(),
            "notes": list(self.notes),
        }

    @classmethod
    def from_json(cls, data: dict[str, Any]) -> ValidationReport:
        return cls(
            verdict=Verdict(data["verdict"]),
            failures=tuple(
                RuleFailure(f["rule"], f["message"], f.get("line")) for f in data.get("failures", [])
            ),
            word_count=int(data.get("word_count", 0)),
            feature_counts=FeatureCounts(**data.get("feature_counts", {})),
            notes=tuple(data.get("notes", [])),
        )


@dataclass(frozen=True)
class TrainingTriple:
    id: str
    prompt: str
    plan: str
    response: str
    plan_kind: PlanKind
    validation: ValidationReport
    meta: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class BenchmarkItem:
    id: str
    task: Task
    input: str
    gold: tuple[str, ...]
    seed: int
    hops: int | None = None
    context: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        if not self.gold or any(not g for g in self.gold):
            raise ValueError(f"item {self.id!r}: gold must be a non-empty list of non-empty strings")
        if self.seed < 0:
            raise ValueError(f"item {self.id!r}: seed must be unsigned")
        if (self.hops is not None) != (self.task is Task.MULTIHOP):
            raise ValueError(f"item {self.id!r}: hops is required for multihop items and only for them")
        if self.hops is not None and self.hops not in (2, 3, 4):
            raise ValueError(f"item {self.id!r}: hops must be 2, 3 or 4, got {self.hops}")


@dataclass(frozen=True)
class GenerationTrace:
    item_id: str
    mode: Mode
    response: str
    plan: str | None = None
    extracted_answer: str | None = None
    prompt_tokens: int = 0
    completion_tokens: int = 0
    latency_ms: float = 0.0
    flags: tuple[str, ...] = ()
    error: str | None = None

    def __post_init__(self) -> None:
        if self.latency_ms < 0:
            raise ValueError("latency_ms must be non-negative")
        if self.error is None and (self.plan is not None) != (self.mode is not Mode.DIRECT):
            raise ValueError(f"trace {self.item_id!r}: plan must be present iff mode is not direct")


@dataclass(frozen=True)
class NllReport:
    """Mean per-token NLL of planning (stage 1) and realization (stage 2)."""

    stage1: float
    stage2: float
    overall: float

    def __post_init__(self) -> None:
        for name in ("stage1", "stage2", "overall"):
            value = getattr(self, name)
            if not (value >= 0) or math.isinf(value):
                raise ValueError(f"{name} must be a finite non-negative number, got {value}")
        if abs(self.overall - (self.stage1 + self.stage2)) > 1e-9:
            raise ValueError("overall must equal stage1 + stage2")

    @classmethod
    def from_stages(cls, stage1: float, stage2: float) -> NllReport:
        return cls(stage1, stage2, stage1 + stage2)


# --------------------------------------------------------------------------- #
# line-delimited JSON plumbing
# --------------------------------------------------------------------------- #


def _iter_lines(src: Source) -> Iterator[tuple[int, str]]:
    if isinstance(src, bytes):
        stream: IO[str] = io.StringIO(src.decode("utf-8"))
        close = False
    elif isinstance(src, (str, os.PathLike)):
        stream = open(src, encoding="utf-8")
        close = True
    else:
        stream = src  # type: ignore[assignment]
        close = False
    try:
        for lineno, raw in enumerate(stream, start=1):
            if isinstance(raw, bytes):
                raw = raw.decode("utf-8")
            yield lineno, raw
    finally:
        if close:
            stream.close()


def read_jsonl(src: Source) -> Iterator[tuple[int, dict[str, Any]]]:
    """Yield ``(line number, object)`` for every non-blank line."""
    for lineno, raw in _iter_lines(src):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise RecordError(f"invalid JSON ({exc.msg})", line=lineno) from None
        if not isinstance(obj, dict):
            raise RecordError("expected a JSON object", line=lineno)
        yield lineno, obj


def dump_line(obj: dict[str, Any]) -> bytes:
    return (json.dumps(obj, ensure_ascii=False) + "\n").encode("utf-8")


def _require_str(obj: dict[str, Any], key: str, lineno: int, *, non_empty: bool = True) -> str:
    if key not in obj:
        raise RecordError(f"missing field {key!r}", line=lineno, field=key)
    value = obj[key]
    if not isinstance(value, str):
        raise RecordError(f"field {key!r} must be a string", line=lineno, field=key)
    if non_empty and not value.strip():
        raise RecordError(f"field {key!r} is empty", line=lineno, field=key)
    return value


def _default_source(src: Source) -> str:
    if isinstance(src, (str, os.PathLike)):
        return Path(src).stem
    return "corpus"


def parse_corpus_file(src: Source) -> list[PromptResponsePair]:
    """Read a prompt/response corpus, in file order.

    Missing ids are synthesized as ``<source>-<line>``; the source defaults to the
    file stem (or ``corpus`` for in-memory streams).
    """
    fallback_source = _default_source(src)
    pairs: list[PromptResponsePair] = []
    seen: dict[str, int] = {}
    for lineno, obj in read_jsonl(src):
        prompt = _require_str(obj, "prompt", lineno)
        response = _require_str(obj, "response", lineno)
        source = obj.get("source", fallback_source)
        if not isinstance(source, str):
            raise RecordError("field 'source' must be a string", line=lineno, field="source")
        rid = obj.get("id")
        if rid is None:
            rid = f"{source or fallback_source}-{lineno}"
        elif not isinstance(rid, str) or not rid:
            raise RecordError("field 'id' must be a non-empty string", line=lineno, field="id")
        if rid in seen:
            raise RecordError(
                f"duplicate id {rid!r} on lines {seen[rid]} and {lineno}", line=lineno, field="id"
            )
        seen[rid] = lineno
        pairs.append(PromptResponsePair(rid, prompt, response, source, line=lineno))
    return pairs


def serialize_pairs(pairs: Iterable[PromptResponsePair]) -> bytes:
    return b"".join(
        dump_line({"id": p.id, "prompt": p.prompt, "response": p.response, "source": p.source})
        for p in pairs
    )


def triple_to_json(t: TrainingTriple, *, include_plan: bool = True) -> dict[str, Any]:
    meta = dict(t.meta)
    meta["validation"] = t.validation.to_json()
    obj: dict[str, Any] = {"id": t.id, "prompt": t.prompt}
    if include_plan:
        obj["plan"] = t.plan
    obj["response"] = t.response
    obj["plan_kind"] = t.plan_kind.value
    obj["meta"] = meta
    return obj


def serialize_triples(triples: Iterable[TrainingTriple], *, include_plan: bool = True) -> bytes:
    """Encode accepted triples as JSONL; ``include_plan=False`` drops the plan field.

    Refuses (ValueError naming the id) any triple whose validation is not accepted.
    """
    out = []
    for t in triples:
        if not t.validation.accepted:
            raise ValueError(f"triple {t.id!r} is not validated-accepted; refusing to serialize")
        out.append(dump_line(triple_to_json(t, include_plan=include_plan)))
    return b"".join(out)


def triple_from_json(obj: dict[str, Any], lineno: int = 0) -> TrainingTriple:
    meta = obj.get("meta", {})
    if not isinstance(meta, dict):
        raise RecordError("field 'meta' must be an object", line=lineno, field="meta")
    meta = dict(meta)
    try:
        validation = ValidationReport.from_json(meta.pop("validation"))
    except (KeyError, TypeError, ValueError) as exc:
        raise RecordError(f"bad or missing meta.validation ({exc})", line=lineno, field="meta") from None
    try:
        kind = PlanKind(obj.get("plan_kind"))
    except ValueError:
        raise RecordError("field 'plan_kind' must be code, nl or exec", line=lineno, field="plan_kind") from None
    return TrainingTriple(
        id=_require_str(obj, "id", lineno),
        prompt=_require_str(obj, "prompt", lineno, non_empty=False),
        plan=_require_str(obj, "plan", lineno),
        response=_require_str(obj, "response", lineno, non_empty=False),
        plan_kind=kind,
        validation=validation,
        meta=meta,
    )


def parse_triples(src: Source) -> list[TrainingTriple]:
    return [triple_from_json(obj, lineno) for lineno, obj in read_jsonl(src)]


def item_to_json(item: BenchmarkItem) -> dict[str, Any]:
    obj: dict[str, Any] = {
        "id": item.id,
        "task": item.task.value,
        "input": item.input,
        "gold": list(item.gold),
    }
    if item.hops is not None:
        obj["hops"] = item.hops
    obj["seed"] = item.seed
    if item.context is not None:
        obj["context"] = list(item.context)
    return obj


def item_from_json(obj: dict[str, Any], lineno: int = 0) -> BenchmarkItem:
    try:
        task = Task(obj.get("task"))
    except ValueError:
        raise RecordError(f"unknown task {obj.get('task')!r}", line=lineno, field="task") from None
    gold = obj.get("gold")
    if not isinstance(gold, list) or not all(isinstance(g, str) for g in gold):
        raise RecordError("field 'gold' must be an array of strings", line=lineno, field="gold")
    context = obj.get("context")
    if context is not None and (
        not isinstance(context, list) or not all(isinstance(c, str) for c in context)
    ):
        raise RecordError("field 'context' must be an array of strings", line=lineno, field="context")
    seed = obj.get("seed", 0)
    if not isinstance(seed, int):
        raise RecordError("field 'seed' must be an integer", line=lineno, field="seed")
    hops = obj.get("hops")
    try:
        return BenchmarkItem(
            id=_require_str(obj, "id", lineno),
            task=task,
            input=_require_str(obj, "input", lineno),
            gold=tuple(gold),
            seed=seed,
            hops=hops,
            context=tuple(context) if context is not None else None,
        )
    except ValueError as exc:
        if isinstance(exc, RecordError):
            raise
        raise RecordError(str(exc), line=lineno) from None


def serialize_items(items: Iterable[BenchmarkItem]) -> bytes:
    return b"".join(dump_line(item_to_json(i)) for i in items)


def parse_items(src: Source) -> list[BenchmarkItem]:
    items = []
    seen: dict[str, int] = {}
    for lineno, obj in read_jsonl(src):
        item = item_from_json(obj, lineno)
        if item.id in seen:
            raise RecordError(
                f"duplicate id {item.id!r} on lines {seen[item.id]} and {lineno}", line=lineno, field="id"
            )
        seen[item.id] = lineno
        items.append(item)
    return items


def trace_to_json(t: GenerationTrace) -> dict[str, Any]:
    return {
        "item_id": t.item_id,
        "mode": t.mode.value,
        "plan": t.plan,
        "response": t.response,
        "extracted_answer": t.extracted_answer,
        "token_counts": {"prompt": t.prompt_tokens, "completion": t.completion_tokens},
        "latency_ms": t.latency_ms,
        "flags": list(t.flags),
        "error": t.error,
    }


def trace_from_json(obj: dict[str, Any], lineno: int = 0) -> GenerationTrace:
    counts = obj.get("token_counts") or {}
    try:
        return GenerationTrace(
            item_id=obj["item_id"],
            mode=Mode(obj["mode"]),
            response=obj.get("response", ""),
            plan=obj.get("plan"),
            extracted_answer=obj.get("extracted_answer"),
            prompt_tokens=int(counts.get("prompt", 0)),
            completion_tokens=int(counts.get("completion", 0)),
            latency_ms=float(obj.get("latency_ms", 0.0)),
            flags=tuple(obj.get("flags", ())),
            error=obj.get("error"),
        )
    except (KeyError, ValueError) as exc:
        raise RecordError(f"bad trace record ({exc})", line=lineno) from None


def serialize_traces(traces: Iterable[GenerationTrace]) -> bytes:
    return b"".join(dump_line(trace_to_json(t)) for t in traces)


def parse_traces(src: Source) -> list[GenerationTrace]:
    return [trace_from_json(obj, lineno) for lineno, obj in read_jsonl(src)]
