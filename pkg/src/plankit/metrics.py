"""Answer extraction, EM/F1/accuracy, NLL decomposition, relative gains."""
from __future__ import annotations

import re
import statistics
import string
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Any, Iterable, Mapping, Sequence

from .bench import dyck_tokens
from .records import BenchmarkItem, GenerationTrace, NllReport, Task

_ARTICLES_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)
_MARKER_RE = re.compile(r"answer is", re.IGNORECASE)
_NUMBER_RE = re.compile(r"-?\d[\d,]*(?:\.\d+)?|-?\.\d+")
_YESNO_RE = re.compile(r"\b(yes|no)\b", re.IGNORECASE)
_TRAILING = ".,;:!?\"'` \t"


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and articles, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES_RE.sub(" ", text)
    return " ".join(text.split())


def _last_number(text: str) -> str | None:
    found = _NUMBER_RE.findall(text)
    if not found:
        return None
    return found[-1].replace(",", "")


def answer_extract(response: str, task: Task | str = Task.GENERIC) -> str | None:
    """Pull the final answer out of a response.

    The text after the last "answer is" wins (up to the end of that line).
    Without a marker, math falls back to the last number and coin-flip to the
    last yes/no. Math answers are reduced to their last number either way.
    """
    task = Task(task)
    answer = None
    markers = list(_MARKER_RE.finditer(response))
    if markers:
        tail = response[markers[-1].end() :].split("\n", 1)[0]
        tail = tail.lstrip(" \t:").rstrip(_TRAILING)
        answer = tail or None
    if task is Task.MATH:
        return _last_number(answer) if answer and _last_number(answer) else _last_number(response)
    if answer is None and task is Task.COINFLIP:
        found = _YESNO_RE.findall(response)
        answer = found[-1].lower() if found else None
    return answer


def _tokens(text: str) -> list[str]:
    return normalize_answer(text).split()


def exact_match(pred: str, golds: Iterable[str]) -> int:
    norm = normalize_answer(pred)
    return int(any(norm == normalize_answer(g) for g in golds))


def _f1_single(pred: str, gold: str) -> float:
    p, g = _tokens(pred), _tokens(gold)
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    overlap = sum((Counter(p) & Counter(g)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(p)
    recall = overlap / len(g)
    return 2 * precision * recall / (precision + recall)


def f1(pred: str, golds: Iterable[str]) -> float:
    return max((_f1_single(pred, g) for g in golds), default=0.0)


def _as_number(text: str) -> float | None:
    try:
        return float(text.replace(",", ""))
    except ValueError:
        return None


def is_correct(pred: str | None, item: BenchmarkItem) -> bool:
    """Task-aware correctness of an extracted answer."""
    if pred is None:
        return False
    if item.task is Task.DYCK:
        # brackets are punctuation, so QA normalization would erase the answer
        return any(dyck_tokens(pred) == dyck_tokens(g) for g in item.gold)
    if item.task is Task.MATH:
        value = _as_number(pred)
        if value is not None:
            return any(_as_number(g) is not None and abs(_as_number(g) - value) < 1e-9 for g in item.gold)
    return bool(exact_match(pred, item.gold))


# --------------------------------------------------------------------------- #
# reports
# --------------------------------------------------------------------------- #


class AlignmentError(ValueError):
    pass


@dataclass
class MetricReport:
    task: str
    n_items: int
    accuracy: float | None = None
    em: float | None = None
    f1: float | None = None
    per_hop: dict[int, dict[str, float]] | None = None
    failures: int = 0
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        obj: dict[str, Any] = {"task": self.task, "n_items": self.n_items}
        for name in ("accuracy", "em", "f1"):
            value = getattr(self, name)
            if value is not None:
                obj[name] = value
                obj[f"{name}_pct"] = pct(value)
        if self.per_hop is not None:
            obj["per_hop"] = {str(h): dict(v) for h, v in sorted(self.per_hop.items())}
        obj["failures"] = self.failures
        if self.notes:
            obj["notes"] = list(self.notes)
        return obj


def join(traces: Sequence[GenerationTrace], items: Sequence[BenchmarkItem]) -> list[tuple[GenerationTrace, BenchmarkItem]]:
    by_id = {it.id: it for it in items}
    trace_ids = {t.item_id for t in traces}
    orphans = sorted(trace_ids - by_id.keys()) + sorted(by_id.keys() - trace_ids)
    if orphans:
        raise AlignmentError(f"traces and items do not line up; orphan ids: {', '.join(orphans)}")
    return [(t, by_id[t.item_id]) for t in traces]


def _task_name(items: Sequence[BenchmarkItem]) -> str:
    tasks = sorted({it.task.value for it in items})
    return tasks[0] if len(tasks) == 1 else "+".join(tasks)


def accuracy(traces: Sequence[GenerationTrace], items: Sequence[BenchmarkItem]) -> MetricReport:
    pairs = join(traces, items)
    failures = sum(1 for t, _ in pairs if t.extracted_answer is None)
    correct = sum(1 for t, it in pairs if is_correct(t.extracted_answer, it))
    n = len(pairs)
    return MetricReport(_task_name(items), n, accuracy=correct / n if n else 0.0, failures=failures)


def _qa_scores(pairs: Sequence[tuple[GenerationTrace, BenchmarkItem]]) -> tuple[float, float]:
    if not pairs:
        return 0.0, 0.0
    ems = [exact_match(t.extracted_answer, it.gold) if t.extracted_answer is not None else 0 for t, it in pairs]
    f1s = [f1(t.extracted_answer, it.gold) if t.extracted_answer is not None else 0.0 for t, it in pairs]
    return statistics.fmean(ems), statistics.fmean(f1s)


def qa_report(traces: Sequence[GenerationTrace], items: Sequence[BenchmarkItem]) -> MetricReport:
    pairs = join(traces, items)
    em, f = _qa_scores(pairs)
    failures = sum(1 for t, _ in pairs if t.extracted_answer is None)
    return MetricReport(_task_name(items), len(pairs), em=em, f1=f, failures=failures)


def hop_stratified(traces: Sequence[GenerationTrace], items: Sequence[BenchmarkItem]) -> MetricReport:
    """EM/F1 overall and within each hop bucket (2, 3, 4); empty buckets are omitted with a note."""
    missing = [it.id for it in items if it.hops is None]
    if missing:
        raise ValueError(f"items without hop labels: {', '.join(missing)}")
    report = qa_report(traces, items)
    pairs = join(traces, items)
    report.per_hop = {}
    for hop in (2, 3, 4):
        bucket = [(t, it) for t, it in pairs if it.hops == hop]
        if not bucket:
            report.notes.append(f"hop {hop}: n=0")
            continue
        em, f = _qa_scores(bucket)
        report.per_hop[hop] = {"em": em, "f1": f, "n": len(bucket)}
    return report


def compare_hops(treatment: MetricReport, baseline: MetricReport, metric: str = "em") -> dict[int, float | None]:
    """Per-hop relative gain (percent) of ``treatment`` over ``baseline``."""
    if treatment.per_hop is None or baseline.per_hop is None:
        raise ValueError("both reports need per-hop scores")
    return {
        hop: relative_gain(baseline.per_hop[hop][metric], treatment.per_hop[hop][metric])
        for hop in sorted(treatment.per_hop.keys() & baseline.per_hop.keys())
    }


# --------------------------------------------------------------------------- #
# NLL decomposition and relative gains
# --------------------------------------------------------------------------- #


def nll_decompose(
    stage1: Sequence[tuple[str, float]] | Mapping[str, float],
    stage2: Sequence[tuple[str, float]] | Mapping[str, float],
) -> NllReport:
    """Average per-record mean NLLs of each stage; overall is their sum.

    An empty ``stage1`` means no planning stage (direct generation), scored as 0.
    """
    s1 = dict(stage1.items() if isinstance(stage1, Mapping) else stage1)
    s2 = dict(stage2.items() if isinstance(stage2, Mapping) else stage2)
    if not s2:
        raise ValueError("stage-2 scores are required")
    if s1 and s1.keys() != s2.keys():
        orphans = sorted(s1.keys() ^ s2.keys())
        raise AlignmentError(f"stage scores are not aligned by id; orphan ids: {', '.join(orphans)}")
    first = statistics.fmean(s1.values()) if s1 else 0.0
    second = statistics.fmean(s2.values())
    return NllReport.from_stages(first, second)


def pooled_nll(stage1: Iterable[tuple[float, int]], stage2: Iterable[tuple[float, int]]) -> NllReport:
    """Token-weighted variant: each stage is sum(NLL) / sum(tokens) over records."""

    def pooled(rows: Iterable[tuple[float, int]]) -> float:
        rows = list(rows)
        tokens = sum(n for _, n in rows)
        return sum(s for s, _ in rows) / tokens if tokens else 0.0

    return NllReport.from_stages(pooled(stage1), pooled(stage2))


def _round1(value: Decimal) -> float:
    return float(value.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def relative_gain(baseline: float, treatment: float) -> float | None:
    """Percent change from baseline to treatment, one decimal, half-up; None when baseline is 0."""
    base = Decimal(str(baseline))
    if base <= 0:
        return None
    return _round1((Decimal(str(treatment)) - base) / base * 100)


def format_gain(gain: float | None) -> str:
    return "N/A" if gain is None else f"{gain:+.1f}%"


def pct(fraction: float) -> float:
    """A [0, 1] score as a percentage with one decimal (half-up)."""
    return _round1(Decimal(str(fraction)) * 100)
