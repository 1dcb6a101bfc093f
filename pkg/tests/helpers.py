"""Builders for recorded mock-server fixture directories used by CLI-level tests."""
from __future__ import annotations

import json
from pathlib import Path

from plankit.curate import build_annotation_prompt
from plankit.mock import chat_body, echo_body, fixture_key, write_fixture
from plankit.records import PlanKind, PromptResponsePair, TrainingTriple
from plankit.render import direct_segments, planning_segments, realization_segments


def write_pairs(path: Path, n: int) -> list[PromptResponsePair]:
    pairs = [PromptResponsePair(f"ex-{i:03d}", f"Question {i}: what is {i} + {i}?", f"{i} + {i} = {2 * i}. The answer is {2 * i}.") for i in range(n)]
    path.write_text("".join(json.dumps({"id": p.id, "prompt": p.prompt, "response": p.response}) + "\n" for p in pairs))
    return pairs


def plan_for(i: int) -> str:
    if i % 10 == 3:
        return f"def add():\n    return add_numbers({i}, {i}"  # truncated: R1
    return f"def add():\n    total = add_numbers({i}, {i})\n    return total"


def curate_fixture(directory: Path, pairs: list[PromptResponsePair], kind: PlanKind = PlanKind.CODE) -> Path:
    """One recorded reply per pair; later pairs answer sooner (adversarial reordering)."""
    n = len(pairs)
    chat = []
    for i, pair in enumerate(pairs):
        chat.append(
            {
                "key": fixture_key(build_annotation_prompt(pair, kind)),
                "body": chat_body(f"```python\n{plan_for(i)}\n```", 50, 20),
                "delay_ms": (n - i) % 17,
            }
        )
    return write_fixture(directory, chat=chat)


def score_records(context: str, target: str, mean: float, n_tokens: int = 4) -> dict:
    """Echo reply for ``context + target`` whose target tokens all have NLL ``mean``."""
    step = len(target) // n_tokens
    cuts = [target[k * step : (k + 1) * step] for k in range(n_tokens - 1)]
    cuts.append(target[(n_tokens - 1) * step :])
    tokens = [context, *cuts]
    logprobs = [None, *([-mean] * n_tokens)]
    return {"key": fixture_key(context + target), "body": echo_body(tokens, logprobs)}


def score_fixture(directory: Path, triples: list[TrainingTriple], stage1: float, stage2: float, direct: float | None = None) -> Path:
    score = []
    for t in triples:
        score.append(score_records(*planning_segments(t.prompt, t.plan), stage1))
        score.append(score_records(*realization_segments(t.prompt, t.plan, t.response), stage2))
        if direct is not None:
            score.append(score_records(*direct_segments(t.prompt, t.response), direct))
    return write_fixture(directory, score=score)
