"""The single fence convention shared by training files, prompts and the splitter.

A plan is always carried as a triple-backtick block placed right before the
response text::

    ```
    <plan>
    ```
    <response>
"""
from __future__ import annotations

import re

FENCE = "```"
_BLOCK_RE = re.compile(r"```[^\n`]*\n(.*?)(?:\n)?```", re.DOTALL)


def plan_block(plan: str) -> str:
    return f"{FENCE}\n{plan}\n{FENCE}\n"


def render_plan_response(plan: str, response: str) -> str:
    return plan_block(plan) + response


def split_plan_response(text: str) -> tuple[str, str] | None:
    """Split a continuation at the close of its first fenced block.

    Returns ``(plan, response)``, or None when no complete block exists.
    """
    m = _BLOCK_RE.search(text)
    if m is None:
        return None
    response = text[m.end() :]
    if response.startswith("\n"):
        response = response[1:]
    return m.group(1), response


def first_block(text: str) -> str | None:
    """Interior of the first fenced block; an unclosed fence runs to the end."""
    m = _BLOCK_RE.search(text)
    if m is not None:
        return m.group(1)
    start = text.find(FENCE)
    if start < 0:
        return None
    nl = text.find("\n", start)
    return "" if nl < 0 else text[nl + 1 :]


# teacher-forced scoring segments: the pieces concatenate to prompt + "\n" + plan_block + response


def planning_segments(prompt: str, plan: str) -> tuple[str, str]:
    """(context, target) for scoring the plan given the prompt."""
    return prompt + "\n", plan_block(plan)


def realization_segments(prompt: str, plan: str, response: str) -> tuple[str, str]:
    """(context, target) for scoring the response given prompt and plan."""
    return prompt + "\n" + plan_block(plan), response


def direct_segments(prompt: str, response: str) -> tuple[str, str]:
    """(context, target) for scoring the response from the prompt alone."""
    return prompt + "\n", response
