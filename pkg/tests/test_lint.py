from __future__ import annotations

import random

from hypothesis import given, settings
from hypothesis import strategies as st

from plankit.lint import LintLimits, TokenKind, plan_stats, scan_plan, tokenize_plan, validate_plan
from plankit.records import Verdict

LAST_LETTER_PLAN = """def extract_and_concatenate_last_letters(input_str):
    words = input_str.split()
    concatenated_result = ""
    for word in words:
        last_letter = word[-1]
        concatenated_result += last_letter
    return concatenated_result
input_str = "Ofe Aliza Betzy Rohan"
result = extract_and_concatenate_last_letters(input_str)"""


def kinds(text):
    return [(t.kind, t.text) for t in tokenize_plan(text)]


def test_tokenize_def_header():
    assert kinds("def f():") == [
        (TokenKind.KEYWORD, "def"),
        (TokenKind.IDENTIFIER, "f"),
        (TokenKind.DELIMITER, "("),
        (TokenKind.DELIMITER, ")"),
        (TokenKind.OPERATOR, ":"),
        (TokenKind.NEWLINE, ""),
    ]


def test_tokenize_empty():
    assert tokenize_plan("") == []


def test_last_letter_plan_delimiters_balanced():
    stack = []
    for tok in tokenize_plan(LAST_LETTER_PLAN):
        if tok.kind is TokenKind.DELIMITER:
            if tok.text in "([{":
                stack.append(tok.text)
            else:
                assert stack and "([{"[")]}".index(tok.text)] == stack.pop()
    assert stack == []


def test_validate_examples():
    report = validate_plan("def f():\n    return 1")
    assert report.verdict is Verdict.ACCEPTED
    assert (report.feature_counts.defs, report.feature_counts.returns) == (1, 1)
    report = validate_plan("def f(:\n    return (1")
    assert report.verdict is Verdict.REJECTED and "R1" in report.rules


def test_last_letter_plan_accepted_with_features():
    report = validate_plan(LAST_LETTER_PLAN)
    assert report.accepted
    fc = report.feature_counts
    assert (fc.defs, fc.for_loops, fc.returns) == (1, 1, 1)
    assert plan_stats(LAST_LETTER_PLAN).feature_counts.calls >= 2


def test_plan_stats_examples():
    stats = plan_stats("def f():\n    return 1")
    assert stats.word_count == 4 and stats.feature_counts.defs == 1
    empty = plan_stats("")
    assert empty.word_count == 0 and empty.line_count == 0
    assert all(v == 0 for v in empty.feature_counts.as_dict().values())


def test_fixture_suite_agrees(plan_fixtures):
    assert len(plan_fixtures) >= 20
    for fx in plan_fixtures:
        report = validate_plan(fx["plan"])
        assert report.verdict.value == fx["verdict"], fx["name"]
        assert report.rules == fx["rules"], fx["name"]
        assert validate_plan(fx["plan"]) == report


def test_max_words_configurable():
    plan = "x = 1\n" + " ".join(["w"] * 10)
    assert "R5" in validate_plan(plan, LintLimits(max_words=5)).rules
    assert "R5" not in validate_plan(plan, LintLimits(max_words=50)).rules


def test_r6_flag():
    assert validate_plan("plan", LintLimits(require_def_or_statement=False)).accepted


def test_prose_mode_tolerates_apostrophes():
    plan = "1) Find the movie's country.\n2) Look up when it was founded."
    assert not validate_plan(plan).accepted
    assert validate_plan(plan, LintLimits(prose=True, require_def_or_statement=False)).accepted


def test_inconsistent_dedent_is_a_note():
    plan = "def f():\n        x = 1\n    return x"
    report = validate_plan(plan)
    assert report.accepted
    assert report.notes


def test_tabs_are_four_columns():
    scan = scan_plan("if x:\n\treturn 1\n")
    assert [ll.indent for ll in scan.lines] == [0, 4]


# balance property against an independent stack oracle

PAIRS = {")": "(", "]": "[", "}": "{"}


def stack_oracle(text: str) -> bool:
    stack = []
    for ch in text:
        if ch in "([{":
            stack.append(ch)
        elif ch in PAIRS:
            if not stack or stack.pop() != PAIRS[ch]:
                return False
    return not stack


def test_balance_property_10k_strings():
    rng = random.Random(2024)
    alphabet = "()[]{}()[]{} ab1\n"
    for _ in range(10_000):
        text = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 16)))
        r1 = "R1" in validate_plan(text).rules
        assert r1 == (not stack_oracle(text)), repr(text)


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=80))
def test_idempotent_and_total(text):
    assert validate_plan(text) == validate_plan(text)


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=120))
def test_tokenizer_coverage(text):
    pos = 0
    for tok in tokenize_plan(text):
        if not tok.text:
            continue
        gap = text[pos : tok.offset]
        assert gap.strip() == "" or gap.strip() == "\\", (gap, tok)
        assert text[tok.offset : tok.offset + len(tok.text)] == tok.text
        pos = tok.offset + len(tok.text)
    assert text[pos:].strip() == ""


def generated_plans(n: int, seed: int = 7) -> list[str]:
    rng = random.Random(seed)
    names = ["total", "items", "x", "result", "count"]
    plans = []
    for _ in range(n):
        name = rng.choice(names)
        body = [
            f"def solve_{rng.randint(0, 99)}({name}):",
            f"    values = [v * {rng.randint(1, 9)} for v in {name}]",
            f"    lookup = {{'k': ({rng.randint(0, 9)}, {rng.randint(0, 9)})}}",
        ]
        if rng.random() < 0.5:
            body += ["    for v in values:", f"        print(v, lookup['k'][{rng.randint(0, 1)}])"]
        body.append("    return sum(values) + len(lookup)")
        plans.append("\n".join(body))
    return plans


def test_monotone_truncation():
    plans = generated_plans(200) + [LAST_LETTER_PLAN]
    for plan in plans:
        assert validate_plan(plan).accepted
        toks = [t for t in tokenize_plan(plan) if t.kind is TokenKind.DELIMITER]
        # cut strictly inside each matched pair
        stack = []
        for tok in toks:
            if tok.text in "([{":
                stack.append(tok)
            else:
                opener = stack.pop()
                for cut in range(opener.offset + 1, tok.offset + 1):
                    truncated = plan[:cut]
                    assert validate_plan(truncated).verdict is Verdict.REJECTED, repr(truncated)
