"""Tolerant lexer and structural checks for pseudocode plans.

Plans are pseudocode, so nothing here parses a grammar. The lexer is total and
lossless; the validator only looks for the structural damage that truncated or
degenerate generations leave behind.

Rule ids reported by :func:`validate_plan`:

* ``R1`` unbalanced ``()[]{}``
* ``R2`` unterminated string literal
* ``R3`` the plan stops mid-construct (trailing operator/comma/opener on the
  final line, or a block header with no indented body after it)
* ``R4`` nothing left after removing comments and blank lines
* ``R5`` more words than ``max_words``
* ``R6`` neither a function definition nor any executable statement
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum

from .records import FeatureCounts, RuleFailure, ValidationReport, Verdict


class TokenKind(str, Enum):
    KEYWORD = "keyword"
    IDENTIFIER = "identifier"
    NUMBER = "number"
    DELIMITER = "delimiter"
    STRING = "string"
    OPERATOR = "operator"
    NEWLINE = "newline"
    INDENT = "indent"
    DEDENT = "dedent"
    COMMENT = "comment"
    OTHER = "other"


KEYWORDS = frozenset({"def", "return", "for", "if", "elif", "else", "while"})
BLOCK_WORDS = KEYWORDS - {"return"} | {"class", "try", "except", "finally", "with"}
OPENERS = {"(": ")", "[": "]", "{": "}"}
CLOSERS = {v: k for k, v in OPENERS.items()}
TAB_WIDTH = 4

# longest first so that the scanner can take the first match
_OPERATORS = sorted(
    """
    **= //= >>= <<= ... -> := == != <= >= += -= *= /= %= &= |= ^= @= ** // << >>
    + - * / % < > = ! . , : ; @ & | ^ ~
    """.split(),
    key=len,
    reverse=True,
)
# what a final line may not end with
_DANGLING_OPERATORS = frozenset(_OPERATORS) - {".", "...", ":", ";", "!", "~"}
_DANGLING_WORDS = frozenset({"and", "or", "not", "in", "is"})
_ASSIGN_OPERATORS = frozenset(op for op in _OPERATORS if op.endswith("=") and op not in {"==", "!=", "<=", ">="})

_IDENT_RE = re.compile(r"[^\W\d]\w*")
_NUMBER_RE = re.compile(r"(?:\d[\d_]*(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?[jJ]?")
_STRING_PREFIXES = frozenset({"r", "u", "f", "b", "br", "rb", "fr", "rf"})


@dataclass(frozen=True)
class PlanToken:
    kind: TokenKind
    text: str
    line: int
    column: int
    offset: int


@dataclass(frozen=True)
class LogicalLine:
    line: int
    indent: int
    tokens: tuple[PlanToken, ...]


@dataclass
class Scan:
    """Everything the lexer learns about a text in one pass."""

    tokens: list[PlanToken] = field(default_factory=list)
    unterminated: list[int] = field(default_factory=list)  # indexes into tokens
    notes: list[str] = field(default_factory=list)
    lines: list[LogicalLine] = field(default_factory=list)


def _indent_width(ws: str) -> int:
    return sum(TAB_WIDTH if ch == "\t" else 1 for ch in ws)


class _Scanner:
    def __init__(self, text: str, prose: bool) -> None:
        self.text = text
        self.prose = prose
        self.pos = 0
        self.line = 1
        self.line_start = 0
        self.scan = Scan()
        self.depth = 0
        self.indents = [0]
        self.current: list[PlanToken] = []
        self.current_line = 1
        self.current_indent = 0
        self.continued = False

    def emit(self, kind: TokenKind, start: int, end: int, *, line: int | None = None, col: int | None = None) -> PlanToken:
        tok = PlanToken(
            kind,
            self.text[start:end],
            self.line if line is None else line,
            start - self.line_start if col is None else col,
            start,
        )
        self.scan.tokens.append(tok)
        if kind not in (TokenKind.NEWLINE, TokenKind.INDENT, TokenKind.DEDENT, TokenKind.COMMENT):
            self.current.append(tok)
        return tok

    def end_logical_line(self) -> None:
        if self.current:
            self.scan.lines.append(LogicalLine(self.current_line, self.current_indent, tuple(self.current)))
        self.current = []

    def handle_indent(self) -> None:
        """Called at the start of a physical line outside any brackets."""
        text = self.text
        m = re.compile(r"[ \t\f]*").match(text, self.pos)
        ws_end = m.end()
        rest = text[ws_end : ws_end + 1]
        if rest in ("", "\n", "\r", "#"):
            return  # blank or comment-only lines do not move indentation
        width = _indent_width(m.group(0).replace("\f", ""))
        self.current_line = self.line
        self.current_indent = width
        if width > self.indents[-1]:
            self.indents.append(width)
            self.emit(TokenKind.INDENT, ws_end, ws_end)
        elif width < self.indents[-1]:
            while width < self.indents[-1]:
                self.indents.pop()
                self.emit(TokenKind.DEDENT, ws_end, ws_end)
            if width != self.indents[-1]:
                self.scan.notes.append(f"line {self.line}: dedent to unmatched indentation level {width}")
                self.indents.append(width)

    def run(self) -> Scan:
        text = self.text
        n = len(text)
        at_line_start = True
        while self.pos < n:
            if at_line_start:
                at_line_start = False
                if self.depth == 0 and not self.continued:
                    self.handle_indent()
                self.continued = False
            ch = text[self.pos]
            if ch in " \t\f":
                self.pos += 1
            elif ch in "\r\n":
                end = self.pos + (2 if text.startswith("\r\n", self.pos) else 1)
                self.emit(TokenKind.NEWLINE, self.pos, end)
                if self.depth == 0 and not self.continued:
                    self.end_logical_line()
                self.pos = end
                self.line += 1
                self.line_start = end
                at_line_start = True
            elif ch == "#":
                end = self._line_end(self.pos)
                self.emit(TokenKind.COMMENT, self.pos, end)
                self.pos = end
            elif ch in "'\"" and not self.prose:
                self._string(self.pos, self.pos)
            elif ch == "\\" and text[self.pos + 1 : self.pos + 2] in ("\n", "\r"):
                self.emit(TokenKind.OTHER, self.pos, self.pos + 1)
                self.pos += 1
                self.continued = True
            elif ch in OPENERS or ch in CLOSERS:
                self._delimiter(ch)
            elif (m := _NUMBER_RE.match(text, self.pos)) and (ch.isdigit() or ch == "."):
                self.emit(TokenKind.NUMBER, self.pos, m.end())
                self.pos = m.end()
            elif m := _IDENT_RE.match(text, self.pos):
                word = m.group(0)
                if (
                    not self.prose
                    and word.lower() in _STRING_PREFIXES
                    and text[m.end() : m.end() + 1] in ("'", '"')
                ):
                    self._string(self.pos, m.end())
                else:
                    kind = TokenKind.KEYWORD if word in KEYWORDS else TokenKind.IDENTIFIER
                    self.emit(kind, self.pos, m.end())
                    self.pos = m.end()
            else:
                for op in _OPERATORS:
                    if text.startswith(op, self.pos):
                        self.emit(TokenKind.OPERATOR, self.pos, self.pos + len(op))
                        self.pos += len(op)
                        break
                else:
                    self.emit(TokenKind.OTHER, self.pos, self.pos + 1)
                    self.pos += 1
        if self.current:
            self.emit(TokenKind.NEWLINE, n, n)
            self.end_logical_line()
        while len(self.indents) > 1:
            self.indents.pop()
            self.emit(TokenKind.DEDENT, n, n)
        return self.scan

    def _line_end(self, pos: int) -> int:
        ends = [i for i in (self.text.find("\n", pos), self.text.find("\r", pos)) if i >= 0]
        return min(ends) if ends else len(self.text)

    def _delimiter(self, ch: str) -> None:
        kind = TokenKind.DELIMITER
        if self.prose and ch == ")" and self._is_enumerator():
            kind = TokenKind.OTHER
        elif ch in OPENERS:
            self.depth += 1
        else:
            self.depth = max(0, self.depth - 1)
        self.emit(kind, self.pos, self.pos + 1)
        self.pos += 1

    def _is_enumerator(self) -> bool:
        # "1) step" / "a) step" list markers in prose plans
        return (
            len(self.current) == 1
            and self.current[0].kind in (TokenKind.NUMBER, TokenKind.IDENTIFIER)
            and len(self.current[0].text) <= 2
            and self.current[0].offset + len(self.current[0].text) == self.pos
        )

    def _string(self, start: int, quote_pos: int) -> None:
        text = self.text
        q = text[quote_pos]
        triple = text.startswith(q * 3, quote_pos)
        line, col = self.line, start - self.line_start
        if triple:
            i = quote_pos + 3
            close = q * 3
            while i < len(text):
                if text[i] == "\\":
                    i += 2
                    continue
                if text.startswith(close, i):
                    end = i + 3
                    break
                i += 1
            else:
                end = None
        else:
            i = quote_pos + 1
            end = None
            while i < len(text) and text[i] not in "\r\n":
                if text[i] == "\\":
                    i += 2
                    continue
                if text[i] == q:
                    end = i + 1
                    break
                i += 1
        if end is None:
            end = len(text) if triple else self._line_end(quote_pos)
            self.emit(TokenKind.OTHER, start, end, line=line, col=col)
            self.scan.unterminated.append(len(self.scan.tokens) - 1)
        else:
            self.emit(TokenKind.STRING, start, end, line=line, col=col)
        # multi-line triple strings advance the line counter
        for m in re.finditer(r"\r\n|\r|\n", text[start:end]):
            self.line += 1
            self.line_start = start + m.end()
        self.pos = end


def scan_plan(text: str, *, prose: bool = False) -> Scan:
    """Lex ``text`` and group its significant tokens into logical lines.

    With ``prose=True`` quotes are ordinary characters (apostrophes in natural
    language are not string delimiters) and ``1)``-style list markers are not
    treated as closing delimiters.
    """
    return _Scanner(text, prose).run()


def tokenize_plan(text: str) -> list[PlanToken]:
    return scan_plan(text).tokens


# --------------------------------------------------------------------------- #
# statistics
# --------------------------------------------------------------------------- #


def word_count(text: str) -> int:
    return len(text.split())


def _feature_counts(scan: Scan) -> FeatureCounts:
    counts = dict.fromkeys(("defs", "calls", "if_branches", "for_loops", "while_loops", "returns"), 0)
    for ll in scan.lines:
        toks = ll.tokens
        head = toks[0]
        if head.kind is TokenKind.KEYWORD:
            if head.text in ("if", "elif"):
                counts["if_branches"] += 1
            elif head.text == "for":
                counts["for_loops"] += 1
            elif head.text == "while":
                counts["while_loops"] += 1
        for i, tok in enumerate(toks):
            if tok.kind is TokenKind.KEYWORD:
                if tok.text == "def":
                    counts["defs"] += 1
                elif tok.text == "return":
                    counts["returns"] += 1
            elif (
                tok.kind is TokenKind.IDENTIFIER
                and i + 1 < len(toks)
                and toks[i + 1].text == "("
                and toks[i + 1].kind is TokenKind.DELIMITER
                and not (i > 0 and toks[i - 1].text in ("def", "class"))
            ):
                counts["calls"] += 1
    return FeatureCounts(**counts)


@dataclass(frozen=True)
class PlanStats:
    word_count: int
    line_count: int
    feature_counts: FeatureCounts

    def to_json(self) -> dict:
        return {
            "word_count": self.word_count,
            "line_count": self.line_count,
            "feature_counts": self.feature_counts.as_dict(),
        }


def plan_stats(text: str) -> PlanStats:
    return PlanStats(word_count(text), len(text.splitlines()), _feature_counts(scan_plan(text)))


# --------------------------------------------------------------------------- #
# validation
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class LintLimits:
    max_words: int = 200
    require_def_or_statement: bool = True
    prose: bool = False


def delimiter_failure(tokens: list[PlanToken]) -> RuleFailure | None:
    stack: list[PlanToken] = []
    for tok in tokens:
        if tok.kind is not TokenKind.DELIMITER:
            continue
        if tok.text in OPENERS:
            stack.append(tok)
        elif not stack:
            return RuleFailure("R1", f"unexpected {tok.text!r} at column {tok.column}", tok.line)
        elif OPENERS[stack[-1].text] != tok.text:
            top = stack[-1]
            return RuleFailure(
                "R1", f"{tok.text!r} closes {top.text!r} opened on line {top.line}", tok.line
            )
        else:
            stack.pop()
    if stack:
        top = stack[-1]
        return RuleFailure("R1", f"{len(stack)} unclosed delimiter(s), innermost {top.text!r}", top.line)
    return None


def _dangling_end(ll: LogicalLine) -> str | None:
    last = ll.tokens[-1]
    if last.kind is TokenKind.OPERATOR and last.text in _DANGLING_OPERATORS:
        return f"final line ends with {last.text!r}"
    if last.kind is TokenKind.IDENTIFIER and last.text in _DANGLING_WORDS:
        return f"final line ends with {last.text!r}"
    if last.kind is TokenKind.DELIMITER and last.text in OPENERS:
        return f"final line ends with open {last.text!r}"
    if last.kind is TokenKind.OTHER and last.text == "\\":
        return "final line ends with a line continuation"
    return None


def _headers_without_body(lines: list[LogicalLine]) -> list[LogicalLine]:
    missing = []
    for i, ll in enumerate(lines):
        head, last = ll.tokens[0], ll.tokens[-1]
        if last.text != ":" or last.kind is not TokenKind.OPERATOR or head.text not in BLOCK_WORDS:
            continue
        if not any(later.indent > ll.indent for later in lines[i + 1 :]):
            missing.append(ll)
    return missing


def _has_statement(lines: list[LogicalLine]) -> bool:
    for ll in lines:
        if ll.tokens[0].kind is TokenKind.KEYWORD:
            return True
        for i, tok in enumerate(ll.tokens):
            if tok.kind is TokenKind.OPERATOR and tok.text in _ASSIGN_OPERATORS:
                return True
            if (
                tok.kind is TokenKind.IDENTIFIER
                and i + 1 < len(ll.tokens)
                and ll.tokens[i + 1].text == "("
            ):
                return True
    return False


def validate_plan(text: str, limits: LintLimits | None = None) -> ValidationReport:
    """Check a plan for structural completeness; the report carries every failed rule."""
    limits = limits or LintLimits()
    scan = scan_plan(text, prose=limits.prose)
    words = word_count(text)
    features = _feature_counts(scan)
    failures: list[RuleFailure] = []

    if not scan.lines:
        failures.append(RuleFailure("R4", "plan is empty after removing comments and blank lines"))
    else:
        bad = delimiter_failure(scan.tokens)
        if bad:
            failures.append(bad)
        for idx in scan.unterminated:
            tok = scan.tokens[idx]
            failures.append(RuleFailure("R2", "unterminated string literal", tok.line))
        dangling = _dangling_end(scan.lines[-1])
        if dangling:
            failures.append(RuleFailure("R3", dangling, scan.lines[-1].line))
        if not limits.prose:
            for ll in _headers_without_body(scan.lines):
                failures.append(RuleFailure("R3", "block header has no indented body", ll.line))
        if limits.require_def_or_statement and not limits.prose:
            if features.defs == 0 and not _has_statement(scan.lines):
                failures.append(RuleFailure("R6", "no function definition and no executable statement"))
    if words > limits.max_words:
        failures.append(RuleFailure("R5", f"{words} words exceeds the limit of {limits.max_words}"))

    return ValidationReport(
        verdict=Verdict.REJECTED if failures else Verdict.ACCEPTED,
        failures=tuple(failures),
        word_count=words,
        feature_counts=features,
        notes=tuple(scan.notes),
    )
