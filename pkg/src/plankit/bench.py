"""Seeded generators and exact oracles for the symbolic reasoning tasks, plus
multi-hop QA loading/ingestion.

Every item draws from its own RNG keyed by ``(seed, task, index)``, so item ``i``
is the same whether it is generated alone, in a batch, or in parallel.
"""
from __future__ import annotations

import hashlib
import json
import random
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Sequence

from .records import BenchmarkItem, RecordError, Task, item_from_json, read_jsonl

DYCK_FAMILIES = ("()", "[]", "{}", "<>")
DYCK_INSTRUCTION = (
    "Complete the rest of the sequence, making sure that the parentheses are closed properly. Input: "
)
COIN_OPENING = "A coin is heads up."
COIN_QUESTION = 'Is the coin still heads up? Note that "flip" here means "reverse".'
LASTLETTER_TEMPLATE = 'Take the last letters of the words in "{words}" and concatenate them.'


def load_names() -> tuple[str, ...]:
    text = resources.files("plankit").joinpath("data/names.txt").read_text(encoding="utf-8")
    return tuple(line.strip() for line in text.splitlines() if line.strip())


def item_rng(seed: int, task: Task | str, index: int) -> random.Random:
    digest = hashlib.sha256(f"{seed}:{Task(task).value}:{index}".encode("ascii")).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


@dataclass(frozen=True)
class GenSpec:
    task: Task
    seed: int
    n: int
    num_flips: int = 4
    num_words: int = 4
    names: tuple[str, ...] = field(default_factory=load_names)
    max_depth: int = 3
    atoms: tuple[int, int] = (2, 5)
    prefix_len: tuple[int, int] = (4, 16)
    families: tuple[str, ...] = DYCK_FAMILIES

    def __post_init__(self) -> None:
        object.__setattr__(self, "task", Task(self.task))
        if self.seed < 0:
            raise ValueError("seed must be unsigned")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.num_flips < 1 or self.num_words < 1:
            raise ValueError("num_flips and num_words must be >= 1")
        if self.task is Task.COINFLIP and len(set(self.names)) < self.num_flips:
            raise ValueError("lexicon has fewer distinct names than num_flips")
        if self.task is Task.LASTLETTER and len(set(self.names)) < self.num_words:
            raise ValueError("lexicon has fewer distinct names than num_words")
        if any(not name for name in self.names):
            raise ValueError("lexicon contains an empty word")
        lo, hi = self.atoms
        if self.max_depth < 1 or not 1 <= lo <= hi or hi > 2 ** self.max_depth:
            raise ValueError("need 1 <= min atoms <= max atoms <= 2**max_depth")
        lo, hi = self.prefix_len
        if not 1 <= lo <= hi:
            raise ValueError("need 1 <= min prefix length <= max prefix length")
        if not self.families or any(f not in DYCK_FAMILIES for f in self.families):
            raise ValueError(f"bracket families must be a non-empty subset of {DYCK_FAMILIES}")


def generate(spec: GenSpec) -> list[BenchmarkItem]:
    makers = {
        Task.BOOLEAN: boolean_item,
        Task.COINFLIP: coinflip_item,
        Task.LASTLETTER: lastletter_item,
        Task.DYCK: dyck_item,
    }
    if spec.task not in makers:
        raise ValueError(f"no generator for task {spec.task.value!r}")
    make = makers[spec.task]
    return [make(spec, i) for i in range(spec.n)]


def _item_id(spec: GenSpec, index: int) -> str:
    return f"{spec.task.value}-{spec.seed}-{index}"


# --------------------------------------------------------------------------- #
# boolean expressions
# --------------------------------------------------------------------------- #


class BooleanSyntaxError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at position {position}")
        self.position = position


_BOOL_TOKEN_RE = re.compile(r"\s*(?:(\(|\))|([A-Za-z_]+)|(\S))")


def _bool_tokens(text: str) -> list[tuple[str, int]]:
    out = []
    pos = 0
    while pos < len(text):
        m = _BOOL_TOKEN_RE.match(text, pos)
        if m is None:  # only trailing whitespace left
            break
        tok = m.group(1) or m.group(2) or m.group(3)
        out.append((tok, m.end() - len(tok)))
        pos = m.end()
    return out


def eval_boolean(text: str) -> bool:
    """Evaluate ``True``/``False`` with ``not`` > ``and`` > ``or`` and parentheses."""
    tokens = _bool_tokens(text)
    i = 0

    def peek() -> str | None:
        return tokens[i][0] if i < len(tokens) else None

    def where() -> int:
        return tokens[i][1] if i < len(tokens) else len(text)

    def take(expected: str) -> None:
        nonlocal i
        if peek() != expected:
            found = peek()
            raise BooleanSyntaxError(f"expected {expected!r}, found {found if found else 'end of input'!r}", where())
        i += 1

    def or_expr() -> bool:
        value = and_expr()
        while peek() == "or":
            take("or")
            rhs = and_expr()
            value = value or rhs
        return value

    def and_expr() -> bool:
        value = not_expr()
        while peek() == "and":
            take("and")
            rhs = not_expr()
            value = value and rhs
        return value

    def not_expr() -> bool:
        if peek() == "not":
            take("not")
            return not not_expr()
        return atom()

    def atom() -> bool:
        nonlocal i
        tok = peek()
        if tok == "True" or tok == "False":
            i += 1
            return tok == "True"
        if tok == "(":
            take("(")
            value = or_expr()
            take(")")
            return value
        raise BooleanSyntaxError(f"unexpected {tok if tok else 'end of input'!r}", where())

    result = or_expr()
    if i != len(tokens):
        raise BooleanSyntaxError(f"unexpected {tokens[i][0]!r}", tokens[i][1])
    return result


_PREC = {"or": 1, "and": 2, "not": 3, "atom": 4}


def _bool_tree(rng: random.Random, atoms: int, depth: int) -> tuple:
    """Random expression tree with exactly ``atoms`` leaves and nesting <= ``depth``."""
    if atoms == 1:
        node: tuple = ("atom", rng.choice((True, False)))
        if depth >= 1 and rng.random() < 0.3:
            node = ("not", node)
        return node
    budget = depth
    wrap = budget >= 2 and atoms <= 2 ** (budget - 1) and rng.random() < 0.25
    if wrap:
        budget -= 1
    cap = 2 ** (budget - 1)
    left = rng.randint(max(1, atoms - cap), min(cap, atoms - 1))
    node = (rng.choice(("and", "or")), _bool_tree(rng, left, budget - 1), _bool_tree(rng, atoms - left, budget - 1))
    return ("not", node) if wrap else node


def _render_bool(node: tuple, rng: random.Random | None = None, need: int = 0) -> str:
    kind = node[0]
    if kind == "atom":
        text = "True" if node[1] else "False"
    elif kind == "not":
        text = "not " + _render_bool(node[1], rng, _PREC["not"])
    else:
        prec = _PREC[kind]
        # and/or are associative: an equal-precedence child needs no parentheses
        text = f"{_render_bool(node[1], rng, prec)} {kind} {_render_bool(node[2], rng, prec)}"
    if _PREC[kind] < need or (rng is not None and kind != "atom" and need and rng.random() < 0.35):
        text = f"( {text} )"
    return text


def tree_value(node: tuple) -> bool:
    kind = node[0]
    if kind == "atom":
        return node[1]
    if kind == "not":
        return not tree_value(node[1])
    if kind == "and":
        return tree_value(node[1]) and tree_value(node[2])
    return tree_value(node[1]) or tree_value(node[2])


def boolean_expression(spec: GenSpec, index: int) -> tuple[tuple, str]:
    rng = item_rng(spec.seed, Task.BOOLEAN, index)
    atoms = rng.randint(*spec.atoms)
    tree = _bool_tree(rng, atoms, spec.max_depth)
    return tree, _render_bool(tree, rng)


def boolean_item(spec: GenSpec, index: int) -> BenchmarkItem:
    _, expr = boolean_expression(spec, index)
    gold = str(eval_boolean(expr))
    return BenchmarkItem(_item_id(spec, index), Task.BOOLEAN, f"{expr} is", (gold,), spec.seed)


# --------------------------------------------------------------------------- #
# coin flip
# --------------------------------------------------------------------------- #


def coin_oracle(initially_heads: bool, flips: Sequence[bool]) -> bool:
    """Whether the coin ends heads up: the start state XOR the parity of flips."""
    return initially_heads ^ (sum(bool(f) for f in flips) % 2 == 1)


def coinflip_item(spec: GenSpec, index: int) -> BenchmarkItem:
    rng = item_rng(spec.seed, Task.COINFLIP, index)
    names = rng.sample(sorted(set(spec.names)), spec.num_flips)
    flips = [rng.random() < 0.5 for _ in names]
    steps = [f"{name} flips the coin." if f else f"{name} does not flip the coin." for name, f in zip(names, flips)]
    text = " ".join([COIN_OPENING, *steps, COIN_QUESTION])
    gold = "yes" if coin_oracle(True, flips) else "no"
    return BenchmarkItem(_item_id(spec, index), Task.COINFLIP, text, (gold,), spec.seed)


# --------------------------------------------------------------------------- #
# last letter concatenation
# --------------------------------------------------------------------------- #


def lastletter_oracle(words: Sequence[str]) -> str:
    if any(not w for w in words):
        raise AssertionError("last-letter words must be non-empty")
    return "".join(w[-1] for w in words).lower()


def lastletter_item(spec: GenSpec, index: int) -> BenchmarkItem:
    rng = item_rng(spec.seed, Task.LASTLETTER, index)
    words = rng.sample(sorted(set(spec.names)), spec.num_words)
    text = LASTLETTER_TEMPLATE.format(words=" ".join(words))
    return BenchmarkItem(_item_id(spec, index), Task.LASTLETTER, text, (lastletter_oracle(words),), spec.seed)


# --------------------------------------------------------------------------- #
# Dyck completion
# --------------------------------------------------------------------------- #

_CLOSE_OF = {f[0]: f[1] for f in DYCK_FAMILIES}
_OPEN_OF = {f[1]: f[0] for f in DYCK_FAMILIES}


class DyckError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at token {position}")
        self.position = position


def dyck_tokens(text: str | Sequence[str]) -> list[str]:
    if not isinstance(text, str):
        return list(text)
    return [ch for chunk in text.split() for ch in chunk]


def dyck_close(prefix: str | Sequence[str]) -> str:
    """The minimal closing sequence for a legal Dyck prefix, space separated."""
    stack: list[str] = []
    for pos, tok in enumerate(dyck_tokens(prefix)):
        if tok in _CLOSE_OF:
            stack.append(tok)
        elif tok in _OPEN_OF:
            if not stack:
                raise DyckError(f"{tok!r} closes nothing", pos)
            if stack[-1] != _OPEN_OF[tok]:
                raise DyckError(f"{tok!r} does not match {stack[-1]!r}", pos)
            stack.pop()
        else:
            raise DyckError(f"{tok!r} is not a bracket", pos)
    return " ".join(_CLOSE_OF[t] for t in reversed(stack))


def dyck_prefix(spec: GenSpec, index: int) -> list[str]:
    rng = item_rng(spec.seed, Task.DYCK, index)
    length = rng.randint(*spec.prefix_len)
    tokens: list[str] = []
    stack: list[str] = []
    for step in range(length):
        last = step == length - 1
        if stack and not (last and len(stack) == 1) and rng.random() < 0.45:
            tokens.append(_CLOSE_OF[stack.pop()])
        else:
            opener = rng.choice(spec.families)[0]
            stack.append(opener)
            tokens.append(opener)
    return tokens


def dyck_item(spec: GenSpec, index: int) -> BenchmarkItem:
    tokens = dyck_prefix(spec, index)
    return BenchmarkItem(
        _item_id(spec, index), Task.DYCK, DYCK_INSTRUCTION + " ".join(tokens), (dyck_close(tokens),), spec.seed
    )


def dyck_input_tokens(item: BenchmarkItem) -> list[str]:
    return dyck_tokens(item.input[len(DYCK_INSTRUCTION) :] if item.input.startswith(DYCK_INSTRUCTION) else item.input)


def leaks_gold(item: BenchmarkItem) -> bool:
    """Whether the item text already states its own answer.

    Boolean items may not contain ``<expression> is <gold>``; Dyck items may not
    contain the completed word ``<prefix> <gold>``.
    """
    if item.task is Task.BOOLEAN:
        return item.input.rstrip().endswith(tuple(f"is {g}" for g in item.gold))
    if item.task is Task.DYCK:
        prefix = " ".join(dyck_input_tokens(item))
        return any(f"{prefix} {g}" in item.input for g in item.gold)
    return False


# --------------------------------------------------------------------------- #
# multi-hop QA
# --------------------------------------------------------------------------- #

HOP_FILTERS = ("2", "3", "4", "all")


def load_multihop(path: str | Path, hops: int | str = "all") -> list[BenchmarkItem]:
    """Read multi-hop QA items (benchmark file schema), keeping one hop bucket or all."""
    hop_filter = str(hops)
    if hop_filter not in HOP_FILTERS:
        raise ValueError(f"hop filter must be one of {', '.join(HOP_FILTERS)}")
    items = []
    for lineno, obj in read_jsonl(path):
        rid = obj.get("id", f"line {lineno}")
        if hop_filter != "all" and "hops" not in obj:
            raise RecordError(f"item {rid!r} has no hops field", line=lineno, field="hops")
        if not obj.get("context"):
            raise RecordError(f"item {rid!r} has no context passages", line=lineno, field="context")
        item = item_from_json(obj, lineno)
        if item.task is not Task.MULTIHOP:
            raise RecordError(f"item {rid!r} is not a multihop item", line=lineno, field="task")
        if hop_filter == "all" or item.hops == int(hop_filter):
            items.append(item)
    return items


def _load_raw(path: str | Path) -> list[dict[str, Any]]:
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.lstrip()
    if stripped.startswith("["):
        data = json.loads(text)
        if not isinstance(data, list):
            raise ValueError("expected a JSON array of records")
        return data
    return [obj for _, obj in read_jsonl(path)]


_MUSIQUE_HOPS_RE = re.compile(r"^(\d)hop")


def ingest_musique(records: Iterable[dict[str, Any]]) -> list[BenchmarkItem]:
    items = []
    for rec in records:
        if rec.get("answerable") is False:
            continue
        rid = rec["id"]
        m = _MUSIQUE_HOPS_RE.match(rid)
        if m is None:
            raise ValueError(f"cannot read hop count from MuSiQue id {rid!r}")
        passages = tuple(
            f"{p['title']}: {p['paragraph_text']}" for p in rec.get("paragraphs", []) if p.get("is_supporting")
        )
        gold = tuple(dict.fromkeys(a for a in [rec["answer"], *rec.get("answer_aliases", [])] if a))
        items.append(
            BenchmarkItem(rid, Task.MULTIHOP, rec["question"], gold, 0, hops=int(m.group(1)), context=passages)
        )
    return items


def ingest_hotpotqa(records: Iterable[dict[str, Any]]) -> list[BenchmarkItem]:
    items = []
    for rec in records:
        titles = {title for title, _ in rec.get("supporting_facts", [])}
        passages = tuple(
            f"{title}: {''.join(sentences)}".rstrip() for title, sentences in rec.get("context", []) if title in titles
        )
        items.append(
            BenchmarkItem(rec["_id"], Task.MULTIHOP, rec["question"], (rec["answer"],), 0, hops=2, context=passages)
        )
    return items


def ingest_qa(path: str | Path, fmt: str) -> list[BenchmarkItem]:
    records = _load_raw(path)
    if fmt == "musique":
        return ingest_musique(records)
    if fmt == "hotpotqa":
        return ingest_hotpotqa(records)
    raise ValueError(f"unknown QA format {fmt!r} (expected musique or hotpotqa)")
