"""Synthetic integer-arithmetic problems, boxed-answer parsing and rewards."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FAMILIES = ("add", "sub", "mul_mod", "chain")
PROMPT_PREFIX = "Q: "
PROMPT_SUFFIX = " = ? Put the result in \\boxed{}."
BOX_OPEN = "\\boxed{"
BOX_CLOSE = "}"

_INT_RE = re.compile(r"^[+-]?\d+$")


class TaskError(ValueError):
    pass


class TokenTable:
    """Greedy longest-match tokenizer over a fixed list of strings."""

    def __init__(self, tokens: Sequence[str], special: dict[str, str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise TaskError("duplicate entries in token table")
        self.special = dict(special)
        self._by_length = sorted(self.tokens, key=len, reverse=True)

    @classmethod
    def load(cls, path: str | Path | None = None) -> "TokenTable":
        if path is None:
            text = resources.files("rlvr_lab").joinpath("token_table.json").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        raw = json.loads(text)
        return cls(raw["tokens"], raw["special"])

    def to_json(self) -> str:
        return json.dumps({"version": 1, "tokens": self.tokens, "special": self.special},
                          indent=2) + "\n"

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, name: str) -> int:
        return self.index[self.special[name]]

    @cached_property
    def pad_id(self) -> int:
        return self.id_of("pad")

    @cached_property
    def bos_id(self) -> int:
        return self.id_of("bos")

    @cached_property
    def eos_id(self) -> int:
        return self.id_of("eos")

    @cached_property
    def box_open_id(self) -> int:
        return self.id_of("box_open")

    @cached_property
    def box_close_id(self) -> int:
        return self.id_of("box_close")

    def encode(self, text: str) -> list[int]:
        out, i = [], 0
        while i < len(text):
            for tok in self._by_length:
                if tok and text.startswith(tok, i):
                    out.append(self.index[tok])
                    i += len(tok)
                    break
            else:
                raise TaskError(f"cannot tokenize {text[i:i + 10]!r}")
        return out

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.tokens[i] if 0 <= i < len(self.tokens) else "" for i in ids)


_DEFAULT_TABLE: TokenTable | None = None


def default_table() -> TokenTable:
    global _DEFAULT_TABLE
    if _DEFAULT_TABLE is None:
        _DEFAULT_TABLE = TokenTable.load()
    return _DEFAULT_TABLE


@dataclass(frozen=True)
class Problem:
    prompt_id: str
    prompt_text: str
    prompt_tokens: tuple[int, ...]
    answer: str
    difficulty_tag: str

    def to_json(self) -> dict:
        return {"prompt_id": self.prompt_id, "prompt_text": self.prompt_text,
                "answer": self.answer, "difficulty_tag": self.difficulty_tag}


@dataclass(frozen=True)
class RewardBreakdown:
    boxed: bool
    correct: bool
    reward: float


@dataclass(frozen=True)
class TaskSpec:
    families: tuple[str, ...] = FAMILIES
    digits: tuple[int, int] = (1, 1)
    count: int = 5000
    seed: int = 0


def render_prompt(expression: str) -> str:
    return f"{PROMPT_PREFIX}{expression}{PROMPT_SUFFIX}"


def make_problem(prompt_id: str, prompt_text: str, answer: str, difficulty_tag: str,
                 table: TokenTable | None = None) -> Problem:
    table = table or default_table()
    if canonical_int(answer) is None:
        raise TaskError(f"answer {answer!r} is not an integer")
    tokens = (table.bos_id, *table.encode(prompt_text))
    return Problem(prompt_id, prompt_text, tokens, answer, difficulty_tag)


def _operand(rng: np.random.Generator, digits: tuple[int, int]) -> int:
    d = int(rng.integers(digits[0], digits[1] + 1))
    lo = 0 if d == 1 else 10 ** (d - 1)
    return int(rng.integers(lo, 10**d))


def _expression(family: str, rng: np.random.Generator, digits: tuple[int, int]) -> tuple[str, int]:
    a, b = _operand(rng, digits), _operand(rng, digits)
    if family == "add":
        return f"{a}+{b}", a + b
    if family == "sub":
        return f"{a}-{b}", a - b
    if family == "mul_mod":
        m = int(rng.integers(2, 10))
        return f"{a}*{b}%{m}", (a * b) % m
    if family == "chain":
        c = _operand(rng, digits)
        op1, op2 = rng.choice(["+", "-"], size=2)
        val = a + b if op1 == "+" else a - b
        val = val + c if op2 == "+" else val - c
        return f"{a}{op1}{b}{op2}{c}", val
    raise TaskError(f"unknown task family {family!r}")


def generate_dataset(spec: TaskSpec, table: TokenTable | None = None) -> list[Problem]:
    """Deterministic mixed-family dataset; families are drawn uniformly per problem."""
    if not spec.families:
        raise TaskError("empty family set")
    if spec.count < 1:
        raise TaskError("count must be >= 1")
    lo, hi = spec.digits
    if not 1 <= lo <= hi:
        raise TaskError("digit range must satisfy 1 <= lo <= hi")
    unknown = set(spec.families) - set(FAMILIES)
    if unknown:
        raise TaskError(f"unknown task families {sorted(unknown)}")
    rng = np.random.default_rng(spec.seed)
    out = []
    for i in range(spec.count):
        family = spec.families[int(rng.integers(len(spec.families)))]
        expr, value = _expression(family, rng, spec.digits)
        ndig = max(len(t) for t in re.findall(r"\d+", expr))
        out.append(make_problem(f"s{spec.seed}-{i:06d}", render_prompt(expr), str(value),
                                f"{family}-d{ndig}", table))
    return out


def write_dataset(problems: Sequence[Problem], path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        for p in problems:
            f.write(json.dumps(p.to_json(), sort_keys=True) + "\n")
    tmp.replace(path)


def load_dataset(path: str | Path, table: TokenTable | None = None) -> list[Problem]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out.append(make_problem(rec["prompt_id"], rec["prompt_text"], rec["answer"],
                                        rec.get("difficulty_tag", ""), table))
    return out


def extract_boxed(gen: Sequence[int] | str, table: TokenTable | None = None) -> str | None:
    """Contents of the last complete boxed span, or None.

    Accepts generated token ids or raw text. A new box-open marker restarts
    the span, so the innermost/last opening wins.
    """
    if isinstance(gen, str):
        last, start, i = None, None, 0
        while i < len(gen):
            if gen.startswith(BOX_OPEN, i):
                start = i + len(BOX_OPEN)
                i = start
                continue
            if gen[i] == BOX_CLOSE and start is not None:
                last = gen[start:i]
                start = None
            i += 1
        return last
    table = table or default_table()
    last_ids, open_at = None, None
    for j, t in enumerate(gen):
        if t == table.box_open_id:
            open_at = j + 1
        elif t == table.box_close_id and open_at is not None:
            last_ids = list(gen[open_at:j])
            open_at = None
    return None if last_ids is None else table.decode(last_ids)


def canonical_int(answer: str | None) -> int | None:
    if answer is None:
        return None
    s = answer.strip().replace("−", "-")
    if not _INT_RE.match(s):
        return None
    return int(s)


def reward(problem: Problem, gen: Sequence[int] | str,
           table: TokenTable | None = None) -> RewardBreakdown:
    boxed_text = extract_boxed(gen, table)
    if boxed_text is None:
        return RewardBreakdown(False, False, 0.0)
    got = canonical_int(boxed_text)
    correct = got is not None and got == canonical_int(problem.answer)
    return RewardBreakdown(True, correct, 1.0 if correct else 0.1)


def answer_tokens(value: int | str, table: TokenTable | None = None) -> list[int]:
    """Token ids of ``\\boxed{value}</s>``."""
    table = table or default_table()
    return [table.box_open_id, *table.encode(str(value)), table.box_close_id, table.eos_id]
