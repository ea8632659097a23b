"""Synthetic copy / reverse / addition tasks with a fixed small vocabulary.

Token layout: digits 0-9 are ids 0-9, ``+`` is 10, ``=`` is 11, extra
symbols for copy/reverse start at 12, and the two highest ids are EOS and
the mask symbol. Addition operands and sums are written least-significant
digit first so that carries flow left to right.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from ..data import SequenceDataset

PLUS = 10
EQUALS = 11
FIRST_EXTRA_SYMBOL = 12
PAIR_BASE = 16  # "pairs" operand format: token PAIR_BASE + 10*a_j + b_j


def special_ids(vocab_size: int) -> tuple[int, int]:
    """(eos_token_id, mask_token_id) for a vocabulary size."""
    return vocab_size - 2, vocab_size - 1


@dataclass(frozen=True)
class TaskSpec:
    kind: Literal["copy", "reverse", "addition"] = "addition"
    vocab_size: int = 128
    num_digits: int = 8  # addition operand width
    min_len: int = 8  # copy / reverse content length range
    max_len: int = 16
    alphabet_size: int = 10
    carry_chain_prob: float = 0.0  # addition: chance a digit pair is forced to sum to 9
    operand_format: Literal["pairs", "interleaved", "separate"] = "pairs"
    train_size: int = 20_000
    heldout_size: int = 500
    seed: int = 0

    def symbols(self) -> list[int]:
        extra = self.alphabet_size - 10
        return list(range(min(self.alphabet_size, 10))) + list(range(FIRST_EXTRA_SYMBOL, FIRST_EXTRA_SYMBOL + max(extra, 0)))

    def validate(self) -> None:
        if self.kind not in ("copy", "reverse", "addition"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        eos, _ = special_ids(self.vocab_size)
        if self.kind == "addition":
            highest = PAIR_BASE + 99 if self.operand_format == "pairs" else EQUALS
        else:
            highest = max(max(self.symbols()), EQUALS)
        if highest >= eos:
            raise ValueError(f"vocab_size {self.vocab_size} too small for task {self.kind!r}")
        if self.kind == "addition" and self.num_digits < 1:
            raise ValueError("num_digits must be >= 1")
        if self.kind != "addition" and not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if not 0.0 <= self.carry_chain_prob <= 1.0:
            raise ValueError("carry_chain_prob must lie in [0, 1]")
        if self.operand_format not in ("pairs", "interleaved", "separate"):
            raise ValueError(f"unknown operand_format {self.operand_format!r}")

    @property
    def max_prompt_len(self) -> int:
        if self.kind != "addition":
            return self.max_len + 1
        n = self.num_digits
        return {"pairs": n + 1, "interleaved": 2 * n + 1, "separate": 2 * n + 2}[self.operand_format]

    @property
    def max_answer_len(self) -> int:
        """Longest answer including its EOS."""
        return self.num_digits + 2 if self.kind == "addition" else self.max_len + 1


def addition_example(
    a: int, b: int, num_digits: int, eos: int, operand_format: str = "separate"
) -> tuple[np.ndarray, np.ndarray]:
    """Prompt and EOS-terminated answer for ``a + b`` in least-significant-first digits.

    ``separate`` writes ``a + b =``, ``interleaved`` alternates the operand
    digits, and ``pairs`` spends one token per aligned digit pair.
    """
    def digits(x: int, width: int | None = None) -> list[int]:
        s = str(x) if width is None else str(x).zfill(width)
        return [int(c) for c in reversed(s)]

    da, db = digits(a, num_digits), digits(b, num_digits)
    if operand_format == "pairs":
        prompt = [PAIR_BASE + 10 * x + y for x, y in zip(da, db)] + [EQUALS]
    elif operand_format == "interleaved":
        prompt = [d for pair in zip(da, db) for d in pair] + [EQUALS]
    elif operand_format == "separate":
        prompt = da + [PLUS] + db + [EQUALS]
    else:
        raise ValueError(f"unknown operand_format {operand_format!r}")
    answer = digits(a + b) + [eos]
    return np.array(prompt, dtype=np.int64), np.array(answer, dtype=np.int64)


def render_prompt(prompt, task: TaskSpec) -> str:
    """Human-readable prompt, e.g. ``23+45=`` for an addition example."""
    toks = [int(t) for t in prompt]
    if task.kind == "addition":
        n = task.num_digits
        if task.operand_format == "pairs":
            da = [(t - PAIR_BASE) // 10 for t in toks[:n]]
            db = [(t - PAIR_BASE) % 10 for t in toks[:n]]
        elif task.operand_format == "interleaved":
            da, db = toks[0 : 2 * n : 2], toks[1 : 2 * n : 2]
        else:
            da, db = toks[:n], toks[n + 1 : 2 * n + 1]
        a = "".join(str(d) for d in reversed(da))
        b = "".join(str(d) for d in reversed(db))
        return f"{a}+{b}="
    return " ".join(str(t) for t in toks)


def render_answer(answer, task: TaskSpec) -> str:
    """Answer text up to the first EOS; addition digits are flipped back to normal order."""
    eos, _ = special_ids(task.vocab_size)
    toks = []
    for t in answer:
        if int(t) == eos:
            break
        toks.append(int(t))
    if task.kind == "addition":
        return "".join(str(d) if d < 10 else "?" for d in reversed(toks))
    return " ".join(str(t) for t in toks)


def _sample_addition(task: TaskSpec, rng: np.random.Generator) -> tuple[int, int]:
    n = task.num_digits
    a_d = rng.integers(0, 10, size=n)
    b_d = rng.integers(0, 10, size=n)
    forced = rng.random(n) < task.carry_chain_prob
    b_d = np.where(forced, 9 - a_d, b_d)
    to_int = lambda ds: int("".join(str(int(d)) for d in reversed(ds)))  # noqa: E731
    return to_int(a_d), to_int(b_d)


def _make_example(task: TaskSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    eos, _ = special_ids(task.vocab_size)
    if task.kind == "addition":
        a, b = _sample_addition(task, rng)
        return addition_example(a, b, task.num_digits, eos, task.operand_format)
    syms = np.array(task.symbols())
    length = int(rng.integers(task.min_len, task.max_len + 1))
    content = syms[rng.integers(0, len(syms), size=length)]
    prompt = np.concatenate([content, [EQUALS]]).astype(np.int64)
    body = content if task.kind == "copy" else content[::-1]
    return prompt, np.concatenate([body, [eos]]).astype(np.int64)


def gen_dataset(task: TaskSpec) -> tuple[SequenceDataset, SequenceDataset]:
    """Deterministic train / held-out splits with no prompt shared between them."""
    task.validate()
    rng = np.random.default_rng(task.seed)
    eos, _ = special_ids(task.vocab_size)
    want = task.train_size + task.heldout_size
    seen: set[bytes] = set()
    prompts, answers = [], []
    attempts = 0
    while len(prompts) < want:
        attempts += 1
        if attempts > 20 * want + 1000:
            raise ValueError(f"could not draw {want} distinct prompts for task {task}")
        p, a = _make_example(task, rng)
        key = p.tobytes()
        if key in seen:
            continue
        seen.add(key)
        prompts.append(p)
        answers.append(a)
    train = SequenceDataset(prompts[: task.train_size], answers[: task.train_size], eos)
    held = SequenceDataset(prompts[task.train_size :], answers[task.train_size :], eos)
    return train, held
