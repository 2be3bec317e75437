"""Synthetic multi-solution derivation tasks with programmatic rewards.

Two task families are provided:

* SUMPATH: the prompt is ``SUM <N> :`` and a solution is a sequence of addend
  tokens summing to N, each addend drawn from a fixed part set. Every
  composition of N is a distinct correct solution.
* ARITH: the prompt is ``TARGET <t> FROM <a> <b> [<c>] :`` and a solution is a
  sequence of derivation lines ``<a> <op> <b> = <c>`` (five tokens each, op in
  {+, -, *}) followed by ``ANSWER <v>``. Each line consumes two available
  values and makes its result available.

Rewards are strictly positive so their logarithms are always finite: a floor
``reward_floor`` is paid to every terminated sequence and correct sequences
earn up to 1. The SHAPED mode scales the correctness bonus by the fraction of
arithmetically valid derivation lines.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from pathlib import Path

import numpy as np

from .core import (
    Problem,
    TaskKind,
    Vocab,
    decode,
    encode,
    format_rational,
    make_vocab,
    read_jsonl,
    write_jsonl,
)

ARITH_OPS = ("+", "-", "*")
ARITH_KEYWORDS = ("TARGET", "FROM", ":", "ANSWER") + ARITH_OPS + ("=",)
ENUMERATION_CAP = 10_000_000
MAKE_PROBLEM_RETRIES = 200


class Unsatisfiable(RuntimeError):
    """No multi-solution instance exists within the configured ranges."""


class SpaceTooLarge(ValueError):
    """The terminal space exceeds the exact-enumeration budget."""


class RewardMode(str, Enum):
    TERMINAL = "TERMINAL"
    SHAPED = "SHAPED"


class AnswerState(str, Enum):
    NONE = "NONE"
    CORRECT = "CORRECT"
    WRONG = "WRONG"


@dataclass(frozen=True)
class TaskConfig:
    """Generation and reward settings for one task family.

    Attributes:
        task_kind: SUMPATH or ARITH.
        value_range: inclusive bounds for targets and operands.
        max_parts: maximum addend count (SUMPATH) or derivation lines (ARITH).
        max_part: largest addend value allowed in SUMPATH solutions.
        reward_floor: strictly positive reward paid to every terminal.
        reward_mode: TERMINAL scores the final answer only; SHAPED also scales
            by the valid-step fraction.
    """

    task_kind: TaskKind
    value_range: tuple[int, int] = (2, 9)
    max_parts: int = 4
    max_part: int = 3
    reward_floor: float = 1e-4
    reward_mode: RewardMode = RewardMode.SHAPED

    def __post_init__(self) -> None:
        lo, hi = self.value_range
        if not (isinstance(lo, int) and isinstance(hi, int) and 1 <= lo <= hi):
            raise ValueError("value_range must be integer bounds with 1 <= lo <= hi")
        if not 0.0 < self.reward_floor <= 0.01:
            raise ValueError("reward_floor must lie in (0, 0.01]")
        if self.max_parts < 2:
            raise ValueError("max_parts must be at least 2")
        if self.task_kind is TaskKind.SUMPATH and not 1 <= self.max_part <= hi:
            raise ValueError("max_part must lie in [1, value_range hi]")


@dataclass(frozen=True)
class StepVerdict:
    """Per-prefix derivation audit: line counts plus the final-answer state."""

    valid_steps: int
    total_steps: int
    answer_state: AnswerState

    def __post_init__(self) -> None:
        if self.valid_steps > self.total_steps:
            raise ValueError("valid_steps cannot exceed total_steps")


def build_vocab(cfg: TaskConfig) -> Vocab:
    """Token inventory for a task family: keywords, number literals, stop symbol.

    SUMPATH carries numbers 1..hi; ARITH carries 0..hi so subtraction lines
    can reach zero. Number coverage bounds which derivation values are
    expressible at all.
    """
    _, hi = cfg.value_range
    if cfg.task_kind is TaskKind.SUMPATH:
        tokens = ["SUM", ":"] + [str(i) for i in range(1, hi + 1)]
    else:
        tokens = list(ARITH_KEYWORDS) + [str(i) for i in range(0, hi + 1)]
    return make_vocab(tokens)


def _sumpath_compositions(target: int, parts: tuple[int, ...], max_len: int) -> list[tuple[int, ...]]:
    """All ordered part sequences summing to target, at most max_len long."""
    out: list[tuple[int, ...]] = []

    def rec(remaining: int, acc: tuple[int, ...]) -> None:
        if remaining == 0:
            if acc:
                out.append(acc)
            return
        if len(acc) == max_len:
            return
        for p in parts:
            if p <= remaining:
                rec(remaining - p, acc + (p,))

    rec(target, ())
    return out


def _arith_derivations(
    operands: tuple[int, ...], target: int, max_lines: int, value_hi: int
) -> list[tuple[str, ...]]:
    """All valid derivations reaching the target, as token-string sequences.

    A derivation uses one to max_lines lines, every line consumes two distinct
    available values, every intermediate stays within [0, value_hi] so it is
    expressible, and the last line's result equals the target, followed by
    ``ANSWER <target>``.
    """
    results: list[tuple[str, ...]] = []

    def rec(avail: tuple[int, ...], lines: tuple[str, ...], n_lines: int, last: int | None) -> None:
        if last == target and n_lines >= 1:
            results.append(lines + ("ANSWER", str(target)))
        if n_lines == max_lines:
            return
        for i, j in itertools.permutations(range(len(avail)), 2):
            a, b = avail[i], avail[j]
            rest = tuple(v for k, v in enumerate(avail) if k not in (i, j))
            for op in ARITH_OPS:
                c = _apply_op(a, op, b)
                if c is None or not 0 <= c <= value_hi:
                    continue
                line = (str(a), op, str(b), "=", str(c))
                rec(rest + (c,), lines + line, n_lines + 1, c)

    rec(tuple(operands), (), 0, None)
    # duplicate line sequences can arise from equal operands at different positions
    seen: set[tuple[str, ...]] = set()
    unique = []
    for seq in results:
        if seq not in seen:
            seen.add(seq)
            unique.append(seq)
    return unique


def _apply_op(a: int, op: str, b: int) -> int | None:
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    return None


def enumerate_solutions(problem: Problem, cfg: TaskConfig, vocab: Vocab) -> list[tuple[int, ...]]:
    """Fully valid correct solutions as generated-token sequences (stop symbol excluded).

    For SUMPATH these are the compositions of the target; for ARITH the
    derivations whose lines are all valid and whose final line produces the
    answered target. Bare ``ANSWER <t>`` guesses are correct under the reward
    but are not derivations and are not listed. Output order is deterministic:
    shortest first, then lexicographic by token id.
    """
    if problem.task_kind is TaskKind.SUMPATH:
        seqs = [
            tuple(vocab.token_id(str(p)) for p in comp)
            for comp in _sumpath_compositions(
                int(problem.target), problem.operands, problem.max_solution_len
            )
        ]
    else:
        max_lines = max(1, (problem.max_solution_len - 2) // 5)
        _, hi = cfg.value_range
        seqs = [
            tuple(vocab.token_id(t) for t in deriv)
            for deriv in _arith_derivations(problem.operands, int(problem.target), max_lines, hi)
        ]
    return sorted(seqs, key=lambda s: (len(s), s))


def make_problem(cfg: TaskConfig, seed: int) -> Problem:
    """Draw a problem instance with at least two distinct correct solutions.

    Deterministic in (cfg, seed). Retries rejected draws a bounded number of
    times and raises Unsatisfiable when the configured ranges cannot produce a
    multi-solution instance.
    """
    rng = np.random.default_rng(seed)
    vocab = build_vocab(cfg)
    lo, hi = cfg.value_range
    for _ in range(MAKE_PROBLEM_RETRIES):
        if cfg.task_kind is TaskKind.SUMPATH:
            target = int(rng.integers(lo, hi + 1))
            parts = tuple(range(1, cfg.max_part + 1))
            max_len = min(target, cfg.max_parts)
            candidate = Problem(
                task_kind=TaskKind.SUMPATH,
                prompt_tokens=tuple(encode(f"SUM {target} :", vocab)),
                target=Fraction(target),
                operands=parts,
                max_solution_len=max_len,
            )
        else:
            n_operands = int(rng.integers(2, 4))
            operands = tuple(int(rng.integers(max(1, lo), hi + 1)) for _ in range(n_operands))
            target = _random_arith_target(rng, operands, lo, hi)
            if target is None:
                continue
            prompt = "TARGET " + str(target) + " FROM " + " ".join(str(v) for v in operands) + " :"
            candidate = Problem(
                task_kind=TaskKind.ARITH,
                prompt_tokens=tuple(encode(prompt, vocab)),
                target=Fraction(target),
                operands=operands,
                max_solution_len=5 * (n_operands - 1) + 2,
            )
        if len(enumerate_solutions(candidate, cfg, vocab)) >= 2:
            return candidate
    raise Unsatisfiable(f"no multi-solution {cfg.task_kind.value} instance found in {cfg.value_range}")


def _random_arith_target(rng: np.random.Generator, operands: tuple[int, ...], lo: int, hi: int) -> int | None:
    """Fold the operands in a random order with random ops; None if any value leaves [0, hi]."""
    order = [operands[i] for i in rng.permutation(len(operands))]
    acc = order[0]
    for nxt in order[1:]:
        op = ARITH_OPS[int(rng.integers(0, len(ARITH_OPS)))]
        acc = _apply_op(acc, op, nxt)
        if acc is None or not 0 <= acc <= hi:
            return None
    if acc < lo:
        return None
    return acc


def _generated_region(problem: Problem, prefix: tuple[int, ...] | list[int], vocab: Vocab) -> list[str]:
    """Decode the generated tokens of a prompt-consistent prefix, cut at the first stop symbol."""
    prefix = tuple(prefix)
    k = problem.prompt_len
    if prefix[:k] != problem.prompt_tokens:
        raise ValueError("prefix does not start with the problem prompt")
    gen: list[str] = []
    for tid in prefix[k:]:
        if tid == vocab.stop_id:
            break
        gen.append(vocab.tokens[tid])
    return gen


def verify_prefix(problem: Problem, prefix: tuple[int, ...] | list[int], vocab: Vocab) -> StepVerdict:
    """Audit a prompt-consistent prefix, treated as if terminated.

    SUMPATH: every generated token is one step; a step is valid when it is an
    allowed part and the running sum has not overshot the target. The answer
    state is CORRECT when all tokens are parts and they sum exactly to the
    target, NONE for an empty generation, WRONG otherwise.

    ARITH: complete five-token chunks before the first ANSWER marker are
    steps; a step is valid when it matches ``<a> <op> <b> = <c>``, the
    arithmetic holds, and both inputs are available (each line consumes its
    inputs and releases its result). The answer state compares the value after
    the last ANSWER marker with the target.
    """
    gen = _generated_region(problem, prefix, vocab)
    if problem.task_kind is TaskKind.SUMPATH:
        return _verify_sumpath(problem, gen)
    return _verify_arith(problem, gen)


def _verify_sumpath(problem: Problem, gen: list[str]) -> StepVerdict:
    parts = set(problem.operands)
    target = int(problem.target)
    running = 0
    valid = 0
    ok = bool(gen)
    for unit in gen:
        is_part = unit.isdigit() and int(unit) in parts
        if is_part:
            running += int(unit)
            if running <= target:
                valid += 1
            else:
                ok = False
        else:
            ok = False
    if not gen:
        state = AnswerState.NONE
    elif ok and running == target:
        state = AnswerState.CORRECT
    else:
        state = AnswerState.WRONG
    return StepVerdict(valid_steps=valid, total_steps=len(gen), answer_state=state)


def _verify_arith(problem: Problem, gen: list[str]) -> StepVerdict:
    if "ANSWER" in gen:
        first = gen.index("ANSWER")
        body, answer_region = gen[:first], gen[first:]
    else:
        body, answer_region = gen, []

    avail = list(problem.operands)
    total = 0
    valid = 0
    for i in range(0, len(body) - len(body) % 5, 5):
        a_s, op, b_s, eq, c_s = body[i : i + 5]
        total += 1
        if not (a_s.lstrip("-").isdigit() and b_s.lstrip("-").isdigit() and c_s.lstrip("-").isdigit()):
            continue
        if op not in ARITH_OPS or eq != "=":
            continue
        a, b, c = int(a_s), int(b_s), int(c_s)
        if _apply_op(a, op, b) != c:
            continue
        if a == b:
            if avail.count(a) < 2:
                continue
        elif a not in avail or b not in avail:
            continue
        avail.remove(a)
        avail.remove(b)
        avail.append(c)
        valid += 1

    if not answer_region:
        state = AnswerState.NONE
    else:
        value = _last_answer_value(gen)
        state = AnswerState.CORRECT if value == problem.target else AnswerState.WRONG
    return StepVerdict(valid_steps=valid, total_steps=total, answer_state=state)


def _last_answer_value(units: list[str]) -> Fraction | None:
    value = None
    for i, unit in enumerate(units):
        if unit == "ANSWER" and i + 1 < len(units):
            try:
                value = Fraction(units[i + 1])
            except (ValueError, ZeroDivisionError):
                value = None
    return value


def reward(problem: Problem, prefix: tuple[int, ...] | list[int], cfg: TaskConfig, vocab: Vocab) -> float:
    """Strictly positive reward of a prefix treated as terminated.

    TERMINAL mode: floor + (1 - floor) * [answer correct].
    SHAPED mode: floor + (1 - floor) * (valid/max(total,1)) * [answer correct].
    """
    verdict = verify_prefix(problem, prefix, vocab)
    eps = cfg.reward_floor
    correct = verdict.answer_state is AnswerState.CORRECT
    if cfg.reward_mode is RewardMode.TERMINAL:
        return eps + (1.0 - eps) * float(correct)
    frac = verdict.valid_steps / max(verdict.total_steps, 1)
    return eps + (1.0 - eps) * frac * float(correct)


def enumerate_terminals(
    problem: Problem, cfg: TaskConfig, vocab: Vocab
) -> list[tuple[tuple[int, ...], float]]:
    """Every terminated sequence up to max_solution_len with its reward.

    Returns (generated tokens, reward) pairs, the stop symbol left implicit,
    ordered by length then token ids. The reward sum over the list is the
    partition function Z. Raises SpaceTooLarge above the enumeration budget.
    """
    body_ids = [i for i in range(vocab.size) if i != vocab.stop_id]
    n_body = len(body_ids)
    count = 0
    term = 1
    for _ in range(problem.max_solution_len + 1):
        count += term
        term *= n_body
        if count > ENUMERATION_CAP:
            raise SpaceTooLarge(
                f"terminal space exceeds {ENUMERATION_CAP} sequences for "
                f"max_solution_len={problem.max_solution_len}, vocab={vocab.size}"
            )
    out: list[tuple[tuple[int, ...], float]] = []
    prompt = problem.prompt_tokens
    for length in range(problem.max_solution_len + 1):
        for combo in itertools.product(body_ids, repeat=length):
            out.append((combo, reward(problem, prompt + combo, cfg, vocab)))
    return out


def partition_function(terminals: list[tuple[tuple[int, ...], float]]) -> float:
    return float(sum(r for _, r in terminals))


def parse_final_answer(text: str) -> Fraction | None:
    """Value after the last ANSWER marker as an exact rational; None if absent or unparseable."""
    units = text.split()
    return _last_answer_value(units)


def extract_answer(problem: Problem, gen_tokens: tuple[int, ...] | list[int], vocab: Vocab) -> Fraction | None:
    """Task-aware final answer of a generated sequence.

    ARITH reads the value after the last ANSWER marker. SUMPATH has no marker:
    the answer is the sum of the generated tokens, provided every token is an
    allowed part. Returns None when no answer can be read.
    """
    gen = []
    for tid in gen_tokens:
        if tid == vocab.stop_id:
            break
        gen.append(vocab.tokens[tid])
    if problem.task_kind is TaskKind.ARITH:
        return _last_answer_value(gen)
    parts = set(problem.operands)
    if not gen or any(not (u.isdigit() and int(u) in parts) for u in gen):
        return None
    return Fraction(sum(int(u) for u in gen))


def problem_record(problem: Problem, problem_id: int, vocab: Vocab) -> dict:
    """JSON-ready record for one problem."""
    return {
        "id": problem_id,
        "task_kind": problem.task_kind.value,
        "prompt": decode(problem.prompt_tokens, vocab),
        "target": format_rational(problem.target),
        "operands": list(problem.operands),
        "max_solution_len": problem.max_solution_len,
    }


def problem_from_record(rec: dict, vocab: Vocab) -> Problem:
    return Problem(
        task_kind=TaskKind(rec["task_kind"]),
        prompt_tokens=tuple(encode(rec["prompt"], vocab)),
        target=Fraction(rec["target"]),
        operands=tuple(int(v) for v in rec["operands"]),
        max_solution_len=int(rec["max_solution_len"]),
    )


def write_problems(path: str | Path, problems: list[Problem], vocab: Vocab) -> None:
    write_jsonl(path, (problem_record(p, i, vocab) for i, p in enumerate(problems)))


def read_problems(path: str | Path, vocab: Vocab) -> list[Problem]:
    return [problem_from_record(rec, vocab) for rec in read_jsonl(path)]
