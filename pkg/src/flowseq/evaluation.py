"""Accuracy and diversity metrics: greedy accuracy, pass@k, ROUGE-L, distinct counting.

Two solutions count as distinct when the ROUGE-L F1 over their reasoning-step
tokens falls below 0.7; the final-answer segment is excluded from similarity
so diversity reflects the derivation, not the shared answer. Distinct counting
keeps solutions greedily in sampling order, which makes the count order
dependent; the report records that rule.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .core import Problem, Solution, TaskKind, Vocab, decode
from .env import extract_answer
from .policy import DecodeCfg, Policy, _sample_with_rng, greedy_decode, trajectory_body

DISTINCT_THRESHOLD = 0.7
ANSWER_ROUNDING = 6


class KTooLarge(ValueError):
    """k exceeds the number of recorded samples."""


def rouge_l(a, b) -> float:
    """LCS-based F1 similarity of two token sequences; 0 when either is empty."""
    a = list(a)
    b = list(b)
    if not a or not b:
        return 0.0
    # O(|a||b|) dp over prefix pairs, rolling one row
    prev = np.zeros(len(b) + 1, dtype=np.int64)
    for x in a:
        cur = np.zeros_like(prev)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    lcs = int(prev[-1])
    if lcs == 0:
        return 0.0
    p = lcs / len(a)
    r = lcs / len(b)
    return 2.0 * p * r / (p + r)


def distinct_correct_count(solutions: list[Solution], threshold: float = DISTINCT_THRESHOLD) -> int:
    """Correct solutions kept greedily in order; a newcomer must differ from every kept one."""
    kept: list[Solution] = []
    for sol in solutions:
        if not sol.correct:
            continue
        if all(rouge_l(sol.step_tokens, other.step_tokens) < threshold for other in kept):
            kept.append(sol)
    return len(kept)


def pass_at_k(correctness: list[list[bool]] | np.ndarray, k: int) -> float:
    """Fraction of rows whose first k entries contain at least one success."""
    rows = [list(row) for row in correctness]
    if k < 1:
        raise KTooLarge("k must be at least 1")
    short = [len(r) for r in rows if len(r) < k]
    if short:
        raise KTooLarge(f"k={k} but a row has only {min(short)} samples")
    if not rows:
        return 0.0
    return float(np.mean([any(r[:k]) for r in rows]))


def answers_match(answer: Fraction | None, target: Fraction) -> bool:
    """Exact-rational equality after rounding both sides to six decimal places."""
    if answer is None:
        return False
    return round(answer, ANSWER_ROUNDING) == round(target, ANSWER_ROUNDING)


def solution_from_body(
    problem: Problem, body: tuple[int, ...], vocab: Vocab
) -> Solution:
    """Grade one generated body and split off its reasoning-step tokens."""
    answer = extract_answer(problem, body, vocab)
    correct = answers_match(answer, problem.target)
    steps = body
    if problem.task_kind is TaskKind.ARITH:
        # similarity looks at derivation lines only, not the answer segment
        marker = vocab.token_id("ANSWER")
        for i in range(len(body) - 1, -1, -1):
            if body[i] == marker:
                steps = body[:i]
                break
    return Solution(
        text=decode(body, vocab),
        final_answer=answer,
        correct=correct,
        step_tokens=tuple(steps),
    )


@dataclass
class ProblemEval:
    """Everything measured for one problem."""

    problem_id: int
    greedy_correct: bool
    sample_correctness: list[bool]
    distinct_correct: int

    @property
    def n_correct(self) -> int:
        return sum(self.sample_correctness)


@dataclass
class EvalReport:
    """Per-problem measurements plus their aggregates.

    pass_at[k] is non-decreasing in k, and each problem's distinct_correct is
    bounded by its correct-sample count; both are consequences of the
    definitions, not post-hoc clamps.
    """

    k: int
    rows: list[ProblemEval] = field(default_factory=list)
    clustering: str = "greedy-in-sampling-order"

    @property
    def greedy_accuracy(self) -> float:
        if not self.rows:
            return 0.0
        return float(np.mean([r.greedy_correct for r in self.rows]))

    @property
    def pass_at(self) -> dict[int, float]:
        matrix = [r.sample_correctness for r in self.rows]
        return {kk: pass_at_k(matrix, kk) for kk in range(1, self.k + 1)}

    @property
    def mean_distinct_correct(self) -> float:
        if not self.rows:
            return 0.0
        return float(np.mean([r.distinct_correct for r in self.rows]))

    def aggregate_dict(self) -> dict:
        return {
            "clustering": self.clustering,
            "greedy_accuracy": self.greedy_accuracy,
            "k": self.k,
            "mean_distinct_correct": self.mean_distinct_correct,
            "n_problems": len(self.rows),
            "pass_at": {str(kk): v for kk, v in self.pass_at.items()},
        }

    def write_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            json.dump(self.aggregate_dict(), fh, sort_keys=True, indent=2)
            fh.write("\n")

    def write_csv(self, path: str | Path) -> None:
        import csv

        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["id", "greedy_correct", "n_correct", "distinct_correct", "pass_bits"])
            for r in self.rows:
                bits = "".join("1" if c else "0" for c in r.sample_correctness)
                writer.writerow([r.problem_id, int(r.greedy_correct), r.n_correct,
                                 r.distinct_correct, bits])


def _eval_one(
    policy: Policy,
    problem: Problem,
    vocab: Vocab,
    k: int,
    decode_cfg: DecodeCfg,
    seed: int,
    index: int,
    prepend_greedy: bool,
) -> ProblemEval:
    rng = np.random.default_rng([seed, index])
    greedy = greedy_decode(policy, problem, decode_cfg.max_new_tokens)
    greedy_sol = solution_from_body(problem, trajectory_body(greedy), vocab)
    n_draws = k - 1 if prepend_greedy else k
    sampled = [
        solution_from_body(problem, trajectory_body(_sample_with_rng(policy, problem, decode_cfg, rng)), vocab)
        for _ in range(n_draws)
    ]
    solutions = [greedy_sol] + sampled if prepend_greedy else sampled
    return ProblemEval(
        problem_id=index,
        greedy_correct=greedy_sol.correct,
        sample_correctness=[s.correct for s in solutions],
        distinct_correct=distinct_correct_count(solutions),
    )


def evaluate(
    policy: Policy,
    problems: list[Problem],
    vocab: Vocab,
    k: int = 8,
    decode_cfg: DecodeCfg | None = None,
    seed: int = 0,
    prepend_greedy: bool = False,
    workers: int = 1,
) -> EvalReport:
    """Greedy decode plus k stochastic samples per problem.

    Each problem draws from its own generator seeded by (seed, index), so the
    report is identical for any worker count. With prepend_greedy the greedy
    solution stands in as sample 0, which makes greedy accuracy a lower bound
    on every pass@k.
    """
    if not problems:
        raise ValueError("no problems to evaluate")
    decode_cfg = decode_cfg or DecodeCfg()
    args = [(policy, p, vocab, k, decode_cfg, seed, i, prepend_greedy)
            for i, p in enumerate(problems)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_eval_one_star, args))
    else:
        rows = [_eval_one(*a) for a in args]
    report = EvalReport(k=k)
    report.rows.extend(rows)
    return report


def _eval_one_star(packed) -> ProblemEval:
    return _eval_one(*packed)
