from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest

from flowseq.core import TaskKind, decode, encode
from flowseq.env import (
    AnswerState,
    RewardMode,
    SpaceTooLarge,
    TaskConfig,
    Unsatisfiable,
    build_vocab,
    enumerate_solutions,
    enumerate_terminals,
    extract_answer,
    make_problem,
    parse_final_answer,
    partition_function,
    read_problems,
    reward,
    verify_prefix,
    write_problems,
)


def sumpath_cfg(hi: int = 6, max_parts: int = 4, max_part: int = 3,
                mode: RewardMode = RewardMode.TERMINAL) -> TaskConfig:
    return TaskConfig(task_kind=TaskKind.SUMPATH, value_range=(2, hi),
                      max_parts=max_parts, max_part=max_part, reward_mode=mode)


def arith_cfg(hi: int = 12, mode: RewardMode = RewardMode.SHAPED) -> TaskConfig:
    return TaskConfig(task_kind=TaskKind.ARITH, value_range=(2, hi), reward_mode=mode)


def compositions(n: int, k: int, m: int) -> int:
    """Number of ordered part sequences of n with at most k parts, each in 1..m."""
    if n == 0:
        return 1 if k >= 0 else 0
    if k == 0:
        return 0
    return sum(compositions(n - p, k - 1, m) for p in range(1, min(m, n) + 1))


def test_config_validation():
    with pytest.raises(ValueError):
        TaskConfig(task_kind=TaskKind.SUMPATH, reward_floor=0.0)
    with pytest.raises(ValueError):
        TaskConfig(task_kind=TaskKind.SUMPATH, reward_floor=0.5)
    with pytest.raises(ValueError):
        TaskConfig(task_kind=TaskKind.SUMPATH, max_parts=1)
    with pytest.raises(ValueError):
        TaskConfig(task_kind=TaskKind.SUMPATH, value_range=(2, 4), max_part=9)


def test_sumpath_solution_count_matches_composition_oracle():
    for target in (2, 3, 4, 5):
        for max_part in (2, 3):
            cfg = sumpath_cfg(hi=6, max_parts=4, max_part=max_part)
            vocab = build_vocab(cfg)
            problem = _fixed_sumpath_problem(cfg, vocab, target)
            sols = enumerate_solutions(problem, cfg, vocab)
            want = compositions(target, problem.max_solution_len, max_part)
            assert len(sols) == want, (target, max_part)


def _fixed_sumpath_problem(cfg: TaskConfig, vocab, target: int):
    from flowseq.core import Problem

    prompt = tuple(encode(f"SUM {target} :", vocab))
    return Problem(task_kind=TaskKind.SUMPATH, prompt_tokens=prompt,
                   target=Fraction(target), operands=tuple(range(1, cfg.max_part + 1)),
                   max_solution_len=min(target, cfg.max_parts))


def test_sumpath_verify_prefix_counts_steps():
    cfg = sumpath_cfg(hi=6, max_part=3)
    vocab = build_vocab(cfg)
    problem = _fixed_sumpath_problem(cfg, vocab, 5)
    good = problem.prompt_tokens + tuple(encode("2 3", vocab))
    v = verify_prefix(problem, good, vocab)
    assert (v.valid_steps, v.total_steps) == (2, 2)
    assert v.answer_state is AnswerState.CORRECT
    # overshoot: second step pushes the running sum past the target
    over = problem.prompt_tokens + tuple(encode("3 3", vocab))
    v2 = verify_prefix(problem, over, vocab)
    assert (v2.valid_steps, v2.total_steps) == (1, 2)
    assert v2.answer_state is AnswerState.WRONG
    empty = verify_prefix(problem, problem.prompt_tokens, vocab)
    assert empty.answer_state is AnswerState.NONE


def test_reward_formulas_by_hand():
    cfg_t = sumpath_cfg(mode=RewardMode.TERMINAL)
    cfg_s = sumpath_cfg(mode=RewardMode.SHAPED)
    vocab = build_vocab(cfg_t)
    problem = _fixed_sumpath_problem(cfg_t, vocab, 5)
    eps = cfg_t.reward_floor
    correct = problem.prompt_tokens + tuple(encode("2 3", vocab))
    wrong = problem.prompt_tokens + tuple(encode("3 3", vocab))
    assert reward(problem, correct, cfg_t, vocab) == pytest.approx(eps + (1 - eps))
    assert reward(problem, wrong, cfg_t, vocab) == pytest.approx(eps)
    assert reward(problem, correct, cfg_s, vocab) == pytest.approx(eps + (1 - eps) * 1.0)
    # shaped mode scales by the valid-step fraction but only pays on a correct answer
    assert reward(problem, wrong, cfg_s, vocab) == pytest.approx(eps)
    assert reward(problem, problem.prompt_tokens, cfg_s, vocab) == pytest.approx(eps)


def test_rewards_strictly_positive_everywhere():
    cfg = sumpath_cfg(hi=4, max_parts=3, max_part=2)
    vocab = build_vocab(cfg)
    problem = make_problem(cfg, seed=0)
    for body, r in enumerate_terminals(problem, cfg, vocab):
        assert r > 0.0


def test_enumerate_terminals_cross_checks_solutions():
    # every enumerated solution appears among terminals with the top reward
    cfg = sumpath_cfg(hi=4, max_parts=3, max_part=2, mode=RewardMode.TERMINAL)
    vocab = build_vocab(cfg)
    problem = make_problem(cfg, seed=1)
    terminals = dict(enumerate_terminals(problem, cfg, vocab))
    sols = enumerate_solutions(problem, cfg, vocab)
    top = max(terminals.values())
    assert sols, "multi-solution guarantee"
    for body in sols:
        assert terminals[body] == pytest.approx(top)
    n_top = sum(1 for r in terminals.values() if r == pytest.approx(top))
    assert n_top == len(sols)


def test_partition_function_hand_case():
    # target 3, parts {1,2}, <=3 steps: solutions {1 2, 2 1, 1 1 1}
    cfg = sumpath_cfg(hi=3, max_parts=3, max_part=2, mode=RewardMode.TERMINAL)
    vocab = build_vocab(cfg)
    problem = _fixed_sumpath_problem(cfg, vocab, 3)
    terminals = enumerate_terminals(problem, cfg, vocab)
    sols = enumerate_solutions(problem, cfg, vocab)
    assert {decode(b, vocab) for b in sols} == {"1 2", "2 1", "1 1 1"}
    n = len(terminals)
    eps = cfg.reward_floor
    want_z = 3 * (eps + (1 - eps)) + (n - 3) * eps
    assert partition_function(terminals) == pytest.approx(want_z)


def test_enumeration_count_is_geometric_series():
    cfg = sumpath_cfg(hi=3, max_parts=3, max_part=2)
    vocab = build_vocab(cfg)
    problem = _fixed_sumpath_problem(cfg, vocab, 3)
    # bodies draw on all non-stop tokens: sum of b^l for l = 0..max_len
    b = vocab.size - 1
    want = sum(b ** l for l in range(problem.max_solution_len + 1))
    assert len(enumerate_terminals(problem, cfg, vocab)) == want


def test_space_too_large_guard():
    cfg = TaskConfig(task_kind=TaskKind.ARITH, value_range=(2, 30))
    vocab = build_vocab(cfg)
    problem = make_problem(cfg, seed=3)
    with pytest.raises(SpaceTooLarge):
        enumerate_terminals(problem, cfg, vocab)


def test_make_problem_deterministic_and_multisolution():
    cfg = sumpath_cfg(hi=5, max_parts=4, max_part=3)
    vocab = build_vocab(cfg)
    a = make_problem(cfg, seed=11)
    b = make_problem(cfg, seed=11)
    assert a == b
    assert len(enumerate_solutions(a, cfg, vocab)) >= 2


def test_make_problem_unsatisfiable():
    # max_part 1 forces a single composition, so no draw has two solutions
    cfg = TaskConfig(task_kind=TaskKind.SUMPATH, value_range=(2, 3),
                     max_parts=4, max_part=1)
    with pytest.raises(Unsatisfiable):
        make_problem(cfg, seed=0)


def test_arith_verify_prefix_semantics():
    cfg = arith_cfg(hi=20)
    vocab = build_vocab(cfg)
    problem = _fixed_arith_problem(cfg, vocab, target=9, operands=(4, 5))
    body = tuple(encode("4 + 5 = 9 ANSWER 9", vocab))
    v = verify_prefix(problem, problem.prompt_tokens + body, vocab)
    assert (v.valid_steps, v.total_steps) == (1, 1)
    assert v.answer_state is AnswerState.CORRECT
    # wrong arithmetic in the line, answer still read from the marker
    bad = tuple(encode("4 + 5 = 8 ANSWER 9", vocab))
    v2 = verify_prefix(problem, problem.prompt_tokens + bad, vocab)
    assert (v2.valid_steps, v2.total_steps) == (0, 1)
    assert v2.answer_state is AnswerState.CORRECT
    # consuming the same operand twice without two copies is invalid
    dup = tuple(encode("4 + 4 = 8 ANSWER 9", vocab))
    v3 = verify_prefix(problem, problem.prompt_tokens + dup, vocab)
    assert v3.valid_steps == 0


def _fixed_arith_problem(cfg: TaskConfig, vocab, target: int, operands: tuple[int, ...]):
    from flowseq.core import Problem

    ops = " ".join(str(v) for v in operands)
    prompt = tuple(encode(f"TARGET {target} FROM {ops} :", vocab))
    return Problem(task_kind=TaskKind.ARITH, prompt_tokens=prompt,
                   target=Fraction(target), operands=operands,
                   max_solution_len=5 * (len(operands) - 1) + 2)


def test_arith_result_reuse_chains():
    cfg = arith_cfg(hi=20)
    vocab = build_vocab(cfg)
    problem = _fixed_arith_problem(cfg, vocab, target=9, operands=(2, 3, 4))
    body = tuple(encode("2 + 3 = 5 5 + 4 = 9 ANSWER 9", vocab))
    v = verify_prefix(problem, problem.prompt_tokens + body, vocab)
    # the first line's result 5 becomes available to the second line
    assert (v.valid_steps, v.total_steps) == (2, 2)
    assert v.answer_state is AnswerState.CORRECT
    # reusing 2 after it was consumed by line one is invalid
    stale = tuple(encode("2 + 3 = 5 2 + 4 = 6 ANSWER 9", vocab))
    v2 = verify_prefix(problem, problem.prompt_tokens + stale, vocab)
    assert (v2.valid_steps, v2.total_steps) == (1, 2)


def test_arith_answer_from_last_marker():
    cfg = arith_cfg(hi=20)
    vocab = build_vocab(cfg)
    problem = _fixed_arith_problem(cfg, vocab, target=9, operands=(4, 5))
    body = tuple(encode("ANSWER 3 ANSWER 9", vocab))
    v = verify_prefix(problem, problem.prompt_tokens + body, vocab)
    assert v.answer_state is AnswerState.CORRECT
    assert extract_answer(problem, body, vocab) == Fraction(9)
    assert parse_final_answer("ANSWER 3 ANSWER 9") == Fraction(9)
    assert parse_final_answer("no marker here") is None


def test_arith_solutions_require_valid_derivations():
    cfg = arith_cfg(hi=20)
    vocab = build_vocab(cfg)
    problem = _fixed_arith_problem(cfg, vocab, target=9, operands=(4, 5))
    sols = enumerate_solutions(problem, cfg, vocab)
    texts = {decode(b, vocab) for b in sols}
    assert "4 + 5 = 9 ANSWER 9" in texts
    # a bare answer guess carries no derivation and is not a reference solution
    assert all("=" in t for t in texts)


def test_extract_answer_sumpath():
    cfg = sumpath_cfg(hi=6, max_part=3)
    vocab = build_vocab(cfg)
    problem = _fixed_sumpath_problem(cfg, vocab, 5)
    assert extract_answer(problem, tuple(encode("2 3", vocab)), vocab) == Fraction(5)
    # non-part tokens mean no readable answer
    assert extract_answer(problem, tuple(encode("SUM 2", vocab)), vocab) is None


def test_problem_file_round_trip(tmp_path):
    cfg = arith_cfg(hi=12)
    vocab = build_vocab(cfg)
    problems = [make_problem(cfg, seed=s) for s in range(5)]
    path = tmp_path / "problems.jsonl"
    write_problems(path, problems, vocab)
    assert read_problems(path, vocab) == problems


def test_problem_generation_spread():
    # draws differ across seeds often enough to form a suite
    cfg = arith_cfg(hi=12)
    seen = {make_problem(cfg, seed=s).prompt_tokens for s in range(20)}
    assert len(seen) >= 10
