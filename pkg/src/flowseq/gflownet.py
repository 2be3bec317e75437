"""Subtrajectory-balance training: losses, replay buffer, and the training loop.

The subtrajectory balance objective sums, over every generated-token index
pair 0 <= i < j <= n (index 0 is the prompt boundary), the squared log-ratio

    log [ R(s_{1:i} sT) * prod_{k=i+1..j} pi(s_k|s_{1:k-1}) * pi(sT|s_{1:j}) ]
      - log [ R(s_{1:j} sT) * pi(sT|s_{1:i}) ]

optionally weighted by lambda^(j-i). Writing S_t for the cumulative token
log-probability and D_t = log R_t - S_t - log pi(sT|s_{1:t}), each term is
(D_i - D_j)^2, which is how it is computed here. At the optimum the terminal
distribution is proportional to the reward, which exact enumeration verifies.

Training follows the sample / score / replay / update loop: draw solutions for
a problem (closing horizon-capped draws with a forced stop), push them into a
FIFO buffer with their prefix rewards cached, then minimize mean subtb over a
replayed batch plus a weighted reference log-likelihood term that anchors the
policy to readable solutions.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, GradTape, Var, adam_step
from .core import Problem, Trajectory, Vocab
from .env import TaskConfig, enumerate_solutions, enumerate_terminals, reward
from .policy import (
    DecodeCfg,
    Policy,
    PolicyKind,
    _sample_with_rng,
    batched_generation_log_vars,
    generation_log_vars,
    terminal_distribution,
    trajectory_body,
)

RewardFn = Callable[[tuple[int, ...]], float]

STOP_PLACEMENTS = ("printed", "swapped")


class NonPositiveReward(ValueError):
    """A reward evaluation returned a non-positive value; its log is undefined."""


class EmptyBuffer(LookupError):
    """Sampling from a replay buffer with no entries."""


def make_reward_fn(problem: Problem, cfg: TaskConfig, vocab: Vocab) -> RewardFn:
    """Reward of a full token prefix (prompt included) treated as terminated."""
    return lambda prefix: reward(problem, prefix, cfg, vocab)


@dataclass(frozen=True)
class Reference:
    """A reference solution: prompt tokens plus the generated body (no stop symbol)."""

    prompt_tokens: tuple[int, ...]
    body: tuple[int, ...]


@dataclass(frozen=True)
class BufferEntry:
    """A terminated trajectory with its prefix log-rewards cached at push time.

    at_horizon marks bodies of maximal solution length, where stopping is the
    only legal continuation.
    """

    prompt_tokens: tuple[int, ...]
    body: tuple[int, ...]
    log_rewards: np.ndarray
    at_horizon: bool = False


class ReplayBuffer:
    """FIFO store of terminated trajectories; capacity 1000 by default."""

    def __init__(self, capacity: int = 1000) -> None:
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.entries: deque[BufferEntry] = deque(maxlen=capacity)
        self.pushed = 0

    def __len__(self) -> int:
        return len(self.entries)


def prefix_log_rewards(reward_fn: RewardFn, prompt_tokens: tuple[int, ...], body: tuple[int, ...]) -> np.ndarray:
    """log R over every prefix 0..n of the body; rejects non-positive rewards."""
    out = np.empty(len(body) + 1)
    for i in range(len(body) + 1):
        r = reward_fn(prompt_tokens + body[:i])
        if not r > 0.0:
            raise NonPositiveReward(f"reward {r} at prefix length {i}")
        out[i] = np.log(r)
    return out


def buffer_push(
    buf: ReplayBuffer, traj: Trajectory, reward_fn: RewardFn, at_horizon: bool = False
) -> None:
    """Append a terminated trajectory, evicting the oldest entry beyond capacity."""
    if not traj.terminated:
        raise ValueError("only terminated trajectories enter the replay buffer")
    prompt = traj.tokens[: traj.prompt_len]
    body = trajectory_body(traj)
    entry = BufferEntry(prompt, body, prefix_log_rewards(reward_fn, prompt, body), at_horizon)
    buf.entries.append(entry)
    buf.pushed += 1


def buffer_sample(buf: ReplayBuffer, batch: int, rng: np.random.Generator) -> list[BufferEntry]:
    """Uniform sample with replacement; deterministic under a seeded generator."""
    if not buf.entries:
        raise EmptyBuffer("replay buffer is empty")
    idx = rng.integers(0, len(buf.entries), size=batch)
    return [buf.entries[int(i)] for i in idx]


def _subtb_from_vars(lp_tok: Var, lp_stop: Var, log_r: np.ndarray, lam: float, placement: str) -> Var:
    """Subtrajectory balance over one trajectory, given its log-prob variables."""
    n = log_r.size - 1
    tape = lp_stop.tape
    if n == 0:
        return tape.const(0.0)
    s_full = ad.concat([tape.const(np.zeros(1)), ad.cumsum(lp_tok)])
    if placement == "printed":
        d = tape.const(log_r) - s_full - lp_stop
    else:
        d = tape.const(log_r) - s_full + lp_stop
    ii, jj = np.triu_indices(n + 1, k=1)
    diff = ad.take(d, ii) - ad.take(d, jj)
    weights = lam ** (jj - ii).astype(np.float64)
    return ad.vsum(tape.const(weights) * ad.square(diff))


def subtb_loss_var(
    policy: Policy,
    theta: Var,
    reward_fn: RewardFn,
    traj: Trajectory,
    lam: float = 1.0,
    stop_placement: str = "printed",
    log_rewards: np.ndarray | None = None,
) -> Var:
    """Differentiable subtrajectory balance loss for one terminated trajectory."""
    if stop_placement not in STOP_PLACEMENTS:
        raise ValueError(f"stop_placement must be one of {STOP_PLACEMENTS}")
    if not traj.terminated:
        raise ValueError("subtrajectory balance needs a terminated trajectory")
    prompt = traj.tokens[: traj.prompt_len]
    body = trajectory_body(traj)
    if log_rewards is None:
        log_rewards = prefix_log_rewards(reward_fn, prompt, body)
    lp_tok, lp_stop = generation_log_vars(policy, theta, prompt, body)
    return _subtb_from_vars(lp_tok, lp_stop, log_rewards, lam, stop_placement)


def subtb_loss(
    policy: Policy,
    reward_fn: RewardFn,
    traj: Trajectory,
    lam: float = 1.0,
    stop_placement: str = "printed",
) -> float:
    """Subtrajectory balance loss value under the current parameters."""
    if policy.kind is PolicyKind.TABULAR:
        policy.register_prefixes(traj.tokens[: traj.prompt_len], trajectory_body(traj))
    tape = GradTape()
    theta = tape.input(policy.params)
    return float(subtb_loss_var(policy, theta, reward_fn, traj, lam, stop_placement).value)


def tb_loss_var(
    policy: Policy,
    theta: Var,
    reward_fn: RewardFn,
    traj: Trajectory,
    log_z: Var | float,
) -> Var:
    """Trajectory balance: (logZ + sum log pi + log pi(sT|.) - log R)^2."""
    if not traj.terminated:
        raise ValueError("trajectory balance needs a terminated trajectory")
    prompt = traj.tokens[: traj.prompt_len]
    body = trajectory_body(traj)
    r = reward_fn(prompt + body)
    if not r > 0.0:
        raise NonPositiveReward(f"reward {r} on the full sequence")
    lp_tok, lp_stop = generation_log_vars(policy, theta, prompt, body)
    seq_lp = ad.vsum(lp_tok) + ad.vsum(ad.take(lp_stop, np.asarray([len(body)])))
    resid = log_z + seq_lp - float(np.log(r))
    return ad.square(resid)


def tb_loss(policy: Policy, reward_fn: RewardFn, traj: Trajectory, log_z: float) -> float:
    if policy.kind is PolicyKind.TABULAR:
        policy.register_prefixes(traj.tokens[: traj.prompt_len], trajectory_body(traj))
    tape = GradTape()
    theta = tape.input(policy.params)
    return float(tb_loss_var(policy, theta, reward_fn, traj, float(log_z)).value)


def sft_loss_var(policy: Policy, theta: Var, refs: list[Reference]) -> Var:
    """Mean per-token negative log-likelihood of reference bodies, stop symbol included."""
    pairs = batched_generation_log_vars(policy, theta, [(r.prompt_tokens, r.body) for r in refs])
    total = None
    count = 0
    for ref, (lp_tok, lp_stop) in zip(refs, pairs):
        n = len(ref.body)
        seq = ad.vsum(lp_tok) + ad.vsum(ad.take(lp_stop, np.asarray([n])))
        total = seq if total is None else total + seq
        count += n + 1
    return -(total / float(count))


def sft_loss(policy: Policy, refs: list[Reference]) -> float:
    if not refs:
        raise ValueError("reference set is empty")
    if policy.kind is PolicyKind.TABULAR:
        for r in refs:
            policy.register_prefixes(r.prompt_tokens, r.body)
    tape = GradTape()
    theta = tape.input(policy.params)
    return float(sft_loss_var(policy, theta, refs).value)


@dataclass(frozen=True)
class GfnConfig:
    """Training-loop settings.

    sft_coeff weights the reference log-likelihood term added to the balance
    loss; samples_per_problem solutions are drawn for the step's problem and
    pushed into the replay buffer before each update. horizon_coeff weights
    the stop log-likelihood on bodies of maximal length, where the balance
    residuals alone leave the total terminal mass underdetermined.
    """

    steps: int
    batch_size: int = 16
    samples_per_problem: int = 8
    sft_coeff: float = 30.0
    subtb_lambda: float = 1.0
    horizon_coeff: float = 1.0
    lr: float = 1e-3
    buffer_capacity: int = 1000
    decode: DecodeCfg = field(default_factory=DecodeCfg)
    stop_placement: str = "printed"
    seed: int = 0
    diag_every: int = 0

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.samples_per_problem < 1:
            raise ValueError("samples_per_problem must be at least 1")
        if self.sft_coeff < 0.0:
            raise ValueError("sft_coeff must be non-negative")
        if self.horizon_coeff < 0.0:
            raise ValueError("horizon_coeff must be non-negative")
        if self.stop_placement not in STOP_PLACEMENTS:
            raise ValueError(f"stop_placement must be one of {STOP_PLACEMENTS}")


@dataclass
class TrainReport:
    """Per-step training statistics with a fixed CSV schema.

    Columns: step, <loss_column>, mean_sft_loss, mean_terminal_reward,
    buffer_size, l1_to_target. Cells that do not apply stay empty.
    """

    loss_column: str = "mean_subtb_loss"
    rows: list[dict] = field(default_factory=list)

    def add(self, step: int, loss: float, sft: float | None, reward_mean: float | None,
            buffer_size: int | None, l1: float | None) -> None:
        row = {
            "step": step,
            "mean_sft_loss": sft,
            "mean_terminal_reward": reward_mean,
            "buffer_size": buffer_size,
            "l1_to_target": l1,
        }
        # written last so a report whose loss IS the sft loss keeps the loss value
        row[self.loss_column] = loss
        self.rows.append(row)

    @property
    def columns(self) -> list[str]:
        cols = ["step", self.loss_column, "mean_sft_loss",
                "mean_terminal_reward", "buffer_size", "l1_to_target"]
        return list(dict.fromkeys(cols))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.columns)
            for row in self.rows:
                writer.writerow([_cell(row[c]) for c in self.columns])


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def terminal_l1_gap(policy: Policy, problem: Problem, cfg: TaskConfig, vocab: Vocab) -> float:
    """L1 distance between the policy's terminal distribution and R/Z, plus overflow mass."""
    terminals = enumerate_terminals(problem, cfg, vocab)
    z = sum(r for _, r in terminals)
    dist = terminal_distribution(policy, problem, problem.max_solution_len)
    gap = dist.overflow
    for body, r in terminals:
        gap += abs(dist.probs.get(body, 0.0) - r / z)
    return float(gap)


@dataclass
class TrainSet:
    """Problems with their reference solutions, sharing one vocabulary and task config."""

    problems: list[Problem]
    references: list[list[tuple[int, ...]]]
    task: TaskConfig
    vocab: Vocab

    @classmethod
    def build(cls, problems: list[Problem], task: TaskConfig, vocab: Vocab,
              max_refs: int | None = None) -> "TrainSet":
        refs = []
        for p in problems:
            sols = enumerate_solutions(p, task, vocab)
            refs.append(sols[:max_refs] if max_refs else sols)
        return cls(problems=problems, references=refs, task=task, vocab=vocab)

    def all_references(self) -> list[Reference]:
        out = []
        for p, bodies in zip(self.problems, self.references):
            out.extend(Reference(p.prompt_tokens, b) for b in bodies)
        return out


def _force_stop(policy: Policy, traj: Trajectory) -> Trajectory:
    """Close a horizon-capped trajectory with the stop symbol at its true log-probability.

    The horizon is part of the environment: a sequence that reaches the
    maximum solution length has no continuation, so training treats the cap
    as a forced stop. Without this, mass pushed past the horizon never
    receives gradient signal and lingers as unterminated overflow.
    """
    lp = policy.next_log_probs(traj.tokens)[policy.vocab.stop_id]
    return Trajectory(
        prompt_len=traj.prompt_len,
        tokens=traj.tokens + (policy.vocab.stop_id,),
        logprobs=traj.logprobs + (float(lp),),
        terminated=True,
    )


def _horizon_decode(decode: DecodeCfg, problem: Problem) -> DecodeCfg:
    """Training draws at most max_solution_len tokens, so forced stops stay in support."""
    cap = problem.max_solution_len
    if decode.max_new_tokens is not None:
        cap = min(decode.max_new_tokens, cap)
    return replace(decode, max_new_tokens=cap)


def train_gflownet(
    policy: Policy,
    dataset: TrainSet,
    cfg: GfnConfig,
    diag_problem: Problem | None = None,
    report: TrainReport | None = None,
) -> TrainReport:
    """Sample, score, replay, update; returns the per-step report.

    The policy is updated in place. When diag_problem is enumerable, the
    report's l1_to_target column tracks the exact proportionality gap every
    cfg.diag_every steps and at the final step.
    """
    if not dataset.problems:
        raise ValueError("dataset has no problems")
    if report is None:
        report = TrainReport(loss_column="mean_subtb_loss")
    rng = np.random.default_rng(cfg.seed)
    buf = ReplayBuffer(cfg.buffer_capacity)
    adam = AdamState.init(policy.params.size, cfg.lr)
    refs_all = dataset.all_references()
    use_sft = cfg.sft_coeff > 0.0 and refs_all
    reward_fns = [make_reward_fn(p, dataset.task, dataset.vocab) for p in dataset.problems]

    for step in range(1, cfg.steps + 1):
        p_idx = int(rng.integers(0, len(dataset.problems)))
        problem = dataset.problems[p_idx]
        reward_fn = reward_fns[p_idx]
        decode = _horizon_decode(cfg.decode, problem)
        rewards_step: list[float] = []
        for _ in range(cfg.samples_per_problem):
            traj = _sample_with_rng(policy, problem, decode, rng)
            if not traj.terminated:
                traj = _force_stop(policy, traj)
            at_horizon = len(trajectory_body(traj)) == problem.max_solution_len
            buffer_push(buf, traj, reward_fn, at_horizon)
            rewards_step.append(float(np.exp(buf.entries[-1].log_rewards[-1])))
        if not buf.entries:
            report.add(step, 0.0, None, 0.0, 0, None)
            continue

        batch = buffer_sample(buf, cfg.batch_size, rng)
        ref_batch: list[Reference] = []
        if use_sft:
            ridx = rng.integers(0, len(refs_all), size=cfg.batch_size)
            ref_batch = [refs_all[int(i)] for i in ridx]

        if policy.kind is PolicyKind.TABULAR:
            for e in batch:
                policy.register_prefixes(e.prompt_tokens, e.body)
            for r in ref_batch:
                policy.register_prefixes(r.prompt_tokens, r.body)
            adam = adam.resized(policy.params.size)

        tape = GradTape()
        theta = tape.input(policy.params)
        items = [(e.prompt_tokens, e.body) for e in batch] + [
            (r.prompt_tokens, r.body) for r in ref_batch
        ]
        pairs = batched_generation_log_vars(policy, theta, items)
        subtb_total = None
        horizon_nll = None
        n_horizon = 0
        for e, (lp_tok, lp_stop) in zip(batch, pairs[: len(batch)]):
            term = _subtb_from_vars(lp_tok, lp_stop, e.log_rewards, cfg.subtb_lambda, cfg.stop_placement)
            subtb_total = term if subtb_total is None else subtb_total + term
            if e.at_horizon and cfg.horizon_coeff > 0.0:
                # stopping is forced at maximal length; balance alone leaves
                # that stop probability (and with it the total terminal mass)
                # a free parameter
                fin = -ad.vsum(ad.take(lp_stop, np.asarray([len(e.body)])))
                horizon_nll = fin if horizon_nll is None else horizon_nll + fin
                n_horizon += 1
        mean_subtb = subtb_total / float(len(batch))
        total = mean_subtb
        if horizon_nll is not None:
            total = total + cfg.horizon_coeff * (horizon_nll / float(n_horizon))
        sft_value = None
        if ref_batch:
            nll_sum = None
            count = 0
            for r, (lp_tok, lp_stop) in zip(ref_batch, pairs[len(batch):]):
                seq = ad.vsum(lp_tok) + ad.vsum(ad.take(lp_stop, np.asarray([len(r.body)])))
                nll_sum = seq if nll_sum is None else nll_sum + seq
                count += len(r.body) + 1
            sft_term = -(nll_sum / float(count))
            sft_value = float(sft_term.value)
            total = total + cfg.sft_coeff * sft_term

        g = ad.backward(total, theta)
        policy.params, adam = adam_step(adam, policy.params, g)

        l1 = None
        if diag_problem is not None and (
            step == cfg.steps or (cfg.diag_every and step % cfg.diag_every == 0)
        ):
            l1 = terminal_l1_gap(policy, diag_problem, dataset.task, dataset.vocab)
        mean_reward = float(np.mean(rewards_step)) if rewards_step else 0.0
        report.add(step, float(mean_subtb.value), sft_value, mean_reward, len(buf), l1)
    return report
