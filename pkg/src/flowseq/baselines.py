"""Reward-maximizing comparison methods: SFT, RFT, DPO, and clipped PPO.

All four push the policy toward high-reward behavior; they exist to contrast
with subtrajectory-balance training, which targets the reward-proportional
distribution instead of its argmax.

Loss forms follow the standard published definitions; the defaults (DPO beta
0.01, PPO clip 0.2, KL beta 0.1, gamma 1.0, GAE lambda 0.95, RFT k=4) mirror
the fine-tuning setup this toolkit reproduces at toy scale. Full-scale runs
would use learning rates near 3e-6 (actor) and 5e-6 (critic); the toy
defaults are recorded alongside those values in run metadata.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, GradTape, Var, adam_step
from .core import Trajectory
from .gflownet import Reference, TrainReport, TrainSet, make_reward_fn, sft_loss_var
from .policy import (
    DecodeCfg,
    Policy,
    PolicyKind,
    ValueNet,
    _sample_with_rng,
    batched_generation_log_vars,
    context_matrix,
    generation_log_probs,
    trajectory_body,
)

FULL_SCALE_ACTOR_LR = 3e-6
FULL_SCALE_CRITIC_LR = 5e-6


class LengthMismatch(ValueError):
    """Parallel lists disagree in length."""


class EmptyDataset(ValueError):
    """A trainer was given nothing to train on."""


@dataclass(frozen=True)
class PreferencePair:
    """Highest- vs lowest-reward solution for one problem."""

    problem_id: int
    chosen: Trajectory
    rejected: Trajectory
    chosen_reward: float
    rejected_reward: float

    def __post_init__(self) -> None:
        if self.chosen_reward < self.rejected_reward:
            raise ValueError("chosen reward must be at least the rejected reward")
        if self.chosen.tokens[: self.chosen.prompt_len] != self.rejected.tokens[: self.rejected.prompt_len]:
            raise ValueError("pair members must share one problem prompt")


@dataclass(frozen=True)
class SftConfig:
    epochs: int = 1
    lr: float = 1e-3
    batch_size: int | None = None
    seed: int = 0


def _fit_references(
    policy: Policy, refs: list[Reference], cfg: SftConfig, report: TrainReport
) -> Policy:
    """Adam on the mean per-token reference NLL; full batch when batch_size is None."""
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState.init(policy.params.size, cfg.lr)
    step = 0
    for _ in range(cfg.epochs):
        if cfg.batch_size is None:
            batches = [refs]
        else:
            order = rng.permutation(len(refs))
            batches = [
                [refs[int(i)] for i in order[a : a + cfg.batch_size]]
                for a in range(0, len(order), cfg.batch_size)
            ]
        for batch in batches:
            if policy.kind is PolicyKind.TABULAR:
                for r in batch:
                    policy.register_prefixes(r.prompt_tokens, r.body)
                adam = adam.resized(policy.params.size)
            tape = GradTape()
            theta = tape.input(policy.params)
            loss = sft_loss_var(policy, theta, batch)
            g = ad.backward(loss, theta)
            policy.params, adam = adam_step(adam, policy.params, g)
            step += 1
            report.add(step, float(loss.value), None, None, None, None)
    return policy


def sft_train(
    policy: Policy,
    dataset: TrainSet,
    epochs: int = 1,
    cfg: SftConfig | None = None,
    report: TrainReport | None = None,
) -> Policy:
    """Supervised fine-tuning on the dataset's reference solutions, in place."""
    refs = dataset.all_references()
    if not refs:
        raise EmptyDataset("no reference solutions to fit")
    cfg = cfg or SftConfig(epochs=epochs)
    if cfg.epochs != epochs:
        cfg = SftConfig(epochs=epochs, lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed)
    if report is None:
        report = TrainReport(loss_column="mean_sft_loss")
    return _fit_references(policy, refs, cfg, report)


def rft_select(samples: list[Trajectory], rewards: list[float]) -> Trajectory:
    """Best-reward sample; ties break to the earliest index."""
    if len(samples) != len(rewards) or not samples:
        raise LengthMismatch(f"{len(samples)} samples vs {len(rewards)} rewards")
    return samples[int(np.argmax(np.asarray(rewards)))]


@dataclass(frozen=True)
class RftConfig:
    k: int = 4
    epochs: int = 3
    lr: float = 1e-3
    batch_size: int | None = 16
    decode: DecodeCfg = field(default_factory=DecodeCfg)
    seed: int = 0


def rft_train(
    policy: Policy,
    dataset: TrainSet,
    cfg: RftConfig | None = None,
    report: TrainReport | None = None,
) -> Policy:
    """Rejection sampling: keep the best of k samples per problem, then fit the kept set."""
    cfg = cfg or RftConfig()
    if not dataset.problems:
        raise EmptyDataset("no problems to sample from")
    if report is None:
        report = TrainReport(loss_column="mean_rft_loss")
    rng = np.random.default_rng(cfg.seed)
    kept: list[Reference] = []
    for problem in dataset.problems:
        reward_fn = make_reward_fn(problem, dataset.task, dataset.vocab)
        samples = [_sample_with_rng(policy, problem, cfg.decode, rng) for _ in range(cfg.k)]
        rewards = [reward_fn(s.tokens[: s.prompt_len] + trajectory_body(s)) for s in samples]
        best = rft_select(samples, rewards)
        kept.append(Reference(problem.prompt_tokens, trajectory_body(best)))
    fit_cfg = SftConfig(epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size, seed=cfg.seed)
    return _fit_references(policy, kept, fit_cfg, report)


def _pair_logprob(policy: Policy, traj: Trajectory) -> float:
    prompt = traj.tokens[: traj.prompt_len]
    body = trajectory_body(traj)
    lp_tok, lp_stop = generation_log_probs(policy, prompt, body)
    total = float(lp_tok.sum())
    if traj.terminated:
        total += float(lp_stop[len(body)])
    return total


def _pair_logprob_var(policy: Policy, theta: Var, traj: Trajectory) -> Var:
    prompt = traj.tokens[: traj.prompt_len]
    body = trajectory_body(traj)
    pairs = batched_generation_log_vars(policy, theta, [(prompt, body)])
    lp_tok, lp_stop = pairs[0]
    total = ad.vsum(lp_tok)
    if traj.terminated:
        total = total + ad.vsum(ad.take(lp_stop, np.asarray([len(body)])))
    return total


def dpo_loss_var(
    policy: Policy, theta: Var, ref_policy: Policy, pair: PreferencePair, beta: float = 0.01
) -> Var:
    """-log sigmoid(beta * margin) with the margin taken against the frozen reference."""
    margin_ref = _pair_logprob(ref_policy, pair.chosen) - _pair_logprob(ref_policy, pair.rejected)
    lp_chosen = _pair_logprob_var(policy, theta, pair.chosen)
    lp_rejected = _pair_logprob_var(policy, theta, pair.rejected)
    margin = (lp_chosen - lp_rejected) - margin_ref
    return ad.softplus(-(margin * beta))


def dpo_loss(policy: Policy, ref_policy: Policy, pair: PreferencePair, beta: float = 0.01) -> float:
    if policy.kind is PolicyKind.TABULAR:
        for traj in (pair.chosen, pair.rejected):
            policy.register_prefixes(traj.tokens[: traj.prompt_len], trajectory_body(traj))
    tape = GradTape()
    theta = tape.input(policy.params)
    return float(dpo_loss_var(policy, theta, ref_policy, pair, beta).value)


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.01
    samples_per_problem: int = 8
    epochs: int = 3
    lr: float = 1e-3
    batch_size: int = 16
    decode: DecodeCfg = field(default_factory=DecodeCfg)
    seed: int = 0


def build_preference_pairs(
    ref_policy: Policy, dataset: TrainSet, cfg: DpoConfig, rng: np.random.Generator
) -> list[PreferencePair]:
    """Sample from the frozen reference and pair extremes; reward ties are skipped."""
    pairs: list[PreferencePair] = []
    for pid, problem in enumerate(dataset.problems):
        reward_fn = make_reward_fn(problem, dataset.task, dataset.vocab)
        samples = [
            _sample_with_rng(ref_policy, problem, cfg.decode, rng)
            for _ in range(cfg.samples_per_problem)
        ]
        rewards = [reward_fn(s.tokens[: s.prompt_len] + trajectory_body(s)) for s in samples]
        hi = int(np.argmax(rewards))
        lo = int(np.argmin(rewards))
        if rewards[hi] <= rewards[lo]:
            continue
        pairs.append(
            PreferencePair(
                problem_id=pid,
                chosen=samples[hi],
                rejected=samples[lo],
                chosen_reward=float(rewards[hi]),
                rejected_reward=float(rewards[lo]),
            )
        )
    return pairs


def dpo_train(
    policy: Policy,
    ref_policy: Policy,
    dataset: TrainSet,
    cfg: DpoConfig | None = None,
    report: TrainReport | None = None,
) -> Policy:
    """Preference optimization against a frozen reference; the policy updates in place."""
    cfg = cfg or DpoConfig()
    if not dataset.problems:
        raise EmptyDataset("no problems to sample from")
    if report is None:
        report = TrainReport(loss_column="mean_dpo_loss")
    rng = np.random.default_rng(cfg.seed)
    pairs = build_preference_pairs(ref_policy, dataset, cfg, rng)
    if not pairs:
        return policy
    adam = AdamState.init(policy.params.size, cfg.lr)
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        for a in range(0, len(order), cfg.batch_size):
            batch = [pairs[int(i)] for i in order[a : a + cfg.batch_size]]
            if policy.kind is PolicyKind.TABULAR:
                for pair in batch:
                    for traj in (pair.chosen, pair.rejected):
                        policy.register_prefixes(traj.tokens[: traj.prompt_len], trajectory_body(traj))
                adam = adam.resized(policy.params.size)
            tape = GradTape()
            theta = tape.input(policy.params)
            total = None
            for pair in batch:
                term = dpo_loss_var(policy, theta, ref_policy, pair, cfg.beta)
                total = term if total is None else total + term
            loss = total / float(len(batch))
            g = ad.backward(loss, theta)
            policy.params, adam = adam_step(adam, policy.params, g)
            step += 1
            report.add(step, float(loss.value), None, None, None, None)
    return policy


def gae_advantages(
    rewards: np.ndarray | list[float],
    values: np.ndarray | list[float],
    gamma: float,
    lam: float,
) -> np.ndarray:
    """Generalized advantage estimation.

    delta_t = r_t + gamma * v_{t+1} - v_t, A_t = sum_l (gamma*lam)^l delta_{t+l};
    values carries one bootstrap entry beyond the rewards.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.size != rewards.size + 1:
        raise LengthMismatch(f"{values.size} values for {rewards.size} rewards")
    deltas = rewards + gamma * values[1:] - values[:-1]
    out = np.empty_like(deltas)
    acc = 0.0
    for t in range(deltas.size - 1, -1, -1):
        acc = deltas[t] + gamma * lam * acc
        out[t] = acc
    return out


@dataclass(frozen=True)
class PpoConfig:
    """Clipped-surrogate settings with a KL penalty folded into per-token rewards."""

    clip: float = 0.2
    kl_beta: float = 0.1
    gamma: float = 1.0
    gae_lambda: float = 0.95
    steps: int = 100
    trajs_per_step: int = 8
    actor_lr: float = 1e-3
    critic_lr: float = 3e-3
    decode: DecodeCfg = field(default_factory=DecodeCfg)
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must lie in (0, 1)")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError("gae_lambda must lie in [0, 1]")


@dataclass(frozen=True)
class PpoItem:
    """One trajectory prepared for the surrogate: constants only, besides theta."""

    prompt_tokens: tuple[int, ...]
    body: tuple[int, ...]
    terminated: bool
    old_logprobs: np.ndarray
    advantages: np.ndarray


def ppo_surrogate_var(policy: Policy, theta: Var, items: list[PpoItem], clip: float) -> Var:
    """Negative mean clipped surrogate over all generated tokens of the batch."""
    pairs = batched_generation_log_vars(policy, theta, [(it.prompt_tokens, it.body) for it in items])
    total = None
    count = 0
    for it, (lp_tok, lp_stop) in zip(items, pairs):
        n = len(it.body)
        if it.terminated:
            lp = ad.concat([lp_tok, ad.take(lp_stop, np.asarray([n]))])
        else:
            lp = lp_tok
        tape = theta.tape
        ratio = ad.exp(lp - tape.const(it.old_logprobs))
        adv = tape.const(it.advantages)
        unclipped = ratio * adv
        clipped = ad.clamp(ratio, 1.0 - clip, 1.0 + clip) * adv
        contrib = ad.vsum(ad.minimum(unclipped, clipped))
        total = contrib if total is None else total + contrib
        count += it.old_logprobs.size
    return -(total / float(max(count, 1)))


def ppo_train(
    policy: Policy,
    critic: ValueNet,
    dataset: TrainSet,
    cfg: PpoConfig | None = None,
    report: TrainReport | None = None,
) -> Policy:
    """Clipped policy gradient with GAE and a KL penalty against the starting policy.

    Per-token reward is -kl_beta * (log pi - log pi_ref), with the environment
    reward added on the stop symbol. The critic regresses to GAE returns with
    its own optimizer and disjoint parameters; one inner epoch per batch.
    """
    cfg = cfg or PpoConfig()
    if not dataset.problems:
        raise EmptyDataset("no problems to sample from")
    if report is None:
        report = TrainReport(loss_column="mean_ppo_loss")
    ref_policy = policy.clone()
    rng = np.random.default_rng(cfg.seed)
    adam_actor = AdamState.init(policy.params.size, cfg.actor_lr)
    adam_critic = AdamState.init(critic.params.size, cfg.critic_lr)

    for step in range(1, cfg.steps + 1):
        p_idx = int(rng.integers(0, len(dataset.problems)))
        problem = dataset.problems[p_idx]
        reward_fn = make_reward_fn(problem, dataset.task, dataset.vocab)
        trajs = [
            _sample_with_rng(policy, problem, cfg.decode, rng) for _ in range(cfg.trajs_per_step)
        ]

        items: list[PpoItem] = []
        value_rows: list[np.ndarray] = []
        value_targets: list[np.ndarray] = []
        env_rewards: list[float] = []
        for traj in trajs:
            prompt = traj.tokens[: traj.prompt_len]
            body = trajectory_body(traj)
            old_lp = np.asarray(traj.logprobs)
            ref_tok, ref_stop = generation_log_probs(ref_policy, prompt, body)
            ref_lp = np.concatenate([ref_tok, [ref_stop[len(body)]]]) if traj.terminated else ref_tok
            token_rewards = -cfg.kl_beta * (old_lp - ref_lp)
            env_r = reward_fn(prompt + body)
            if traj.terminated:
                token_rewards[-1] += env_r
            env_rewards.append(env_r)

            ctx = context_matrix(policy, prompt, body)
            if critic.kind is PolicyKind.TABULAR:
                critic.register_prefixes(prompt, body)
            states = critic.values(ctx)
            # truncated rollouts bootstrap from the critic, finished ones see zero beyond stop
            values = np.concatenate([states, [0.0]]) if traj.terminated else states
            adv = gae_advantages(token_rewards, values, cfg.gamma, cfg.gae_lambda)
            items.append(PpoItem(prompt, body, traj.terminated, old_lp, adv))
            value_rows.append(ctx if traj.terminated else ctx[: old_lp.size])
            value_targets.append(adv + values[:-1])

        if policy.kind is PolicyKind.TABULAR:
            for it in items:
                policy.register_prefixes(it.prompt_tokens, it.body)
            adam_actor = adam_actor.resized(policy.params.size)
        if critic.kind is PolicyKind.TABULAR:
            adam_critic = adam_critic.resized(critic.params.size)

        tape = GradTape()
        theta = tape.input(policy.params)
        actor_loss = ppo_surrogate_var(policy, theta, items, cfg.clip)
        g = ad.backward(actor_loss, theta)
        policy.params, adam_actor = adam_step(adam_actor, policy.params, g)

        ctape = GradTape()
        ctheta = ctape.input(critic.params)
        all_rows = np.concatenate(value_rows, axis=0)
        all_targets = np.concatenate(value_targets)
        pred = critic.values_var(ctheta, all_rows)
        resid = pred - ctape.const(all_targets)
        critic_loss = ad.vsum(ad.square(resid)) / float(all_targets.size)
        cg = ad.backward(critic_loss, ctheta)
        critic.params, adam_critic = adam_step(adam_critic, critic.params, cg)

        report.add(step, float(actor_loss.value), None, float(np.mean(env_rewards)), None, None)
    return policy
