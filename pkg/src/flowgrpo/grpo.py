"""Online GRPO for flow-matching samplers.

One round: snapshot the behavior parameters, roll out ``G`` windowed SDE
samples for each prompt, score the terminal samples, standardize rewards
within each group, drop zero-variance groups, then take a fixed number of
clipped-ratio ascent steps on the stochastic transitions only.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .metrics import MetricLog
from .model import ParamSet
from .optim import Adam, LinearSchedule
from .samplers import (
    StepRecord,
    TimeGrid,
    Trajectory,
    WindowSpec,
    policy_mean,
    rollout,
    stack_trajectories,
    stored_logpdf,
    transition_logpdf,
)
from .tasks import TrainPair

log = logging.getLogger(__name__)

DEGENERATE_STD = 1e-8


@dataclass(frozen=True)
class GrpoConfig:
    G: int = 8
    clip_eps: float = 0.2
    beta: float = 0.01
    prompts_per_round: int = 6
    repeats: int = 4
    batch_size: int = 12
    updates_per_iteration: int = 4
    noise_level: float = 0.3
    window_size: int = 2
    s_min_range: tuple[int, int] = (1, 3)
    T_range: tuple[int, int] = (7, 10)
    full_path: bool = False
    learning_rate: float = 1e-3
    guidance_scale: float = 1.0
    frozen: tuple[str, ...] = ()

    def __post_init__(self):
        if self.G < 2:
            raise ValueError("group size G must be >= 2")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if min(self.batch_size, self.prompts_per_round, self.repeats, self.updates_per_iteration) < 1:
            raise ValueError("batch_size, prompts_per_round, repeats and updates_per_iteration must be >= 1")
        if self.noise_level < 0:
            raise ValueError("noise_level must be >= 0")
        lo, hi = self.T_range
        if lo > hi or lo < 3:
            raise ValueError("T_range must satisfy 3 <= lo <= hi")
        if self.s_min_range[0] < 1 or self.s_min_range[0] > self.s_min_range[1]:
            raise ValueError("s_min_range must satisfy 1 <= lo <= hi")
        if not self.full_path and self.s_min_range[0] + self.window_size - 1 > lo - 2:
            raise ValueError("window does not fit the smallest T in T_range")

    @property
    def groups_per_round(self) -> int:
        return self.prompts_per_round * self.repeats


@dataclass
class RolloutGroup:
    cond: np.ndarray
    reference: np.ndarray
    traj: Trajectory
    rewards: np.ndarray
    components: dict[str, np.ndarray]
    advantages: np.ndarray
    degenerate: bool
    behavior: ParamSet
    index: int = 0

    @property
    def G(self) -> int:
        return self.traj.n


RewardFn = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple[np.ndarray, dict[str, np.ndarray]]]
TaskSampler = Callable[[int, np.random.Generator], TrainPair]


def compute_advantages(rewards) -> tuple[np.ndarray, bool]:
    """(r - mean) / std with the population std; flags groups with std < 1e-8."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    c = r - r.mean()
    c -= c.mean()  # second pass removes the rounding left by a large offset
    sd = float(np.sqrt(np.mean(c * c)))
    if sd < DEGENERATE_STD:
        return np.zeros_like(r), True
    return c / sd, False


def discard_degenerate_groups(groups: list[RolloutGroup], metrics: dict | None = None) -> list[RolloutGroup]:
    survivors = [g for g in groups if not g.degenerate]
    dropped = len(groups) - len(survivors)
    if metrics is not None:
        metrics["degenerate_groups"] = dropped
        metrics["surviving_groups"] = len(survivors)
    if dropped:
        log.info("discarded %d degenerate group(s), %d remain", dropped, len(survivors))
    if groups and not survivors:
        warnings.warn("every group in the round has zero reward spread; skipping update", RuntimeWarning)
    return survivors


def sample_window(cfg: GrpoConfig, rng: np.random.Generator) -> tuple[TimeGrid, WindowSpec]:
    """Per-round step count and SDE window."""
    T = int(rng.integers(cfg.T_range[0], cfg.T_range[1] + 1))
    grid = TimeGrid(T)
    if cfg.full_path:
        return grid, WindowSpec.full(grid)
    hi = min(cfg.s_min_range[1], T - 1 - cfg.window_size)
    s_min = int(rng.integers(cfg.s_min_range[0], hi + 1))
    return grid, WindowSpec(s_min, cfg.window_size)


def collect_groups(
    params: ParamSet,
    sampler: TaskSampler,
    cfg: GrpoConfig,
    reward_fn: RewardFn,
    seed: int,
    round_index: int = 0,
    behavior: ParamSet | None = None,
) -> list[RolloutGroup]:
    """Roll out G windowed SDE samples for every prompt of one round.

    Each trajectory's noise stream is keyed by (seed, round, group, member).
    """
    behavior = behavior if behavior is not None else params.clone()
    rng = np.random.default_rng(np.random.SeedSequence([seed, round_index, 0]))
    grid, window = sample_window(cfg, rng)
    n_groups = cfg.groups_per_round
    prompts = sampler(n_groups, rng)
    cond = np.repeat(np.atleast_2d(prompts.c), cfg.G, axis=0)
    ref = np.repeat(np.atleast_2d(prompts.x1), cfg.G, axis=0)
    seeds = [np.random.SeedSequence([seed, round_index, 1, g, i]) for g in range(n_groups) for i in range(cfg.G)]
    traj = rollout(behavior, cond, grid, window, cfg.noise_level, cfg.guidance_scale, seed=seeds)
    combined, raw = reward_fn(traj.final, cond, ref)
    combined = np.asarray(combined, dtype=np.float64)
    if combined.shape != (n_groups * cfg.G,) or not np.all(np.isfinite(combined)):
        raise FloatingPointError("reward function returned malformed or non-finite scores")
    groups = []
    for g in range(n_groups):
        rows = np.arange(g * cfg.G, (g + 1) * cfg.G)
        adv, degenerate = compute_advantages(combined[rows])
        groups.append(
            RolloutGroup(
                cond=prompts.c[g], reference=prompts.x1[g], traj=traj.select(rows),
                rewards=combined[rows], components={k: np.asarray(v)[rows] for k, v in raw.items()},
                advantages=adv, degenerate=degenerate, behavior=behavior, index=g,
            )
        )
    return groups


# ------------------------------------------------------------- per-step terms


def step_ratio(params: ParamSet, old: ParamSet | None, record: StepRecord, c, guidance_scale: float = 1.0) -> Tensor:
    """p_params(x_next | x) / p_old(x_next | x); the old density comes from the stored mean.

    ``old`` is accepted for symmetry; it is never re-evaluated.
    """
    logp_new = transition_logpdf(params, record, c, guidance_scale)
    ratio = ad.exp(ad.sub(logp_new, stored_logpdf(record)))
    if not np.all(np.isfinite(ratio.data)):
        raise FloatingPointError("non-finite importance ratio")
    return ratio


def kl_transition(params: ParamSet, ref: ParamSet, record: StepRecord, c, guidance_scale: float = 1.0) -> Tensor:
    """KL between equal-variance Gaussians: |mu - mu_ref|^2 / (2 std^2)."""
    if record.kind != "sde":
        raise ValueError("KL is only defined on stochastic steps")
    mu = policy_mean(params, record.x, c, record.t, record.dt, record.a, guidance_scale)
    mu_ref = policy_mean(ref, record.x, c, record.t, record.dt, record.a, guidance_scale).data
    return ad.mul(ad.sum(ad.square(ad.sub(mu, mu_ref)), axis=-1), 0.5 / record.std**2)


@dataclass
class StepBatch:
    """All stochastic transitions of M trajectories, laid out (S, M, ...)."""

    x: np.ndarray
    x_next: np.ndarray
    old_logp: np.ndarray
    t: np.ndarray
    std: np.ndarray
    cond: np.ndarray
    adv: np.ndarray
    dt: float
    a: float
    guidance_scale: float
    ref_mean: np.ndarray | None = None
    rewards: np.ndarray | None = None

    @property
    def S(self) -> int:
        return self.x.shape[0]

    @property
    def M(self) -> int:
        return self.x.shape[1]

    def rows(self, idx) -> "StepBatch":
        idx = np.asarray(idx)
        return StepBatch(
            self.x[:, idx], self.x_next[:, idx], self.old_logp[:, idx], self.t, self.std, self.cond[idx],
            self.adv[idx], self.dt, self.a, self.guidance_scale,
            None if self.ref_mean is None else self.ref_mean[:, idx],
            None if self.rewards is None else self.rewards[idx],
        )


def build_step_batch(groups: list[RolloutGroup], ref: ParamSet | None = None) -> StepBatch:
    traj = stack_trajectories([g.traj for g in groups])
    recs = traj.sde_records()
    if not recs:
        raise ValueError("trajectories carry no stochastic steps")
    S, M = len(recs), traj.n
    x = np.stack([r.x for r in recs])
    x_next = np.stack([r.x_next for r in recs])
    std = np.array([r.std for r in recs])
    t = np.array([r.t for r in recs])
    old = np.stack([stored_logpdf(r) for r in recs])
    batch = StepBatch(
        x, x_next, old, t, std, traj.cond, np.concatenate([g.advantages for g in groups]),
        traj.grid.dt, traj.a, traj.guidance_scale, rewards=np.concatenate([g.rewards for g in groups]),
    )
    if ref is not None:
        batch.ref_mean = _flat_mean(ref, batch).data.reshape(S, M, -1)
    return batch


def _flat_mean(params: ParamSet, b: StepBatch) -> Tensor:
    d = b.x.shape[-1]
    X = b.x.reshape(-1, d)
    C = np.tile(b.cond, (b.S, 1))
    T = np.repeat(b.t, b.M)
    return policy_mean(params, X, C, T, b.dt, b.a, b.guidance_scale)


def objective_terms(params: ParamSet, b: StepBatch, cfg: GrpoConfig) -> tuple[Tensor, dict[str, float]]:
    """Clipped surrogate minus beta * KL, averaged over steps then trajectories."""
    d = b.x.shape[-1]
    mean = _flat_mean(params, b)
    std_rows = np.repeat(b.std, b.M)
    logp = ad.gaussian_log_density(b.x_next.reshape(-1, d), mean, std_rows)
    ratio = ad.exp(ad.sub(logp, b.old_logp.reshape(-1)))
    if not np.all(np.isfinite(ratio.data)):
        raise FloatingPointError("non-finite importance ratio")
    adv = np.tile(b.adv, b.S)
    unclipped = ad.mul(ratio, adv)
    clipped = ad.mul(ad.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), adv)
    surrogate = ad.mean(ad.minimum(unclipped, clipped))
    stats = {
        "mean_ratio": float(ratio.data.mean()),
        "clip_fraction": float(np.mean(np.abs(ratio.data - 1.0) > cfg.clip_eps)),
        "kl": 0.0,
    }
    obj = surrogate
    if b.ref_mean is not None and cfg.beta > 0:
        diff = ad.sub(mean, b.ref_mean.reshape(-1, d))
        kl = ad.mul(ad.sum(ad.square(diff), axis=-1), 0.5 / std_rows**2)
        stats["kl"] = float(kl.data.mean())
        obj = ad.sub(surrogate, ad.mul(ad.mean(kl), cfg.beta))
    elif b.ref_mean is not None:
        diff = mean.data - b.ref_mean.reshape(-1, d)
        stats["kl"] = float(np.mean(np.sum(diff * diff, axis=-1) * 0.5 / std_rows**2))
    stats["objective"] = obj.item()
    return obj, stats


def grpo_objective(params: ParamSet, groups, cfg: GrpoConfig, ref: ParamSet | None = None) -> Tensor:
    """Objective (to maximize) over a list of groups or a prepared StepBatch."""
    if isinstance(groups, StepBatch):
        batch = groups
    else:
        if not groups:
            raise ValueError("empty batch")
        if any(g.degenerate for g in groups):
            raise ValueError("degenerate groups must be discarded first")
        batch = build_step_batch(groups, ref)
    if batch.M == 0:
        raise ValueError("empty batch")
    return objective_terms(params, batch, cfg)[0]


def grpo_update(
    params: ParamSet,
    optimizer: Adam,
    groups: list[RolloutGroup],
    cfg: GrpoConfig,
    ref: ParamSet | None,
    rng: np.random.Generator,
    max_updates: int | None = None,
) -> list[dict[str, float]]:
    """Shuffle surviving trajectories into batches and take the round's ascent steps.

    Batches are split evenly across ``updates_per_iteration`` optimizer steps;
    each step accumulates the batch-mean gradients of its share.
    """
    if not groups:
        raise ValueError("no surviving groups to train on")
    full = build_step_batch(groups, ref)
    order = rng.permutation(full.M)
    batches = [order[i : i + cfg.batch_size] for i in range(0, full.M, cfg.batch_size)]
    n_updates = cfg.updates_per_iteration if max_updates is None else min(cfg.updates_per_iteration, max_updates)
    if len(batches) >= cfg.updates_per_iteration:
        shares = np.array_split(np.arange(len(batches)), cfg.updates_per_iteration)
    else:
        shares = [np.array([i % len(batches)]) for i in range(cfg.updates_per_iteration)]
    diags = []
    for share in shares[:n_updates]:
        params.zero_grad()
        acc: dict[str, float] = {}
        for bi in share:
            obj, stats = objective_terms(params, full.rows(batches[bi]), cfg)
            if not np.isfinite(obj.item()):
                raise FloatingPointError("non-finite GRPO objective")
            ad.backward(ad.mul(obj, 1.0 / len(share)))
            for k, v in stats.items():
                acc[k] = acc.get(k, 0.0) + v / len(share)
        lr = optimizer.step(maximize=True)
        acc["lr"] = lr
        diags.append(acc)
    return diags


# --------------------------------------------------------------- outer loop


@dataclass
class PosttrainResult:
    params: ParamSet
    train_log: MetricLog
    eval_log: MetricLog
    rounds: int = 0
    skipped_rounds: int = 0
    trajectories: list = field(default_factory=list)


def posttrain(
    params: ParamSet,
    cfg: GrpoConfig,
    reward_fn: RewardFn,
    sampler: TaskSampler,
    total_steps: int,
    seed: int = 0,
    evaluator: Callable[[ParamSet], dict[str, float]] | None = None,
    eval_interval: int = 10,
    on_step: Callable[[int, ParamSet], None] | None = None,
    keep_trajectories: bool = False,
    max_skipped_rounds: int = 50,
) -> PosttrainResult:
    """Alternate collection and updates until ``total_steps`` optimizer steps.

    ``params`` is updated in place. The reference snapshot is taken once at
    the start; the behavior snapshot is refreshed every round. The training
    log has one row per update step; the evaluation log one row per
    ``eval_interval`` steps plus step 0.
    """
    params.frozen = frozenset(cfg.frozen)
    ref = params.clone()
    optimizer = Adam(params, LinearSchedule(cfg.learning_rate, total_steps))
    result = PosttrainResult(params, MetricLog(), MetricLog())
    if evaluator is not None:
        result.eval_log.append(0, evaluator(params))
    step, round_index, skipped_in_a_row = 0, 0, 0
    while step < total_steps:
        groups = collect_groups(params, sampler, cfg, reward_fn, seed, round_index)
        round_stats: dict = {}
        survivors = discard_degenerate_groups(groups, round_stats)
        rewards = np.concatenate([g.rewards for g in groups])
        comps = {k: np.concatenate([g.components[k] for g in groups]) for k in groups[0].components}
        if keep_trajectories:
            result.trajectories.append(stack_trajectories([g.traj for g in groups]))
        round_index += 1
        if not survivors:
            result.skipped_rounds += 1
            skipped_in_a_row += 1
            if skipped_in_a_row > max_skipped_rounds:
                raise RuntimeError("too many consecutive rounds without reward spread")
            continue
        skipped_in_a_row = 0
        rng = np.random.default_rng(np.random.SeedSequence([seed, round_index, 2]))
        diags = grpo_update(params, optimizer, survivors, cfg, ref, rng, total_steps - step)
        for diag in diags:
            step += 1
            row = {
                "round": float(round_index),
                "mean_reward": float(rewards.mean()),
                "max_reward": float(rewards.max()),
                **{f"reward_{k}": float(v.mean()) for k, v in comps.items()},
                "objective": diag["objective"],
                "mean_ratio": diag["mean_ratio"],
                "clip_fraction": diag["clip_fraction"],
                "kl": diag["kl"],
                "lr": diag["lr"],
                "degenerate_groups": float(round_stats["degenerate_groups"]),
            }
            result.train_log.append(step, row)
            if evaluator is not None and step % eval_interval == 0:
                result.eval_log.append(step, evaluator(params))
            if on_step is not None:
                on_step(step, params)
    result.rounds = round_index
    return result
