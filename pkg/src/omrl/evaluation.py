"""Context-collection protocols, policy rollouts, and normalized returns.

Three ways to obtain the context that identifies a task at test time:

- offline: sample transitions from the task's offline dataset (no env steps);
- online: roll the learned policy from a prior representation, re-encoding
  after every episode until enough transitions are collected;
- nonprior: explore with uniform-random actions for a warmup, then switch to
  the online iterate-and-re-encode loop.

Returns are normalized so the stored random anchor maps to 0 and the stored
expert anchor to 100.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envs
from .agent import Actor, act
from .data import ContextBatch, TaskDataset, sample_context
from .encoder import ContextEncoder
from .envs import TaskSpec

logger = logging.getLogger(__name__)

STRATEGY_KINDS = ("offline", "online", "nonprior")
EVAL_CSV_COLUMNS = ("strategy", "split", "task_id", "seed",
                    "raw_return", "normalized_return")
AGGREGATE_TASK_ID = -1


@dataclass
class ContextStrategy:
    kind: str
    H: int = 256
    warmup_random_steps: int = 0   # nonprior only
    z0: np.ndarray | None = None   # online only; zero vector when omitted

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown context strategy {self.kind!r}")
        if self.H < 1:
            raise ValueError("H must be >= 1")
        if self.warmup_random_steps >= self.H:
            raise ValueError("warmup_random_steps must be < H")


@dataclass
class EvalResult:
    strategy: str
    split: str
    rows: list[dict] = field(default_factory=list)
    mean_raw: float = 0.0
    std_raw: float = 0.0
    mean_normalized: float = 0.0
    std_normalized: float = 0.0


def actor_policy(actor: Actor, z: np.ndarray):
    """Deterministic policy callable for evaluation rollouts."""
    def policy_fn(state_vec: np.ndarray) -> np.ndarray:
        return act(actor, state_vec, z, deterministic=True)
    return policy_fn


def collect_context_offline(dataset: TaskDataset, H: int,
                            rng: np.random.Generator) -> ContextBatch:
    """Offline strategy: behavior-policy transitions from the dataset."""
    return sample_context(dataset, H, rng)


def _rows_from(transitions) -> np.ndarray:
    return np.stack([t.as_row() for t in transitions])


def collect_context_online(task: TaskSpec, actor: Actor, encoder: ContextEncoder,
                           H: int, rng: np.random.Generator,
                           z0: np.ndarray | None = None,
                           episode_length: int = envs.DEFAULT_EPISODE_LENGTH) -> ContextBatch:
    """Online strategy: roll the policy from a prior representation.

    Starts from z0 (zero vector by default), appends one full episode at a
    time, and re-encodes z from all collected transitions until at least H
    are available; the context is then truncated to exactly H rows.
    """
    z = np.zeros(encoder.latent_dim) if z0 is None else np.asarray(z0, dtype=float)
    collected: list[envs.Transition] = []
    while len(collected) < H:
        episode = envs.rollout_episode(task, actor_policy(actor, z), rng, episode_length)
        collected.extend(episode)
        z = encoder.encode_context(_rows_from(collected)).detach().numpy()
    return ContextBatch(transitions=_rows_from(collected)[:H], task_id=task.task_id)


def collect_context_nonprior(task: TaskSpec, actor: Actor, encoder: ContextEncoder,
                             H: int, warmup: int, rng: np.random.Generator,
                             episode_length: int = envs.DEFAULT_EPISODE_LENGTH) -> ContextBatch:
    """Non-prior strategy: random exploration first, then the online loop.

    The first `warmup` transitions come from uniform-random actions; the task
    is then inferred from them and collection continues as in the online
    strategy. With warmup = 0 this collapses to collect_context_online with a
    zero prior: z is first set after the first policy episode.
    """
    if warmup >= H:
        raise ValueError("warmup must be < H")
    collected: list[envs.Transition] = []
    while len(collected) < warmup:
        episode = envs.rollout_episode(task, envs.random_action_fn(rng), rng,
                                       episode_length)
        collected.extend(episode)
    collected = collected[:warmup]
    if collected:
        z = encoder.encode_context(_rows_from(collected)).detach().numpy()
    else:
        z = np.zeros(encoder.latent_dim)
    while len(collected) < H:
        episode = envs.rollout_episode(task, actor_policy(actor, z), rng, episode_length)
        collected.extend(episode)
        z = encoder.encode_context(_rows_from(collected)).detach().numpy()
    return ContextBatch(transitions=_rows_from(collected)[:H], task_id=task.task_id)


def collect_context(strategy: ContextStrategy, task: TaskSpec, dataset: TaskDataset,
                    actor: Actor, encoder: ContextEncoder,
                    rng: np.random.Generator,
                    episode_length: int = envs.DEFAULT_EPISODE_LENGTH) -> ContextBatch:
    if strategy.kind == "offline":
        return collect_context_offline(dataset, strategy.H, rng)
    if strategy.kind == "online":
        return collect_context_online(task, actor, encoder, strategy.H, rng,
                                      z0=strategy.z0, episode_length=episode_length)
    return collect_context_nonprior(task, actor, encoder, strategy.H,
                                    strategy.warmup_random_steps, rng,
                                    episode_length=episode_length)


def rollout_return(task: TaskSpec, policy_fn, episodes: int, rng: np.random.Generator,
                   episode_length: int = envs.DEFAULT_EPISODE_LENGTH) -> float:
    """Mean undiscounted episodic return over `episodes` rollouts."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    total = 0.0
    for _ in range(episodes):
        total += envs.episode_return(envs.rollout_episode(task, policy_fn, rng,
                                                          episode_length))
    return total / episodes


def normalized_return(raw: float, random_anchor: float, expert_anchor: float) -> float:
    """100 * (raw - random) / (expert - random)."""
    if expert_anchor == random_anchor:
        raise ArithmeticError("normalization anchors must differ")
    return 100.0 * (raw - random_anchor) / (expert_anchor - random_anchor)


def evaluate_suite(encoder: ContextEncoder, actor: Actor, tasks: list[TaskSpec],
                   datasets: dict[int, TaskDataset], strategy: ContextStrategy,
                   episodes: int = 10, seeds=(0,),
                   episode_length: int = envs.DEFAULT_EPISODE_LENGTH) -> EvalResult:
    """Evaluate every (task, seed) pair under one context-collection strategy.

    Rows are produced in (task_id, seed) order; aggregates are the mean and
    the across-seed standard deviation of per-seed means.
    """
    if not tasks:
        raise ValueError("no tasks to evaluate")
    splits = {t.split for t in tasks}
    if len(splits) != 1:
        raise ValueError("evaluate_suite expects tasks from a single split")
    result = EvalResult(strategy=strategy.kind, split=splits.pop())
    per_seed_raw = {s: [] for s in seeds}
    per_seed_norm = {s: [] for s in seeds}
    for task in sorted(tasks, key=lambda t: t.task_id):
        dataset = datasets[task.task_id]
        for seed in seeds:
            rng = np.random.default_rng([int(seed), task.task_id])
            context = collect_context(strategy, task, dataset, actor, encoder, rng,
                                      episode_length)
            z = encoder.encode_context(context).detach().numpy()
            raw = rollout_return(task, actor_policy(actor, z), episodes, rng,
                                 episode_length)
            norm = normalized_return(raw, dataset.random_return, dataset.expert_return)
            result.rows.append({"strategy": strategy.kind, "split": task.split,
                                "task_id": task.task_id, "seed": int(seed),
                                "raw_return": raw, "normalized_return": norm})
            per_seed_raw[seed].append(raw)
            per_seed_norm[seed].append(norm)
    seed_raw_means = np.array([np.mean(per_seed_raw[s]) for s in seeds])
    seed_norm_means = np.array([np.mean(per_seed_norm[s]) for s in seeds])
    result.mean_raw = float(seed_raw_means.mean())
    result.std_raw = float(seed_raw_means.std(ddof=0))
    result.mean_normalized = float(seed_norm_means.mean())
    result.std_normalized = float(seed_norm_means.std(ddof=0))
    return result


def write_eval_csv(result: EvalResult, path, append: bool = False) -> None:
    """Persist rows plus one aggregate row (task_id = -1) in the normative schema."""
    path = Path(path)
    mode = "a" if append and path.exists() else "w"
    with path.open(mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(EVAL_CSV_COLUMNS)
        for row in result.rows:
            writer.writerow([row[c] if c in ("strategy", "split") else repr(row[c])
                             if isinstance(row[c], float) else row[c]
                             for c in EVAL_CSV_COLUMNS])
        writer.writerow([result.strategy, result.split, AGGREGATE_TASK_ID, -1,
                         repr(result.mean_raw), repr(result.mean_normalized)])
