"""Multi-task 2-D point-robot suite with scripted Gaussian expert policies.

Five task families on a shared planar double-integrator body: three vary the
reward function (target velocity, heading direction, goal position) and two
vary the transition dynamics (body mass, ground friction). Each family draws
its task parameter from disjoint in-distribution and out-of-distribution
ranges so that train / id-test / ood-test splits never overlap.

Dynamics are fully deterministic: identical (state, action, task) always
yields identical (next_state, reward).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

DT = 0.1
V_MAX = 2.0
BASE_FRICTION = 0.5
EXPERT_GAIN = 2.0
RESET_POSITION_RANGE = 0.1
DEFAULT_EPISODE_LENGTH = 64
DEFAULT_DISCOUNT = 0.99

STATE_DIM = 4
ACTION_DIM = 2

FAMILIES = ("point-vel", "point-dir", "point-goal", "point-mass", "point-friction")
REWARD_FAMILIES = ("point-vel", "point-dir", "point-goal")
DYNAMICS_FAMILIES = ("point-mass", "point-friction")
SPLITS = ("train", "id-test", "ood-test")

# In-distribution / out-of-distribution parameter ranges per family. OOD
# ranges are unions of two disjoint segments on either side of the ID range.
ID_RANGES = {
    "point-vel": [(1.0, 2.0)],
    "point-dir": [(-math.pi / 2, math.pi / 2)],
    "point-mass": [(-1.0, 1.0)],
    "point-friction": [(-1.0, 1.0)],
}
OOD_RANGES = {
    "point-vel": [(0.5, 1.0), (2.0, 2.5)],
    "point-dir": [(-3 * math.pi / 4, -math.pi / 2), (math.pi / 2, 3 * math.pi / 4)],
    "point-mass": [(-1.5, -1.0), (1.0, 1.5)],
    "point-friction": [(-1.5, -1.0), (1.0, 1.5)],
}
GOAL_ID_RADII = (0.8, 1.2)
GOAL_OOD_RADIUS = 1.6
GOAL_ANGLE_RANGE = (-math.pi / 2, math.pi / 2)
SCALE_BASE = 1.5


class ConfigurationError(ValueError):
    """Raised for unknown families, splits, or invalid task parameters."""


@dataclass(frozen=True)
class TaskSpec:
    """Parameters of a single task: reward/dynamics settings plus split tag."""

    family: str
    goal_params: tuple[float, ...]
    mass_scale: float = 1.0
    friction_scale: float = 1.0
    discount: float = DEFAULT_DISCOUNT
    split: str = "train"
    task_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "goal_params", tuple(float(g) for g in self.goal_params))
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown task family {self.family!r}")
        if self.split not in SPLITS:
            raise ConfigurationError(f"unknown split {self.split!r}")
        if self.mass_scale <= 0 or self.friction_scale <= 0:
            raise ConfigurationError("mass_scale and friction_scale must be positive")
        if not 0.0 <= self.discount <= 1.0:
            raise ConfigurationError("discount must lie in [0, 1]")


@dataclass
class EnvState:
    position: np.ndarray  # (2,) m
    velocity: np.ndarray  # (2,) m/s
    step_index: int = 0

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


@dataclass(frozen=True)
class Transition:
    state: np.ndarray       # (4,) pos ++ vel
    action: np.ndarray      # (2,) in [-1, 1]^2
    reward: float
    next_state: np.ndarray  # (4,)
    done: bool

    def as_row(self) -> np.ndarray:
        """Flat 12-float row: state(4) | action(2) | reward | next_state(4) | done."""
        return np.concatenate(
            [self.state, self.action, [self.reward], self.next_state, [float(self.done)]]
        )


@dataclass(frozen=True)
class GaussianPolicyHead:
    """Gaussian action distribution at one state (diagonal for scripted experts)."""

    mean: np.ndarray
    covariance: np.ndarray

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        std = np.sqrt(np.diag(self.covariance))
        return self.mean + std * rng.standard_normal(self.mean.shape)


def _sample_from_segments(segments, count, rng):
    """Uniform draw over a union of intervals, weighted by segment length."""
    lengths = np.array([hi - lo for lo, hi in segments])
    probs = lengths / lengths.sum()
    idx = rng.choice(len(segments), size=count, p=probs)
    u = rng.uniform(size=count)
    return np.array([segments[i][0] + u[k] * (segments[i][1] - segments[i][0])
                     for k, i in enumerate(idx)])


def sample_task_set(family: str, split: str, count: int, seed: int,
                    id_start: int = 0) -> list[TaskSpec]:
    """Draw `count` tasks for one family/split; deterministic given seed.

    Task parameters are uniform within the split's declared range (a discrete
    radius set for point-goal). Task ids run from `id_start`.
    """
    if family not in FAMILIES:
        raise ConfigurationError(f"unknown task family {family!r}")
    if split not in SPLITS:
        raise ConfigurationError(f"unknown split {split!r}")
    if count < 1:
        raise ConfigurationError("count must be >= 1")

    rng = np.random.default_rng([seed, FAMILIES.index(family), SPLITS.index(split)])
    tasks = []
    for k in range(count):
        task_id = id_start + k
        if family == "point-goal":
            if split == "ood-test":
                radius = GOAL_OOD_RADIUS
            else:
                radius = GOAL_ID_RADII[rng.integers(len(GOAL_ID_RADII))]
            angle = rng.uniform(*GOAL_ANGLE_RANGE)
            goal = (radius * math.cos(angle), radius * math.sin(angle))
            tasks.append(TaskSpec(family, goal, split=split, task_id=task_id))
        else:
            segments = OOD_RANGES[family] if split == "ood-test" else ID_RANGES[family]
            value = float(_sample_from_segments(segments, 1, rng)[0])
            if family in DYNAMICS_FAMILIES:
                scale = SCALE_BASE ** value
                mass = scale if family == "point-mass" else 1.0
                friction = scale if family == "point-friction" else 1.0
                tasks.append(TaskSpec(family, (value,), mass_scale=mass,
                                      friction_scale=friction, split=split,
                                      task_id=task_id))
            else:
                tasks.append(TaskSpec(family, (value,), split=split, task_id=task_id))
    return tasks


def reset(task: TaskSpec, seed) -> EnvState:
    """Initial state: position uniform in [-0.1, 0.1]^2, velocity zero."""
    rng = np.random.default_rng(seed)
    position = rng.uniform(-RESET_POSITION_RANGE, RESET_POSITION_RANGE, size=2)
    return EnvState(position=position, velocity=np.zeros(2), step_index=0)


def _reward(family: str, task: TaskSpec, next_velocity: np.ndarray,
            next_position: np.ndarray, action: np.ndarray) -> float:
    ctrl_cost = 0.01 * float(action @ action)
    if family == "point-vel":
        return -abs(float(next_velocity[0]) - task.goal_params[0]) - ctrl_cost
    if family == "point-dir":
        theta = task.goal_params[0]
        return float(next_velocity @ np.array([math.cos(theta), math.sin(theta)])) - ctrl_cost
    if family == "point-goal":
        goal = np.asarray(task.goal_params)
        return -float(np.linalg.norm(next_position - goal))
    # point-mass / point-friction: run as fast as possible along +x
    return float(next_velocity[0]) - ctrl_cost


def step(state: EnvState, action: np.ndarray, task: TaskSpec) -> tuple[EnvState, float]:
    """Advance one tick of the damped point-mass dynamics.

    v' = (1 - mu_f * dt) * v + (dt / m) * a, clipped to +-V_MAX per component;
    p' = p + dt * v'. Out-of-range actions are clipped, not rejected.
    """
    action = np.asarray(action, dtype=float)
    if np.any(np.abs(action) > 1.0):
        logger.debug("action out of bounds, clipping: %s", action)
        action = np.clip(action, -1.0, 1.0)
    mu_f = BASE_FRICTION * task.friction_scale
    velocity = (1.0 - mu_f * DT) * state.velocity + (DT / task.mass_scale) * action
    velocity = np.clip(velocity, -V_MAX, V_MAX)
    position = state.position + DT * velocity
    reward = _reward(task.family, task, velocity, position, action)
    return EnvState(position=position, velocity=velocity,
                    step_index=state.step_index + 1), reward


def expert_policy(state: EnvState, task: TaskSpec, noise_scale: float) -> GaussianPolicyHead:
    """Scripted proportional-control expert with isotropic Gaussian noise.

    Tracks the family's target velocity (goal direction for point-goal);
    mean action is the clipped proportional correction.
    """
    if noise_scale < 0:
        raise ValueError("noise_scale must be >= 0")
    if task.family == "point-vel":
        error = np.array([task.goal_params[0], 0.0]) - state.velocity
    elif task.family == "point-dir":
        theta = task.goal_params[0]
        desired = V_MAX * np.array([math.cos(theta), math.sin(theta)])
        error = desired - state.velocity
    elif task.family == "point-goal":
        error = np.asarray(task.goal_params) - state.position
    else:  # point-mass / point-friction: full speed along +x
        error = np.array([V_MAX, 0.0]) - state.velocity
    mean = np.clip(EXPERT_GAIN * error, -1.0, 1.0)
    covariance = noise_scale ** 2 * np.eye(ACTION_DIM)
    return GaussianPolicyHead(mean=mean, covariance=covariance)


def goal_label(task: TaskSpec) -> np.ndarray:
    """The true task label a representation probe should recover."""
    if task.family in ("point-vel", "point-dir"):
        return np.array([task.goal_params[0]])
    if task.family == "point-goal":
        return np.asarray(task.goal_params, dtype=float)
    if task.family == "point-mass":
        return np.array([math.log(task.mass_scale, SCALE_BASE)])
    return np.array([math.log(task.friction_scale, SCALE_BASE)])


def rollout_episode(task: TaskSpec, policy_fn, rng: np.random.Generator,
                    episode_length: int = DEFAULT_EPISODE_LENGTH) -> list[Transition]:
    """Roll one fixed-horizon episode; `policy_fn(state_vec) -> action`."""
    state = reset(task, rng)
    transitions = []
    for t in range(episode_length):
        action = np.clip(np.asarray(policy_fn(state.as_vector()), dtype=float), -1.0, 1.0)
        next_state, reward = step(state, action, task)
        transitions.append(Transition(
            state=state.as_vector(), action=action, reward=reward,
            next_state=next_state.as_vector(), done=(t == episode_length - 1)))
        state = next_state
    return transitions


def expert_action_fn(task: TaskSpec, noise_scale: float, rng: np.random.Generator):
    """Policy callable sampling from the scripted expert head."""
    def policy_fn(state_vec: np.ndarray) -> np.ndarray:
        state = EnvState(position=state_vec[:2], velocity=state_vec[2:], step_index=0)
        return expert_policy(state, task, noise_scale).sample(rng)
    return policy_fn


def random_action_fn(rng: np.random.Generator):
    """Uniform-random policy callable over the action box."""
    def policy_fn(state_vec: np.ndarray) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=ACTION_DIM)
    return policy_fn


def episode_return(transitions: list[Transition]) -> float:
    return float(sum(t.reward for t in transitions))


def mean_return(task: TaskSpec, policy_factory, episodes: int, rng: np.random.Generator,
                episode_length: int = DEFAULT_EPISODE_LENGTH) -> float:
    """Mean undiscounted return of `policy_factory(rng)` over `episodes` rollouts."""
    total = 0.0
    for _ in range(episodes):
        policy_fn = policy_factory(rng)
        total += episode_return(rollout_episode(task, policy_fn, rng, episode_length))
    return total / episodes
