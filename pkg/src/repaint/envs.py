"""Episodic tasks whose reward is a fixed linear combination of documented features.

A task is ``(env_id, w)``: every transition emits a feature vector ``phi`` and the
reward is ``phi @ w`` (divided by an optional normalizer). A teacher/student pair
is two specs on the same environment that differ only in ``w``, so state and
action spaces always match and similarity is the cosine of the weight vectors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from ._validation import ContractError, check_weights


@dataclass(frozen=True)
class TaskSpec:
    env_id: str
    weights: tuple
    gamma: float = 0.99
    horizon: int | None = None
    reward_normalizer: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(x) for x in np.atleast_1d(self.weights)))
        if self.env_id not in ENVIRONMENTS:
            raise ContractError(f"unknown environment {self.env_id!r}")
        check_weights(self.weights, ENVIRONMENTS[self.env_id].feature_dim)
        if not 0.0 <= self.gamma <= 1.0:
            raise ContractError("discount must lie in [0, 1]")
        if self.horizon is not None and self.horizon < 1:
            raise ContractError("episode horizon must be at least 1")
        if self.reward_normalizer is not None and not self.reward_normalizer > 0:
            raise ContractError("reward normalizer must be positive")

    @property
    def w(self):
        return np.asarray(self.weights)

    @property
    def episode_horizon(self):
        return self.horizon if self.horizon is not None else ENVIRONMENTS[self.env_id].default_horizon

    def to_dict(self):
        return {
            "env_id": self.env_id,
            "weights": list(self.weights),
            "gamma": self.gamma,
            "horizon": self.horizon,
            "reward_normalizer": self.reward_normalizer,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class StepResult(NamedTuple):
    next_state: np.ndarray
    features: np.ndarray
    reward: float
    done: bool
    terminal: bool


def make_task(env_id, weights, *, gamma=0.99, horizon=None, normalize=True):
    """Build a TaskSpec; with ``normalize`` the one-step reward is bounded by 1 in magnitude."""
    if env_id not in ENVIRONMENTS:
        raise ContractError(f"unknown environment {env_id!r}")
    cls = ENVIRONMENTS[env_id]
    w = check_weights(weights, cls.feature_dim)
    normalizer = None
    if normalize:
        bound = float(np.abs(w) @ np.asarray(cls.feature_bounds))
        normalizer = bound if bound > 0 else None
    return TaskSpec(env_id, tuple(w), gamma=gamma, horizon=horizon, reward_normalizer=normalizer)


class FeatureEnv:
    """Base class: subclasses implement ``_reset`` and ``_transition``."""

    env_id = ""
    feature_names: tuple = ()
    feature_bounds: tuple = ()
    default_horizon = 1
    obs_dim = 0
    n_actions: int | None = None
    action_dim: int | None = None
    description = ""

    feature_dim = 0

    def __init__(self, spec: TaskSpec, seed=None):
        if spec.env_id != self.env_id:
            raise ContractError(f"spec is for {spec.env_id!r}, not {self.env_id!r}")
        self.spec = spec
        self._w = spec.w
        self._norm = spec.reward_normalizer
        self.horizon = spec.episode_horizon
        self.t = 0
        self.done = True
        self.episode_return = 0.0
        if seed is not None:
            self.reset(seed)

    @property
    def continuous(self):
        return self.action_dim is not None

    def reset(self, seed):
        self.rng = np.random.default_rng(seed)
        self.t = 0
        self.done = False
        self.episode_return = 0.0
        return self._reset()

    def reward_of(self, features):
        r = float(features @ self._w)
        return r / self._norm if self._norm is not None else r

    def step(self, action):
        if self.done:
            raise ContractError("step() called on a finished episode; call reset() first")
        state, features, terminal = self._transition(self._check_action(action))
        self.t += 1
        reward = self.reward_of(features)
        self.episode_return += reward
        self.done = bool(terminal or self.t >= self.horizon)
        return StepResult(state, features, reward, self.done, bool(terminal))

    def _check_action(self, action):
        if self.continuous:
            a = np.asarray(action, dtype=np.float64).reshape(-1)
            if a.shape != (self.action_dim,) or not np.all(np.isfinite(a)):
                raise ContractError(f"expected a finite action of dimension {self.action_dim}")
            return a
        a = int(action)
        if a != action or not 0 <= a < self.n_actions:
            raise ContractError(f"action must be an integer in [0, {self.n_actions})")
        return a

    def episode_metric(self):
        """Auxiliary per-episode score (completion or success fraction)."""
        return 0.0

    @classmethod
    def describe(cls):
        lines = [f"{cls.env_id}: {cls.description}"]
        if cls.continuous_mode():
            lines.append(f"  observation dim {cls.obs_dim}; continuous actions of dim {cls.action_dim}")
        else:
            lines.append(f"  observation dim {cls.obs_dim}; {cls.n_actions} discrete actions")
        lines.append(f"  default horizon {cls.default_horizon}")
        lines.append("  features (index, name, bound on |value|):")
        for i, (name, bound) in enumerate(zip(cls.feature_names, cls.feature_bounds)):
            lines.append(f"    [{i}] {name}  |phi| <= {bound:g}")
        return "\n".join(lines)

    @classmethod
    def continuous_mode(cls):
        return cls.action_dim is not None


class _GoalReacher(FeatureEnv):
    dim = 1
    step_size = 0.2
    limit = 1.5
    goal_radius = 0.05
    feature_names = ("neg_distance_to_goal", "action_magnitude", "goal_reached")
    description = (
        "point mass starting at the origin, goal drawn uniformly from [-1, 1]^d; "
        "observation is (position, goal - position)"
    )

    def _reset(self):
        self.pos = np.zeros(self.dim)
        self.goal = self.rng.uniform(-1.0, 1.0, size=self.dim)
        return self._obs()

    def _obs(self):
        return np.concatenate([self.pos, self.goal - self.pos])

    def _displacement(self, action):
        if self.continuous:
            return np.clip(action, -self.step_size, self.step_size)
        return self.action_table[action]

    def _transition(self, action):
        a = self._displacement(action)
        self.pos = np.clip(self.pos + a, -self.limit, self.limit)
        dist = float(np.linalg.norm(self.goal - self.pos))
        move = float(np.linalg.norm(a)) / self.max_move
        features = np.array([-dist, move, 1.0 if dist <= self.goal_radius else 0.0])
        return self._obs(), features, False

    def episode_metric(self):
        return 1.0 if np.linalg.norm(self.goal - self.pos) <= self.goal_radius else 0.0


class GoalReacher1D(_GoalReacher):
    env_id = "goal-reacher-1d"
    dim = 1
    obs_dim = 2
    action_table = np.array([[-0.2], [-0.1], [0.0], [0.1], [0.2]])
    n_actions = 5
    max_move = 0.2
    goal_radius = 0.05
    default_horizon = 20
    feature_bounds = (2.5, 1.0, 1.0)


class GoalReacher2D(_GoalReacher):
    env_id = "goal-reacher-2d"
    dim = 2
    obs_dim = 4
    action_table = np.array([[dx, dy] for dx in (-0.2, 0.0, 0.2) for dy in (-0.2, 0.0, 0.2)])
    n_actions = 9
    max_move = 0.2 * math.sqrt(2.0)
    goal_radius = 0.15
    default_horizon = 30
    feature_bounds = (2.5 * math.sqrt(2.0), 1.0, 1.0)


class GoalReacher1DContinuous(GoalReacher1D):
    env_id = "goal-reacher-1d-continuous"
    n_actions = None
    action_dim = 1


class GoalReacher2DContinuous(GoalReacher2D):
    env_id = "goal-reacher-2d-continuous"
    n_actions = None
    action_dim = 2
    max_move = 0.2 * math.sqrt(2.0)


class LaneGrid(FeatureEnv):
    """Two-lane loop. Actions: 0 keep lane, 1 steer inward, 2 steer outward, 3 boost.

    Every action advances one cell (boost: two). After the action the car slips
    one lane outward with probability 0.1 (0.3 when boosting). Leaving the track
    on either side ends the episode; so does completing the lap.
    """

    env_id = "lane-grid"
    track_length = 20
    n_actions = 4
    obs_dim = 3
    default_horizon = 40
    feature_names = ("progress_delta", "inner_lane", "outer_lane", "off_track")
    feature_bounds = (1.0, 1.0, 1.0, 1.0)
    description = (
        "two-lane loop of 20 cells; observation is (lap fraction, in inner lane, in outer lane)"
    )

    def _reset(self):
        self.progress = 0
        self.lane = int(self.rng.integers(0, 2))
        self.off_track = False
        return self._obs()

    def _obs(self):
        return np.array([self.progress / self.track_length, float(self.lane == 0), float(self.lane == 1)])

    def _transition(self, action):
        advance = 2 if action == 3 else 1
        lane = self.lane + {0: 0, 1: -1, 2: 1, 3: 0}[action]
        slip = 0.3 if action == 3 else 0.1
        if self.rng.random() < slip:
            lane += 1
        self.progress = min(self.progress + advance, self.track_length)
        self.off_track = not 0 <= lane <= 1
        self.lane = min(max(lane, 0), 1)
        features = np.array(
            [
                advance / 2.0,
                float(not self.off_track and self.lane == 0),
                float(not self.off_track and self.lane == 1),
                float(self.off_track),
            ]
        )
        terminal = self.off_track or self.progress >= self.track_length
        return self._obs(), features, terminal

    def episode_metric(self):
        return self.progress / self.track_length


class AvoidGrid(FeatureEnv):
    """Three-lane straight track shared with two bot cars.

    Actions: 0 keep lane, 1 move left, 2 move right (all advance one cell),
    3 wait in place. Bots advance with probability 0.5 per step and change to an
    adjacent lane with probability 0.2. Sharing a cell with a bot is a crash.
    """

    env_id = "avoid-grid"
    track_length = 25
    n_lanes = 3
    n_bots = 2
    proximity_range = 3
    n_actions = 4
    obs_dim = 1 + 3 + 2 * 2
    default_horizon = 50
    feature_names = ("progress_delta", "neg_obstacle_proximity", "collision", "completion")
    feature_bounds = (1.0, 2.0, 1.0, 1.0)
    description = (
        "three-lane track of 25 cells with two lane-changing bots; observation is "
        "(progress fraction, lane one-hot, per bot: relative position, relative lane)"
    )

    def _reset(self):
        self.progress = 0
        self.lane = 1
        self.crashed = False
        pos = self.rng.choice(np.arange(4, self.track_length - 2), size=self.n_bots, replace=False)
        self.bot_pos = np.sort(pos).astype(int)
        self.bot_lane = self.rng.integers(0, self.n_lanes, size=self.n_bots)
        return self._obs()

    def _obs(self):
        lane = np.zeros(self.n_lanes)
        lane[self.lane] = 1.0
        bots = []
        for p, l in zip(self.bot_pos, self.bot_lane):
            bots += [(p - self.progress) / self.track_length, (l - self.lane) / 2.0]
        return np.concatenate([[self.progress / self.track_length], lane, bots])

    def _transition(self, action):
        prev_progress = self.progress
        if action == 1:
            self.lane = max(self.lane - 1, 0)
        elif action == 2:
            self.lane = min(self.lane + 1, self.n_lanes - 1)
        if action != 3:
            self.progress += 1
        for i in range(self.n_bots):
            if self.rng.random() < 0.5:
                self.bot_pos[i] += 1
            if self.rng.random() < 0.2:
                self.bot_lane[i] = int(np.clip(self.bot_lane[i] + self.rng.choice((-1, 1)), 0, self.n_lanes - 1))
        self.crashed = bool(np.any((self.bot_pos == self.progress) & (self.bot_lane == self.lane)))
        proximity = 0.0
        for p, l in zip(self.bot_pos, self.bot_lane):
            gap = p - self.progress
            if l == self.lane and 0 <= gap <= self.proximity_range:
                proximity += 1.0 - gap / (self.proximity_range + 1)
        completed = self.progress >= self.track_length and not self.crashed
        features = np.array(
            [float(self.progress - prev_progress), -proximity, float(self.crashed), float(completed)]
        )
        return self._obs(), features, self.crashed or completed

    def episode_metric(self):
        return min(self.progress, self.track_length) / self.track_length


ENVIRONMENTS = {
    cls.env_id: cls
    for cls in (
        GoalReacher1D,
        GoalReacher2D,
        GoalReacher1DContinuous,
        GoalReacher2DContinuous,
        LaneGrid,
        AvoidGrid,
    )
}
for _cls in ENVIRONMENTS.values():
    _cls.feature_dim = len(_cls.feature_names)


def make_env(spec: TaskSpec, seed=None):
    return ENVIRONMENTS[spec.env_id](spec, seed=seed)


def describe_env(env_id=None):
    ids = [env_id] if env_id else list(ENVIRONMENTS)
    for i in ids:
        if i not in ENVIRONMENTS:
            raise ContractError(f"unknown environment {i!r}")
    return "\n\n".join(ENVIRONMENTS[i].describe() for i in ids)


def cosine_similarity(w1, w2):
    """Cosine of the angle between two reward weight vectors; > 0 means similar tasks."""
    a = check_weights(w1)
    b = check_weights(w2)
    if a.shape != b.shape:
        raise ContractError("weight vectors must have equal length")
    na = math.sqrt(float(a @ a))
    nb = math.sqrt(float(b @ b))
    if na == 0.0 or nb == 0.0:
        raise ContractError("cosine similarity is undefined for a zero weight vector")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class TaskPair:
    teacher: TaskSpec
    student: TaskSpec
    similarity: float
    sub_task: bool = field(default=False)

    @property
    def similar(self):
        return self.similarity > 0


def make_task_pair(env_id, teacher_weights, student_weights, **task_kwargs):
    """Teacher and student specs on one environment, their similarity, and the sub-task flag.

    The teacher task counts as a sub-task when it zeroes a feature the student weights.
    """
    teacher = make_task(env_id, teacher_weights, **task_kwargs)
    student = make_task(env_id, student_weights, **task_kwargs)
    sim = cosine_similarity(teacher.w, student.w)
    sub = bool(np.any((teacher.w == 0) & (student.w != 0)))
    return TaskPair(teacher, student, sim, sub)


def with_weights(spec: TaskSpec, weights, normalize=True):
    """Same environment and horizon, new reward weights."""
    new = make_task(spec.env_id, weights, gamma=spec.gamma, horizon=spec.horizon, normalize=normalize)
    return replace(spec, weights=new.weights, reward_normalizer=new.reward_normalizer)
