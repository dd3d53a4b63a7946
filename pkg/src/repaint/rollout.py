"""Trajectory collection and generalized advantage estimation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from ._validation import ContractError

STUDENT = "student"
TEACHER = "teacher"


@dataclass(frozen=True)
class GaeConfig:
    gamma: float = 0.99
    lam: float = 0.95

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.lam <= 1.0):
            raise ContractError("GAE gamma and lambda must lie in [0, 1]")


@dataclass
class TrajectoryBuffer:
    """Transitions in collection order; ``dones`` marks the last step of each episode.

    A buffer that ends with ``dones[-1] == False`` was cut by the step budget and
    its last episode is bootstrapped from the critic.
    """

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray
    log_probs: np.ndarray
    dones: np.ndarray
    source: str = STUDENT
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None
    episode_returns: list = field(default_factory=list)
    episode_metrics: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.rewards)
        for name in ("states", "actions", "next_states", "log_probs", "dones"):
            if len(getattr(self, name)) != n:
                raise ContractError(f"buffer column {name!r} has the wrong length")
        if self.source not in (STUDENT, TEACHER):
            raise ContractError(f"unknown buffer source {self.source!r}")

    def __len__(self):
        return len(self.rewards)

    @property
    def episode_starts(self):
        if len(self) == 0:
            return np.zeros(0, dtype=int)
        return np.concatenate([[0], np.flatnonzero(self.dones[:-1]) + 1])

    def subset(self, idx):
        """Transitions at ``idx`` (with their advantages); episode bookkeeping is dropped."""
        idx = np.asarray(idx, dtype=int)
        return TrajectoryBuffer(
            self.states[idx],
            self.actions[idx],
            self.next_states[idx],
            self.rewards[idx],
            self.log_probs[idx],
            self.dones[idx],
            source=self.source,
            advantages=None if self.advantages is None else self.advantages[idx],
            returns=None if self.returns is None else self.returns[idx],
        )

    @classmethod
    def concatenate(cls, buffers):
        buffers = list(buffers)
        if not buffers:
            raise ContractError("nothing to concatenate")
        sources = {b.source for b in buffers}
        if len(sources) != 1:
            raise ContractError("cannot mix student and teacher transitions in one buffer")

        def cat(name):
            cols = [getattr(b, name) for b in buffers]
            if any(c is None for c in cols):
                return None
            return np.concatenate(cols)

        return cls(
            cat("states"),
            cat("actions"),
            cat("next_states"),
            cat("rewards"),
            cat("log_probs"),
            cat("dones"),
            source=sources.pop(),
            advantages=cat("advantages"),
            returns=cat("returns"),
            episode_returns=[r for b in buffers for r in b.episode_returns],
            episode_metrics=[m for b in buffers for m in b.episode_metrics],
        )

    def to_csv(self, path):
        """Columnar dump: state_*, action(_*), reward, logp, done, advantage."""
        states = self.states.reshape(len(self), -1)
        actions = self.actions.reshape(len(self), -1)
        header = [f"state_{i}" for i in range(states.shape[1])]
        header += ["action"] if actions.shape[1] == 1 else [f"action_{i}" for i in range(actions.shape[1])]
        header += ["reward", "logp", "done", "advantage"]
        adv = self.advantages if self.advantages is not None else np.full(len(self), np.nan)
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for t in range(len(self)):
                writer.writerow(
                    [repr(float(x)) for x in states[t]]
                    + [repr(float(x)) if actions.dtype.kind == "f" else int(x) for x in actions[t]]
                    + [repr(float(self.rewards[t])), repr(float(self.log_probs[t])), int(self.dones[t])]
                    + [repr(float(adv[t]))]
                )
        return path


def collect(policy, env, *, steps=None, episodes=None, rng, source=STUDENT):
    """Roll out ``policy`` in ``env`` for exactly ``steps`` transitions or ``episodes`` episodes.

    Rewards come from ``env``'s own task, so a teacher collecting here is scored
    by the student's reward. Episode seeds are drawn from ``rng``.
    """
    if (steps is None) == (episodes is None):
        raise ContractError("give exactly one of steps or episodes")
    if policy.obs_dim != env.obs_dim:
        raise ContractError("policy observation size does not match the environment")
    if (policy.head == "gaussian") != env.continuous:
        raise ContractError("policy head does not match the environment's action space")
    if not env.continuous and policy.n_out != env.n_actions:
        raise ContractError("policy and environment disagree on the number of actions")
    if env.continuous and policy.n_out != env.action_dim:
        raise ContractError("policy and environment disagree on the action dimension")
    budget = steps if steps is not None else episodes
    if budget < 1:
        raise ContractError("rollout budget must be positive")

    states, actions, next_states, rewards, logps, dones = [], [], [], [], [], []
    ep_returns, ep_metrics = [], []
    state = env.reset(int(rng.integers(2**31)))
    n_episodes = 0
    while True:
        action, logp = policy.act(state, rng)
        result = env.step(action)
        states.append(state)
        actions.append(action)
        next_states.append(result.next_state)
        rewards.append(result.reward)
        logps.append(logp)
        dones.append(result.done)
        state = result.next_state
        if result.done:
            n_episodes += 1
            ep_returns.append(env.episode_return)
            ep_metrics.append(env.episode_metric())
        if steps is not None and len(rewards) >= steps:
            break
        if episodes is not None and n_episodes >= episodes:
            break
        if result.done:
            state = env.reset(int(rng.integers(2**31)))

    return TrajectoryBuffer(
        np.asarray(states),
        np.asarray(actions),
        np.asarray(next_states),
        np.asarray(rewards, dtype=np.float64),
        np.asarray(logps, dtype=np.float64),
        np.asarray(dones, dtype=bool),
        source=source,
        episode_returns=ep_returns,
        episode_metrics=ep_metrics,
    )


def gae(rewards, values, next_values, dones, gamma, lam):
    """Backward GAE recursion over a flat transition sequence."""
    deltas = rewards + gamma * next_values * (1.0 - dones) - values
    adv = np.zeros_like(deltas)
    running = 0.0
    for t in range(len(deltas) - 1, -1, -1):
        running = deltas[t] + gamma * lam * (1.0 - dones[t]) * running
        adv[t] = running
    return adv


def compute_gae(buffer: TrajectoryBuffer, critic, cfg: GaeConfig):
    """Fill ``buffer.advantages`` and ``buffer.returns`` using ``critic`` for V(s) and V(s')."""
    if len(buffer) == 0:
        raise ContractError("cannot estimate advantages on an empty buffer")
    values = critic.predict(buffer.states)
    next_values = critic.predict(buffer.next_states)
    dones = buffer.dones.astype(np.float64)
    buffer.advantages = gae(buffer.rewards, values, next_values, dones, cfg.gamma, cfg.lam)
    buffer.returns = buffer.advantages + values
    return buffer


class AdvantageStats(NamedTuple):
    mean: float
    std: float
    min: float
    max: float


def advantage_stats(buffer: TrajectoryBuffer) -> AdvantageStats:
    if buffer.advantages is None:
        raise ContractError("advantages have not been computed")
    a = buffer.advantages
    if len(a) == 0:
        return AdvantageStats(float("nan"), float("nan"), float("nan"), float("nan"))
    return AdvantageStats(float(a.mean()), float(a.std()), float(a.min()), float(a.max()))


def evaluate(policy, env, episodes, seeds, deterministic=False, rng=None):
    """Mean return and mean auxiliary metric over ``episodes`` episodes with fixed reset seeds."""
    seeds = list(seeds)
    if len(seeds) < episodes:
        raise ContractError("need one reset seed per evaluation episode")
    if not deterministic and rng is None:
        raise ContractError("stochastic evaluation needs an rng")
    returns, metrics = [], []
    for ep in range(episodes):
        state = env.reset(seeds[ep])
        done = False
        while not done:
            action, _ = policy.act(state, rng, deterministic=deterministic)
            state, _, _, done, _ = env.step(action)
        returns.append(env.episode_return)
        metrics.append(env.episode_metric())
    return float(np.mean(returns)), float(np.mean(metrics))
