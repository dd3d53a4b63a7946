"""Clipped-PPO actor-critic: the baseline learner that the transfer arms extend."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ._validation import ContractError
from .approximator import Optimizer, PolicyNetwork, ValueNetwork
from .rollout import STUDENT, GaeConfig, TrajectoryBuffer, collect, compute_gae


@dataclass(frozen=True)
class PpoConfig:
    clip_eps: float = 0.2
    epochs: int = 10
    minibatch_size: int = 64
    entropy_coef: float = 1e-4
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    gae_lambda: float = 0.95
    rollout_steps: int | None = 2048
    rollout_episodes: int | None = None
    hidden_sizes: tuple = (32, 32)
    normalize_advantages: bool = True
    optimizer: str = "adam"

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if not 0.0 < self.clip_eps < 1.0:
            raise ContractError("clip epsilon must lie in (0, 1)")
        if self.epochs < 1 or self.minibatch_size < 1:
            raise ContractError("epochs and minibatch size must be at least 1")
        if self.entropy_coef < 0:
            raise ContractError("entropy coefficient must be non-negative")
        if self.actor_lr < 0 or self.critic_lr < 0:
            raise ContractError("learning rates must be non-negative")
        if (self.rollout_steps is None) == (self.rollout_episodes is None):
            raise ContractError("set exactly one of rollout_steps or rollout_episodes")

    def rollout_budget(self):
        if self.rollout_steps is not None:
            return {"steps": self.rollout_steps}
        return {"episodes": self.rollout_episodes}


class IterationStreams(NamedTuple):
    """Independent generators for one training iteration.

    Student-side streams never depend on whether teacher streams are consumed,
    which is what makes a zero-weight transfer run replay the baseline exactly.
    """

    student_rollout: np.random.Generator
    critic_shuffle: np.random.Generator
    actor_shuffle: np.random.Generator
    teacher_rollout: np.random.Generator
    teacher_shuffle: np.random.Generator
    selection: np.random.Generator


def iteration_streams(seed, k) -> IterationStreams:
    children = np.random.SeedSequence([int(seed), int(k)]).spawn(len(IterationStreams._fields))
    return IterationStreams(*(np.random.default_rng(c) for c in children))


@dataclass
class ActorCritic:
    actor: PolicyNetwork
    critic: ValueNetwork
    actor_opt: Optimizer
    critic_opt: Optimizer
    history: list = field(default_factory=list)

    @classmethod
    def create(cls, env, cfg: PpoConfig, seed=0, actor=None):
        """Fresh networks for ``env``; pass ``actor`` to warm-start from existing weights."""
        if actor is None:
            kw = {"action_dim": env.action_dim} if env.continuous else {"n_actions": env.n_actions}
            actor = PolicyNetwork(env.obs_dim, hidden_sizes=cfg.hidden_sizes, seed=seed, **kw)
        else:
            actor = actor.clone()
        critic = ValueNetwork(env.obs_dim, hidden_sizes=cfg.hidden_sizes, seed=seed + 7919)
        return cls(
            actor,
            critic,
            Optimizer(len(actor.params), cfg.actor_lr, method=cfg.optimizer),
            Optimizer(len(critic.params), cfg.critic_lr, method=cfg.optimizer),
        )


def likelihood_ratio(policy, states, actions, behavior_log_probs):
    """pi_theta(a|s) / pi_behavior(a|s) from recorded behavior log-probabilities."""
    ratio = np.exp(policy.log_prob(states, actions) - np.asarray(behavior_log_probs, dtype=np.float64))
    if not np.all(np.isfinite(ratio)):
        raise ContractError("non-finite likelihood ratio")
    return ratio


def clipped_surrogate(policy, states, actions, behavior_log_probs, advantages, clip_eps, with_grad=True):
    """Mean of min(r * A, clip(r, 1 - eps, 1 + eps) * A) and its gradient.

    Outside the clip interval the clipped branch has zero derivative.
    """
    advantages = np.asarray(advantages, dtype=np.float64)
    if advantages.size == 0:
        raise ContractError("clipped surrogate of an empty batch")
    dist, acts = policy.forward(states)
    logp = dist.log_prob(actions)
    ratio = np.exp(logp - np.asarray(behavior_log_probs, dtype=np.float64))
    if not np.all(np.isfinite(ratio)):
        raise ContractError("non-finite likelihood ratio")
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps)
    unclipped_obj = ratio * advantages
    clipped_obj = clipped * advantages
    value = float(np.mean(np.minimum(unclipped_obj, clipped_obj)))
    if not with_grad:
        return value
    inside = (ratio > 1.0 - clip_eps) & (ratio < 1.0 + clip_eps)
    active = inside | (unclipped_obj < clipped_obj)
    dlogp = np.where(active, unclipped_obj, 0.0) / len(advantages)
    head = tuple(g * dlogp[:, None] for g in dist.log_prob_grad(actions))
    return value, policy.backward(acts, head)


def mean_entropy(policy, states, with_grad=True):
    dist, acts = policy.forward(states)
    value = float(np.mean(dist.entropy()))
    if not with_grad:
        return value
    n = len(dist)
    head = tuple(g / n for g in dist.entropy_grad())
    return value, policy.backward(acts, head)


def normalized(adv):
    adv = np.asarray(adv, dtype=np.float64)
    if len(adv) < 2:
        return adv - adv.mean()
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def fit_critic(buffer: TrajectoryBuffer, critic: ValueNetwork, optimizer: Optimizer, cfg: PpoConfig, rng):
    """Minibatch MSE regression of V(s) onto ``buffer.returns``; student buffers only."""
    if buffer.source != STUDENT:
        raise ContractError("the critic is fitted on student rollouts only")
    if buffer.returns is None:
        raise ContractError("regression targets (returns) have not been computed")
    trace = []
    n = len(buffer)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start : start + cfg.minibatch_size]
            loss, grad = critic.mse(buffer.states[idx], buffer.returns[idx])
            optimizer.step(critic.params, grad, direction="descend")
            trace.append(loss)
    return trace


def run_actor_epochs(agent: ActorCritic, n, cfg: PpoConfig, rng, step_fn):
    """Shuffle ``n`` samples into minibatches for ``cfg.epochs`` and ascend ``step_fn``.

    ``step_fn(epoch, j, n_minibatches, idx)`` returns ``(objective, gradient)``.
    Returns the objective values in update order.
    """
    values = []
    n_mb = max(1, math.ceil(n / cfg.minibatch_size))
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for j in range(n_mb):
            idx = order[j * cfg.minibatch_size : (j + 1) * cfg.minibatch_size]
            value, grad = step_fn(epoch, j, n_mb, idx)
            if grad is not None:
                agent.actor_opt.step(agent.actor.params, grad, direction="ascend")
            values.append(value)
    return values


def prepare_student_batch(agent: ActorCritic, env, cfg: PpoConfig, streams: IterationStreams):
    """Collect S with the current policy, fit the critic on it, then estimate advantages.

    Critic targets are GAE returns under the pre-fit critic; the advantages used
    by the actor are recomputed with the fitted critic.
    """
    gae_cfg = GaeConfig(env.spec.gamma, cfg.gae_lambda)
    batch = collect(agent.actor, env, rng=streams.student_rollout, source=STUDENT, **cfg.rollout_budget())
    compute_gae(batch, agent.critic, gae_cfg)
    critic_trace = fit_critic(batch, agent.critic, agent.critic_opt, cfg, streams.critic_shuffle)
    compute_gae(batch, agent.critic, gae_cfg)
    return batch, critic_trace


def ppo_step_fn(agent, batch, cfg, adv, extra=None):
    """Per-minibatch objective: clipped surrogate plus entropy bonus (plus optional extra terms)."""
    actor = agent.actor

    def step(epoch, j, n_mb, idx):
        s, a = batch.states[idx], batch.actions[idx]
        value, grad = clipped_surrogate(actor, s, a, batch.log_probs[idx], adv[idx], cfg.clip_eps)
        if cfg.entropy_coef:
            h, gh = mean_entropy(actor, s)
            value += cfg.entropy_coef * h
            grad = grad + cfg.entropy_coef * gh
        if extra is not None:
            value, grad = extra(epoch, j, n_mb, idx, value, grad)
        return value, grad

    return step


def iteration_metrics(agent, batch, old_dist, critic_trace, objective_trace, **more):
    new_dist = agent.actor.distribution(batch.states)
    metrics = {
        "mean_return": float(np.mean(batch.episode_returns)) if batch.episode_returns else float("nan"),
        "value_loss": float(np.mean(critic_trace)) if critic_trace else float("nan"),
        "objective": float(np.mean(objective_trace)) if objective_trace else float("nan"),
        "kl": float(np.mean(new_dist.kl_from(old_dist))),
        "entropy": float(np.mean(new_dist.entropy())),
    }
    metrics.update(more)
    return metrics


def ppo_iteration(agent: ActorCritic, env, cfg: PpoConfig, seed, k=1):
    """One baseline iteration: collect S, fit critic, GAE, maximise the clipped objective."""
    streams = iteration_streams(seed, k)
    batch, critic_trace = prepare_student_batch(agent, env, cfg, streams)
    old_dist = agent.actor.distribution(batch.states)
    adv = normalized(batch.advantages) if cfg.normalize_advantages else batch.advantages
    trace = run_actor_epochs(agent, len(batch), cfg, streams.actor_shuffle, ppo_step_fn(agent, batch, cfg, adv))
    metrics = iteration_metrics(agent, batch, old_dist, critic_trace, trace, slot="ppo")
    agent.history.append(metrics)
    return metrics
