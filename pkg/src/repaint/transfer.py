"""REPAINT: kickstarting-style representation transfer plus advantage-filtered instance transfer.

Representation transfer adds ``-beta_k * H(teacher || student)`` to the clipped
PPO objective on student rollouts. Instance transfer replays teacher rollouts
scored by the student's reward and critic, keeps only transitions whose
advantage passes a selection rule, and optimises the clipped objective with the
teacher as the behaviour policy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from ._validation import ContractError
from .approximator import Optimizer, QNetwork
from .ppo import (
    ActorCritic,
    PpoConfig,
    clipped_surrogate,
    iteration_metrics,
    mean_entropy,
    iteration_streams,
    normalized,
    ppo_iteration,
    ppo_step_fn,
    prepare_student_batch,
    run_actor_epochs,
)
from .rollout import TEACHER, GaeConfig, TrajectoryBuffer, collect, compute_gae

B_MIN = 1e-6


class TeacherPolicy:
    """Frozen copy of a trained policy.

    Behaviour log-probabilities reported by :meth:`act` are floored at
    ``log(b_min)`` so ratios against the teacher stay finite.
    """

    def __init__(self, network, teacher_id="teacher", b_min=B_MIN):
        self.network = network.clone()
        self.network.params.values.setflags(write=False)
        self.id = teacher_id
        self.b_min = float(b_min)
        self.obs_dim = network.obs_dim
        self.head = network.head
        self.n_out = network.n_out

    def distribution(self, states):
        return self.network.distribution(states)

    def floored_log_prob(self, states, actions):
        return np.maximum(self.network.log_prob(states, actions), math.log(self.b_min))

    def act(self, state, rng, deterministic=False):
        dist = self.network.distribution(state)
        action = dist.mode() if deterministic else dist.sample(rng)
        logp = max(float(dist.log_prob(action)[0]), math.log(self.b_min))
        if self.head == "categorical":
            return int(action[0]), logp
        return action[0], logp


@dataclass(frozen=True)
class BetaSchedule:
    """Geometric cross-entropy weight: ``beta_k = beta0 * decay**k``."""

    beta0: float = 0.2
    decay: float = 0.95

    def __post_init__(self):
        if self.beta0 < 0:
            raise ContractError("beta0 must be non-negative")
        if not 0.0 < self.decay <= 1.0:
            raise ContractError("beta decay must lie in (0, 1]")

    def __call__(self, k):
        return self.beta0 * self.decay**k


class Threshold(NamedTuple):
    """Keep transitions with advantage >= zeta (remove those below it)."""

    zeta: float = 0.0

    def select(self, advantages, rng=None):
        return np.flatnonzero(advantages >= self.zeta)

    @property
    def label(self):
        return f"threshold({self.zeta:g})"


class AbsThreshold(NamedTuple):
    """Keep transitions with |advantage| > zeta."""

    zeta: float = 0.0

    def select(self, advantages, rng=None):
        return np.flatnonzero(np.abs(advantages) > self.zeta)

    @property
    def label(self):
        return f"abs_threshold({self.zeta:g})"


class TopFraction(NamedTuple):
    """Keep the ceil(fraction * T) highest advantages; ties go to the earlier index."""

    fraction: float = 0.2

    def select(self, advantages, rng=None):
        n = len(advantages)
        n_keep = math.ceil(round(self.fraction * n, 9))
        order = np.argsort(-np.asarray(advantages), kind="stable")
        return np.sort(order[:n_keep])

    @property
    def label(self):
        return f"top_fraction({self.fraction:g})"


class Prioritized(NamedTuple):
    """Sample with probability proportional to (max(A, 0) + delta) ** exponent, with replacement.

    The sampled transitions are used with equal weight (no importance correction).
    """

    exponent: float = 0.6
    sample_count: int | None = None
    delta: float = 1e-6

    def probabilities(self, advantages):
        p = (np.maximum(advantages, 0.0) + self.delta) ** self.exponent
        return p / p.sum()

    def select(self, advantages, rng):
        n = len(advantages)
        if n == 0:
            return np.zeros(0, dtype=int)
        size = n if self.sample_count is None else self.sample_count
        return rng.choice(n, size=size, replace=True, p=self.probabilities(advantages))

    @property
    def label(self):
        return f"prioritized({self.exponent:g})"


SELECTION_RULES = {
    "threshold": Threshold,
    "abs_threshold": AbsThreshold,
    "top_fraction": TopFraction,
    "prioritized": Prioritized,
}


def check_rule(rule):
    if isinstance(rule, (Threshold, AbsThreshold)):
        if not math.isfinite(rule.zeta) and rule.zeta != -math.inf:
            raise ContractError("selection threshold must be finite")
    elif isinstance(rule, TopFraction):
        if not 0.0 < rule.fraction <= 1.0:
            raise ContractError("top fraction must lie in (0, 1]")
    elif isinstance(rule, Prioritized):
        if rule.exponent < 0:
            raise ContractError("priority exponent must be non-negative")
    else:
        raise ContractError(f"unknown selection rule {rule!r}")
    return rule


def select_experiences(buffer: TrajectoryBuffer, rule, rng=None) -> TrajectoryBuffer:
    """Filter teacher transitions by their student-task advantages."""
    if buffer.advantages is None:
        raise ContractError("advantages must be computed before selection")
    idx = check_rule(rule).select(buffer.advantages, rng)
    return buffer.subset(idx)


@dataclass(frozen=True)
class TransferConfig:
    """Transfer hyperparameters. ``betas`` holds one schedule per teacher.

    ``alpha_rep`` and ``alpha_ins`` scale the two gradient terms before the
    shared optimizer step. ``schedule='alternating'`` runs ``rep_steps``
    representation iterations followed by ``ins_steps`` instance iterations;
    ``'combined'`` applies both terms every iteration. Transfer is active for
    the first ``repaint_iterations`` iterations only.
    """

    betas: tuple = (BetaSchedule(),)
    selection: object = Threshold(0.8)
    alpha_rep: float = 1.0
    alpha_ins: float = 1.0
    schedule: str = "alternating"
    rep_steps: int = 1
    ins_steps: int = 1
    repaint_iterations: int = 15
    teacher_rollout_steps: int | None = None
    teacher_rollout_episodes: int | None = None
    teacher_gae_lambda: float | None = None

    def __post_init__(self):
        betas = self.betas
        if isinstance(betas, BetaSchedule):
            betas = (betas,)
        object.__setattr__(self, "betas", tuple(betas))
        check_rule(self.selection)
        if self.alpha_rep < 0 or self.alpha_ins < 0:
            raise ContractError("alpha_rep and alpha_ins must be non-negative")
        if self.schedule not in ("alternating", "combined"):
            raise ContractError(f"unknown schedule {self.schedule!r}")
        if self.rep_steps < 0 or self.ins_steps < 0 or self.rep_steps + self.ins_steps == 0:
            raise ContractError("alternation ratio needs non-negative steps, not both zero")
        if self.repaint_iterations < 0:
            raise ContractError("repaint_iterations must be non-negative")
        if self.teacher_rollout_steps is not None and self.teacher_rollout_episodes is not None:
            raise ContractError("set at most one teacher rollout budget")

    def beta_values(self, k, n_teachers):
        if len(self.betas) == 1:
            return [self.betas[0](k)] * n_teachers
        if len(self.betas) != n_teachers:
            raise ContractError("need one beta schedule per teacher")
        return [b(k) for b in self.betas]

    def slot(self, k):
        """'rep' or 'ins' for 1-based iteration ``k`` of the alternating schedule."""
        period = self.rep_steps + self.ins_steps
        return "rep" if (k - 1) % period < self.rep_steps else "ins"

    def teacher_budget(self, ppo_cfg: PpoConfig):
        if self.teacher_rollout_steps is not None:
            return {"steps": self.teacher_rollout_steps}
        if self.teacher_rollout_episodes is not None:
            return {"episodes": self.teacher_rollout_episodes}
        return ppo_cfg.rollout_budget()


def as_teachers(teachers):
    if isinstance(teachers, TeacherPolicy):
        return [teachers]
    return list(teachers or [])


def aux_cross_entropy(teacher, policy, states, with_grad=True):
    """Mean H(teacher || policy) over states drawn from student rollouts."""
    target = teacher.distribution(states)
    dist, acts = policy.forward(states)
    value = float(np.mean(dist.cross_entropy(target)))
    if not with_grad:
        return value
    n = len(dist)
    head = tuple(g / n for g in dist.cross_entropy_grad(target))
    return value, policy.backward(acts, head)


def representation_objective(
    policy, states, actions, behavior_log_probs, advantages, teachers, betas, clip_eps, entropy_coef=0.0
):
    """Clipped surrogate (+ entropy bonus) minus the beta-weighted cross-entropy to each teacher."""
    value, grad = clipped_surrogate(policy, states, actions, behavior_log_probs, advantages, clip_eps)
    if entropy_coef:
        h, gh = mean_entropy(policy, states)
        value += entropy_coef * h
        grad = grad + entropy_coef * gh
    for teacher, beta in zip(as_teachers(teachers), betas):
        if beta:
            ce, gce = aux_cross_entropy(teacher, policy, states)
            value -= beta * ce
            grad = grad - beta * gce
    return value, grad


def instance_objective(policy, buffer: TrajectoryBuffer, clip_eps):
    """Clipped objective on selected teacher transitions, ratio taken against the teacher.

    An empty buffer contributes zero objective and zero gradient.
    """
    if len(buffer) == 0:
        return 0.0, np.zeros(len(policy.params))
    return clipped_surrogate(policy, buffer.states, buffer.actions, buffer.log_probs, buffer.advantages, clip_eps)


class Diagnostic(NamedTuple):
    F: float
    rep_sq_norm: float
    ins_sq_norm: float
    inner: float


def gradient_diagnostic(rep_grad, ins_grad, A_k) -> Diagnostic:
    """||g_rep||^2 + A ||g_ins||^2 + (1 + A) g_rep . g_ins, with A the instance/representation step ratio."""
    g1 = np.asarray(rep_grad, dtype=np.float64)
    g2 = np.asarray(ins_grad, dtype=np.float64)
    r, i, c = float(g1 @ g1), float(g2 @ g2), float(g1 @ g2)
    return Diagnostic(r + A_k * i + (1.0 + A_k) * c, r, i, c)


def collect_teacher_instances(agent, env, teachers, ppo_cfg, cfg: TransferConfig, streams):
    """Roll out every teacher on the student task, score with the student critic, then select."""
    lam = cfg.teacher_gae_lambda if cfg.teacher_gae_lambda is not None else ppo_cfg.gae_lambda
    gae_cfg = GaeConfig(env.spec.gamma, lam)
    buffers = []
    for teacher in teachers:
        buf = collect(teacher, env, rng=streams.teacher_rollout, source=TEACHER, **cfg.teacher_budget(ppo_cfg))
        compute_gae(buf, agent.critic, gae_cfg)
        buffers.append(buf)
    raw = TrajectoryBuffer.concatenate(buffers)
    return raw, select_experiences(raw, cfg.selection, streams.selection)


def _teacher_chunks(n_selected, n_mb, rng):
    return np.array_split(rng.permutation(n_selected), n_mb)


def _selection_metrics(raw, selected):
    return {
        "teacher_return": float(np.mean(raw.episode_returns)) if raw.episode_returns else float("nan"),
        "n_teacher": len(raw),
        "n_selected": len(selected),
    }


def repaint_iteration(agent: ActorCritic, env, teachers, ppo_cfg: PpoConfig, cfg: TransferConfig, k, seed):
    """Combined update: theta += alpha_rep * grad L_rep + alpha_ins * grad L_ins.

    Past ``cfg.repaint_iterations`` this is exactly :func:`ppo_iteration`.
    """
    if k < 1:
        raise ContractError("iterations are numbered from 1")
    teachers = as_teachers(teachers)
    if k > cfg.repaint_iterations or not teachers:
        return ppo_iteration(agent, env, ppo_cfg, seed, k)
    streams = iteration_streams(seed, k)
    batch, critic_trace = prepare_student_batch(agent, env, ppo_cfg, streams)
    use_ins = cfg.alpha_ins > 0
    if use_ins:
        raw, selected = collect_teacher_instances(agent, env, teachers, ppo_cfg, cfg, streams)
    betas = cfg.beta_values(k, len(teachers))
    old_dist = agent.actor.distribution(batch.states)
    adv = normalized(batch.advantages) if ppo_cfg.normalize_advantages else batch.advantages
    actor = agent.actor

    diag = None
    if use_ins:
        g_rep = representation_objective(
            actor, batch.states, batch.actions, batch.log_probs, adv, teachers, betas,
            ppo_cfg.clip_eps, ppo_cfg.entropy_coef,
        )[1]
        g_ins = instance_objective(actor, selected, ppo_cfg.clip_eps)[1]
        a_k = cfg.alpha_ins / cfg.alpha_rep if cfg.alpha_rep > 0 else float("inf")
        diag = gradient_diagnostic(g_rep, g_ins, a_k) if math.isfinite(a_k) else None

    chunks = {}

    def extra(epoch, j, n_mb, idx, value, grad):
        s = batch.states[idx]
        for teacher, beta in zip(teachers, betas):
            if beta:
                ce, gce = aux_cross_entropy(teacher, actor, s)
                value -= beta * ce
                grad = grad - beta * gce
        if cfg.alpha_rep != 1.0:
            value, grad = cfg.alpha_rep * value, cfg.alpha_rep * grad
        if use_ins and len(selected):
            if epoch not in chunks:
                chunks[epoch] = _teacher_chunks(len(selected), n_mb, streams.teacher_shuffle)
            t_idx = chunks[epoch][j]
            if len(t_idx):
                v_ins, g_ins = instance_objective(actor, selected.subset(t_idx), ppo_cfg.clip_eps)
                value += cfg.alpha_ins * v_ins
                grad = grad + cfg.alpha_ins * g_ins
        return value, grad

    step = ppo_step_fn(agent, batch, ppo_cfg, adv, extra=extra)
    trace = run_actor_epochs(agent, len(batch), ppo_cfg, streams.actor_shuffle, step)
    more = {"slot": "repaint", "beta": betas[0]}
    if use_ins:
        more.update(_selection_metrics(raw, selected))
    if diag is not None:
        more["F"] = diag.F
    metrics = iteration_metrics(agent, batch, old_dist, critic_trace, trace, **more)
    agent.history.append(metrics)
    return metrics


def representation_iteration(agent, env, teachers, ppo_cfg, cfg: TransferConfig, k, seed):
    """Kickstarting slot: PPO on student rollouts with the cross-entropy pull, scaled by alpha_rep."""
    teachers = as_teachers(teachers)
    streams = iteration_streams(seed, k)
    batch, critic_trace = prepare_student_batch(agent, env, ppo_cfg, streams)
    betas = cfg.beta_values(k, len(teachers))
    old_dist = agent.actor.distribution(batch.states)
    adv = normalized(batch.advantages) if ppo_cfg.normalize_advantages else batch.advantages
    actor = agent.actor

    def extra(epoch, j, n_mb, idx, value, grad):
        s = batch.states[idx]
        for teacher, beta in zip(teachers, betas):
            if beta:
                ce, gce = aux_cross_entropy(teacher, actor, s)
                value -= beta * ce
                grad = grad - beta * gce
        if cfg.alpha_rep != 1.0:
            value, grad = cfg.alpha_rep * value, cfg.alpha_rep * grad
        return value, grad

    trace = run_actor_epochs(
        agent, len(batch), ppo_cfg, streams.actor_shuffle, ppo_step_fn(agent, batch, ppo_cfg, adv, extra=extra)
    )
    metrics = iteration_metrics(agent, batch, old_dist, critic_trace, trace, slot="rep", beta=betas[0])
    agent.history.append(metrics)
    return metrics


def instance_iteration(agent, env, teachers, ppo_cfg, cfg: TransferConfig, k, seed):
    """Instance slot: teacher rollouts only; the critic is not touched."""
    teachers = as_teachers(teachers)
    streams = iteration_streams(seed, k)
    raw, selected = collect_teacher_instances(agent, env, teachers, ppo_cfg, cfg, streams)
    actor = agent.actor
    old_dist = actor.distribution(raw.states)
    trace = []
    if len(selected) and cfg.alpha_ins > 0:

        def step(epoch, j, n_mb, idx):
            v, g = instance_objective(actor, selected.subset(idx), ppo_cfg.clip_eps)
            return cfg.alpha_ins * v, cfg.alpha_ins * g

        trace = run_actor_epochs(agent, len(selected), ppo_cfg, streams.actor_shuffle, step)
    new_dist = actor.distribution(raw.states)
    metrics = {
        "mean_return": float("nan"),
        "value_loss": float("nan"),
        "objective": float(np.mean(trace)) if trace else float("nan"),
        "kl": float(np.mean(new_dist.kl_from(old_dist))),
        "entropy": float(np.mean(new_dist.entropy())),
        "slot": "ins",
    }
    metrics.update(_selection_metrics(raw, selected))
    agent.history.append(metrics)
    return metrics


def alternating_repaint_iteration(agent, env, teachers, ppo_cfg, cfg: TransferConfig, k, seed):
    """One iteration of the alternating schedule: a representation or an instance slot.

    Past ``cfg.repaint_iterations`` this is exactly :func:`ppo_iteration`.
    """
    if k < 1:
        raise ContractError("iterations are numbered from 1")
    if k > cfg.repaint_iterations or not as_teachers(teachers):
        return ppo_iteration(agent, env, ppo_cfg, seed, k)
    if cfg.slot(k) == "rep":
        return representation_iteration(agent, env, teachers, ppo_cfg, cfg, k, seed)
    return instance_iteration(agent, env, teachers, ppo_cfg, cfg, k, seed)


def transfer_iteration(agent, env, teachers, ppo_cfg, cfg: TransferConfig, k, seed):
    if cfg.schedule == "combined":
        return repaint_iteration(agent, env, teachers, ppo_cfg, cfg, k, seed)
    return alternating_repaint_iteration(agent, env, teachers, ppo_cfg, cfg, k, seed)


@dataclass(frozen=True)
class QTransferConfig:
    """Q-learning instance transfer: keep samples whose TD target exceeds Q(s, a) by more than zeta.

    ``epsilon`` is the exploration rate of the online samples mixed into the
    teacher replay buffer.
    """

    gamma: float = 0.99
    zeta: float = 0.0
    epsilon: float = 0.1
    learning_rate: float = 0.1

    def __post_init__(self):
        if self.zeta < 0:
            raise ContractError("the Q-target filter threshold must be non-negative")
        if not 0.0 <= self.gamma <= 1.0 or not 0.0 <= self.epsilon <= 1.0:
            raise ContractError("gamma and epsilon must lie in [0, 1]")


def epsilon_greedy_action(qnet: QNetwork, state, epsilon, rng):
    if rng.random() < epsilon:
        return int(rng.integers(qnet.n_actions))
    return int(np.argmax(qnet.predict(state)[0]))


def q_transfer_update(qnet: QNetwork, cfg: QTransferConfig, teacher_buffer, egreedy_buffer=None, optimizer=None):
    """One filtered regression step on 0.5 * sum (Q(s, a) - y)^2 with y = r + gamma max Q(s', .).

    Targets are held fixed for the step. Returns the loss on the kept samples and
    how many were kept; with nothing kept the parameters are unchanged.
    """
    buffers = [b for b in (teacher_buffer, egreedy_buffer) if b is not None and len(b)]
    if not buffers:
        return {"loss": 0.0, "n_kept": 0, "n_total": 0}
    states = np.concatenate([b.states for b in buffers])
    actions = np.concatenate([b.actions for b in buffers]).astype(int)
    rewards = np.concatenate([b.rewards for b in buffers])
    next_states = np.concatenate([b.next_states for b in buffers])
    terminal = np.concatenate([_terminal_flags(b) for b in buffers])
    q_next = qnet.predict(next_states).max(axis=1)
    targets = rewards + cfg.gamma * (1.0 - terminal) * q_next
    q_all, acts = qnet.forward(states)
    rows = np.arange(len(actions))
    gaps = targets - q_all[rows, actions]
    keep = gaps > cfg.zeta
    n_kept = int(keep.sum())
    if n_kept == 0:
        return {"loss": 0.0, "n_kept": 0, "n_total": len(actions)}
    loss = 0.5 * float(np.sum(gaps[keep] ** 2))
    dq = np.zeros_like(q_all)
    np.add.at(dq, (rows[keep], actions[keep]), -gaps[keep])
    grad = qnet.backward(acts, dq)
    if optimizer is None:
        optimizer = Optimizer(len(qnet.params), cfg.learning_rate, method="sgd")
    optimizer.step(qnet.params, grad, direction="descend")
    return {"loss": loss, "n_kept": n_kept, "n_total": len(actions)}


def _terminal_flags(buffer):
    flags = getattr(buffer, "terminals", None)
    if flags is None:
        flags = buffer.dones
    return np.asarray(flags, dtype=np.float64)


PRESETS = {
    # continuous control: 2048-step batches, zeta 0.8
    "reacher": {
        "ppo": dict(rollout_steps=2048, epochs=10, actor_lr=3e-4, critic_lr=3e-4, gae_lambda=0.95,
                    entropy_coef=1e-4, minibatch_size=64, clip_eps=0.2),
        "gamma": 0.99,
        "transfer": dict(betas=(BetaSchedule(0.2, 0.95),), selection=Threshold(0.8), repaint_iterations=15),
    },
    "ant": {
        "ppo": dict(rollout_steps=2048, epochs=10, actor_lr=3e-4, critic_lr=3e-4, gae_lambda=0.95,
                    entropy_coef=1e-4, minibatch_size=64, clip_eps=0.2),
        "gamma": 0.99,
        "transfer": dict(betas=(BetaSchedule(0.2, 0.95),), selection=Threshold(0.8), repaint_iterations=50),
    },
    # racing: episode batches, short transfer phase
    "racer-single": {
        "ppo": dict(rollout_steps=None, rollout_episodes=20, epochs=8, actor_lr=3e-4, critic_lr=3e-4,
                    gae_lambda=0.95, entropy_coef=1e-3, minibatch_size=64, clip_eps=0.2),
        "gamma": 0.999,
        "transfer": dict(betas=(BetaSchedule(0.2, 0.95),), selection=Threshold(0.2), repaint_iterations=4,
                         teacher_rollout_episodes=2),
    },
    "racer-multi": {
        "ppo": dict(rollout_steps=None, rollout_episodes=20, epochs=8, actor_lr=3e-4, critic_lr=3e-4,
                    gae_lambda=0.95, entropy_coef=1e-3, minibatch_size=64, clip_eps=0.2),
        "gamma": 0.999,
        "transfer": dict(betas=(BetaSchedule(0.2, 0.95),), selection=Threshold(0.2), repaint_iterations=20,
                         teacher_rollout_episodes=2),
    },
    # strategy games: very small batches
    "starcraft": {
        "ppo": dict(rollout_steps=None, rollout_episodes=2, epochs=6, actor_lr=3e-5, critic_lr=3e-5,
                    gae_lambda=0.95, entropy_coef=1e-2, minibatch_size=64, clip_eps=0.2),
        "gamma": 0.99,
        "transfer": dict(betas=(BetaSchedule(0.1, 0.95),), selection=Threshold(0.2), repaint_iterations=25,
                         teacher_rollout_episodes=2),
    },
}


def preset(name):
    """``(PpoConfig, TransferConfig, gamma)`` for a named hyperparameter preset."""
    if name not in PRESETS:
        raise ContractError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[name]
    return PpoConfig(**p["ppo"]), TransferConfig(**p["transfer"]), p["gamma"]
