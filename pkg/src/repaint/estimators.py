"""scikit-learn style wrappers around the PPO baseline and REPAINT transfer.

``fit`` trains on the configured task (there is no ``X``/``y``); ``predict`` maps
observations to greedy actions and ``score`` is the mean evaluation return.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import ContractError, validate_observations
from .envs import make_env, make_task
from .ppo import ActorCritic, PpoConfig, ppo_iteration
from .rollout import evaluate
from .transfer import BetaSchedule, TeacherPolicy, Threshold, TransferConfig, transfer_iteration


class PPOAgent(BaseEstimator):
    """Clipped-PPO actor-critic trained from scratch on one task.

    Parameters mirror :class:`~repaint.ppo.PpoConfig` plus the task description.
    After ``fit`` the trained networks live in ``agent_`` and per-iteration
    metrics in ``history_``.
    """

    def __init__(
        self,
        env_id="goal-reacher-1d",
        weights=(1.0, -1.0, 1.0),
        gamma=0.99,
        iterations=30,
        rollout_steps=512,
        epochs=10,
        minibatch_size=64,
        clip_eps=0.2,
        entropy_coef=1e-4,
        learning_rate=1e-3,
        gae_lambda=0.95,
        hidden_sizes=(32, 32),
        random_state=0,
    ):
        self.env_id = env_id
        self.weights = weights
        self.gamma = gamma
        self.iterations = iterations
        self.rollout_steps = rollout_steps
        self.epochs = epochs
        self.minibatch_size = minibatch_size
        self.clip_eps = clip_eps
        self.entropy_coef = entropy_coef
        self.learning_rate = learning_rate
        self.gae_lambda = gae_lambda
        self.hidden_sizes = hidden_sizes
        self.random_state = random_state

    def _ppo_config(self):
        return PpoConfig(
            clip_eps=self.clip_eps,
            epochs=self.epochs,
            minibatch_size=self.minibatch_size,
            entropy_coef=self.entropy_coef,
            actor_lr=self.learning_rate,
            critic_lr=self.learning_rate,
            gae_lambda=self.gae_lambda,
            rollout_steps=self.rollout_steps,
            hidden_sizes=tuple(self.hidden_sizes),
        )

    def _step(self, k):
        return ppo_iteration(self.agent_, self.env_, self.ppo_config_, self.random_state, k)

    def fit(self, X=None, y=None):
        """Train for ``iterations`` iterations. ``X`` and ``y`` are ignored."""
        if int(self.iterations) < 0:
            raise ContractError("iterations must be non-negative")
        self.task_ = make_task(self.env_id, self.weights, gamma=self.gamma)
        self.env_ = make_env(self.task_)
        self.ppo_config_ = self._ppo_config()
        self.agent_ = ActorCritic.create(self.env_, self.ppo_config_, seed=self.random_state)
        self.history_ = [self._step(k) for k in range(1, int(self.iterations) + 1)]
        self.n_features_in_ = self.env_.obs_dim
        return self

    @property
    def policy_(self):
        check_is_fitted(self, "agent_")
        return self.agent_.actor

    def predict(self, X):
        """Most likely action (discrete) or mean action (continuous) per observation row."""
        X = validate_observations(X, self.policy_.obs_dim)
        return self.policy_.distribution(X).mode()

    def predict_proba(self, X):
        """Action probabilities for discrete-action tasks."""
        if self.policy_.head != "categorical":
            raise ContractError("predict_proba needs a discrete action space")
        return self.policy_.distribution(validate_observations(X, self.policy_.obs_dim)).probs

    def score(self, X=None, y=None, episodes=20, deterministic=False):
        """Mean return over ``episodes`` evaluation episodes on the fitted task."""
        check_is_fitted(self, "agent_")
        seeds = [int(s) for s in np.random.SeedSequence([int(self.random_state), 0x5C0]).generate_state(episodes)]
        rng = None if deterministic else np.random.default_rng([int(self.random_state), 0x5C1])
        return evaluate(self.policy_, self.env_, episodes, seeds, deterministic=deterministic, rng=rng)[0]


class RepaintAgent(PPOAgent):
    """PPO student trained with REPAINT transfer from a fitted teacher.

    ``teacher`` is a fitted :class:`PPOAgent`, a policy network or a
    :class:`~repaint.transfer.TeacherPolicy`. With ``alpha_ins=0`` this is
    kickstarting; with ``beta0=0`` and ``alpha_ins=0`` it reduces to PPO.
    """

    def __init__(
        self,
        teacher=None,
        env_id="goal-reacher-1d",
        weights=(1.0, -1.0, 1.0),
        gamma=0.99,
        iterations=30,
        rollout_steps=512,
        epochs=10,
        minibatch_size=64,
        clip_eps=0.2,
        entropy_coef=1e-4,
        learning_rate=1e-3,
        gae_lambda=0.95,
        hidden_sizes=(32, 32),
        random_state=0,
        beta0=0.2,
        beta_decay=0.95,
        selection=Threshold(0.8),
        alpha_rep=1.0,
        alpha_ins=1.0,
        schedule="combined",
        rep_steps=1,
        ins_steps=1,
        repaint_iterations=15,
    ):
        super().__init__(
            env_id=env_id, weights=weights, gamma=gamma, iterations=iterations, rollout_steps=rollout_steps,
            epochs=epochs, minibatch_size=minibatch_size, clip_eps=clip_eps, entropy_coef=entropy_coef,
            learning_rate=learning_rate, gae_lambda=gae_lambda, hidden_sizes=hidden_sizes, random_state=random_state,
        )
        self.teacher = teacher
        self.beta0 = beta0
        self.beta_decay = beta_decay
        self.selection = selection
        self.alpha_rep = alpha_rep
        self.alpha_ins = alpha_ins
        self.schedule = schedule
        self.rep_steps = rep_steps
        self.ins_steps = ins_steps
        self.repaint_iterations = repaint_iterations

    def _teacher_policy(self):
        t = self.teacher
        if t is None:
            raise ContractError("RepaintAgent needs a teacher")
        if isinstance(t, PPOAgent):
            t = t.policy_
        return t if isinstance(t, TeacherPolicy) else TeacherPolicy(t)

    def fit(self, X=None, y=None):
        self.teacher_ = self._teacher_policy()
        self.transfer_config_ = TransferConfig(
            betas=(BetaSchedule(self.beta0, self.beta_decay),),
            selection=self.selection,
            alpha_rep=self.alpha_rep,
            alpha_ins=self.alpha_ins,
            schedule=self.schedule,
            rep_steps=self.rep_steps,
            ins_steps=self.ins_steps,
            repaint_iterations=self.repaint_iterations,
        )
        return super().fit(X, y)

    def _step(self, k):
        return transfer_iteration(
            self.agent_, self.env_, [self.teacher_], self.ppo_config_, self.transfer_config_, k, self.random_state
        )
