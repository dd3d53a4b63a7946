"""Small MLP policy and value networks with hand-written reverse-mode gradients.

All parameters of a network live in one flat float64 array (:class:`ParamVector`);
layers are reshaped views into it, so optimizers and gradient checks work on a
single vector. Objectives elsewhere in the package compute the derivative of a
scalar with respect to the network's head outputs and call ``backward`` to get
the flat parameter gradient.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from ._validation import ContractError, check_finite, check_states

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
CHECKPOINT_FORMAT = "repaint-params"
CHECKPOINT_VERSION = 1


class ParamVector:
    """Flat parameter storage with a fixed named layout."""

    def __init__(self, layout, values=None):
        self.layout = tuple((str(name), tuple(int(s) for s in shape)) for name, shape in layout)
        offsets = {}
        pos = 0
        for name, shape in self.layout:
            size = int(np.prod(shape)) if shape else 1
            offsets[name] = (pos, pos + size, shape)
            pos += size
        self._offsets = offsets
        if values is None:
            values = np.zeros(pos)
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (pos,):
            raise ContractError(f"layout needs {pos} values, got shape {values.shape}")
        self.values = values.copy()

    def __len__(self):
        return self.values.shape[0]

    def view(self, name, flat=None):
        """Reshaped view of one segment, of ``self.values`` or a same-layout array."""
        start, stop, shape = self._offsets[name]
        arr = self.values if flat is None else flat
        return arr[start:stop].reshape(shape)

    def names(self):
        return [name for name, _ in self.layout]

    def copy(self):
        return ParamVector(self.layout, self.values)

    def assign(self, values):
        values = check_finite(values, "parameters")
        if values.shape != self.values.shape:
            raise ContractError("parameter length does not match layout")
        self.values[:] = values


def _orthogonal(rng, n_in, n_out, gain):
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


class MLP:
    """Dense tanh network; parameters are passed in so several heads can share a vector."""

    def __init__(self, sizes, prefix="", output_bias=True):
        self.sizes = tuple(int(s) for s in sizes)
        if len(self.sizes) < 2:
            raise ContractError("an MLP needs at least input and output sizes")
        self.prefix = prefix
        self.output_bias = bool(output_bias)

    def _has_bias(self, i):
        return self.output_bias or i < self.n_layers - 1

    def layout(self):
        out = []
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            out.append((f"{self.prefix}W{i}", (n_in, n_out)))
            if self._has_bias(i):
                out.append((f"{self.prefix}b{i}", (n_out,)))
        return out

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def init(self, params, rng, hidden_gain=math.sqrt(2.0), output_gain=1.0):
        for i, (n_in, n_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            gain = output_gain if i == self.n_layers - 1 else hidden_gain
            params.view(f"{self.prefix}W{i}")[:] = _orthogonal(rng, n_in, n_out, gain)
            if self._has_bias(i):
                params.view(f"{self.prefix}b{i}")[:] = 0.0

    def forward(self, params, x):
        acts = [x]
        h = x
        for i in range(self.n_layers):
            z = h @ params.view(f"{self.prefix}W{i}")
            if self._has_bias(i):
                z = z + params.view(f"{self.prefix}b{i}")
            h = np.tanh(z) if i < self.n_layers - 1 else z
            acts.append(h)
        return h, acts

    def backward(self, params, acts, dout, grad):
        """Accumulate d(loss)/d(params) into ``grad`` (same layout) given d(loss)/d(output)."""
        d = dout
        for i in reversed(range(self.n_layers)):
            h_in = acts[i]
            params.view(f"{self.prefix}W{i}", grad)[:] += h_in.T @ d
            if self._has_bias(i):
                params.view(f"{self.prefix}b{i}", grad)[:] += d.sum(axis=0)
            if i > 0:
                d = (d @ params.view(f"{self.prefix}W{i}").T) * (1.0 - acts[i] ** 2)
        return grad


class Categorical:
    """Batch of categorical distributions parameterised by logits, shape (N, n)."""

    kind = "categorical"

    def __init__(self, logits):
        logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
        shifted = logits - logits.max(axis=1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        self.logits = logits
        self.log_probs = shifted - lse
        self.probs = np.exp(self.log_probs)

    @classmethod
    def from_probs(cls, probs):
        probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
        if np.any(probs <= 0):
            raise ContractError("categorical probabilities must be strictly positive")
        return cls(np.log(probs))

    @property
    def n_actions(self):
        return self.probs.shape[1]

    def __len__(self):
        return self.probs.shape[0]

    def _check_actions(self, actions):
        actions = np.asarray(actions)
        if actions.ndim == 0:
            actions = np.full(len(self), int(actions))
        if actions.shape != (len(self),):
            raise ContractError("one action per distribution is required")
        if not np.issubdtype(actions.dtype, np.integer):
            if not np.all(np.equal(np.mod(actions, 1), 0)):
                raise ContractError("categorical actions must be integers")
            actions = actions.astype(np.int64)
        if np.any(actions < 0) or np.any(actions >= self.n_actions):
            raise ContractError("action outside the categorical support")
        return actions

    def log_prob(self, actions):
        actions = self._check_actions(actions)
        return self.log_probs[np.arange(len(self)), actions]

    def log_prob_grad(self, actions):
        actions = self._check_actions(actions)
        g = -self.probs.copy()
        g[np.arange(len(self)), actions] += 1.0
        return (g,)

    def entropy(self):
        return -(self.probs * self.log_probs).sum(axis=1)

    def entropy_grad(self):
        h = self.entropy()
        return (-self.probs * (self.log_probs + h[:, None]),)

    def cross_entropy(self, target):
        """H(target || self) = -sum_a target(a) log self(a), per row."""
        return -(target.probs * self.log_probs).sum(axis=1)

    def cross_entropy_grad(self, target):
        mass = target.probs.sum(axis=1, keepdims=True)
        return (self.probs * mass - target.probs,)

    def kl_from(self, other):
        """KL(other || self) per row."""
        return (other.probs * (other.log_probs - self.log_probs)).sum(axis=1)

    def sample(self, rng):
        u = rng.random(len(self))
        cdf = np.cumsum(self.probs, axis=1)
        idx = (u[:, None] > cdf).sum(axis=1)
        return np.minimum(idx, self.n_actions - 1)

    def mode(self):
        return self.probs.argmax(axis=1)

    def take(self, idx):
        return Categorical(self.logits[idx])


class DiagGaussian:
    """Batch of diagonal Gaussians; ``mean`` is (N, d), ``log_std`` broadcast to (N, d)."""

    kind = "gaussian"
    _HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

    def __init__(self, mean, log_std):
        self.mean = np.atleast_2d(np.asarray(mean, dtype=np.float64))
        self.log_std = np.broadcast_to(np.asarray(log_std, dtype=np.float64), self.mean.shape)
        self.std = np.exp(self.log_std)

    @property
    def action_dim(self):
        return self.mean.shape[1]

    def __len__(self):
        return self.mean.shape[0]

    def _check_actions(self, actions):
        actions = np.asarray(actions, dtype=np.float64)
        if actions.ndim == 0:
            actions = np.full(self.mean.shape, float(actions))
        elif actions.ndim == 1:
            actions = actions.reshape(len(self), -1) if len(self) > 1 else actions[None, :]
        if actions.shape != self.mean.shape:
            raise ContractError("action shape does not match the Gaussian dimension")
        return check_finite(actions, "action")

    def log_prob(self, actions):
        actions = self._check_actions(actions)
        z = (actions - self.mean) / self.std
        return (-0.5 * z**2 - self.log_std - self._HALF_LOG_2PI).sum(axis=1)

    def log_prob_grad(self, actions):
        actions = self._check_actions(actions)
        z = (actions - self.mean) / self.std
        return (z / self.std, z**2 - 1.0)

    def entropy(self):
        return (self.log_std + 0.5 + self._HALF_LOG_2PI).sum(axis=1)

    def entropy_grad(self):
        return (np.zeros_like(self.mean), np.ones_like(self.mean))

    def cross_entropy(self, target):
        var = self.std**2
        num = target.std**2 + (target.mean - self.mean) ** 2
        return (self.log_std + self._HALF_LOG_2PI + num / (2.0 * var)).sum(axis=1)

    def cross_entropy_grad(self, target):
        var = self.std**2
        diff = target.mean - self.mean
        num = target.std**2 + diff**2
        return (-diff / var, 1.0 - num / var)

    def kl_from(self, other):
        return self.cross_entropy(other) - other.entropy()

    def sample(self, rng):
        return self.mean + self.std * rng.standard_normal(self.mean.shape)

    def mode(self):
        return self.mean.copy()

    def take(self, idx):
        return DiagGaussian(self.mean[idx], self.log_std[idx])


class PolicyNetwork:
    """Stochastic policy: tanh MLP trunk with a Categorical or DiagonalGaussian head.

    The Gaussian log-std is a state-independent parameter clamped to
    [LOG_STD_MIN, LOG_STD_MAX]; outside that interval its gradient is zero.
    """

    def __init__(
        self,
        obs_dim,
        n_actions=None,
        *,
        action_dim=None,
        hidden_sizes=(32, 32),
        log_std_init=0.0,
        seed=0,
        output_gain=0.01,
    ):
        if (n_actions is None) == (action_dim is None):
            raise ContractError("give exactly one of n_actions (categorical) or action_dim (gaussian)")
        self.obs_dim = int(obs_dim)
        self.head = "categorical" if n_actions is not None else "gaussian"
        self.n_out = int(n_actions if n_actions is not None else action_dim)
        self.hidden_sizes = tuple(int(h) for h in hidden_sizes)
        self.mlp = MLP((self.obs_dim, *self.hidden_sizes, self.n_out))
        layout = self.mlp.layout()
        if self.head == "gaussian":
            layout.append(("log_std", (self.n_out,)))
        self.params = ParamVector(layout)
        rng = np.random.default_rng(seed)
        self.mlp.init(self.params, rng, output_gain=output_gain)
        if self.head == "gaussian":
            self.params.view("log_std")[:] = log_std_init

    @property
    def architecture(self):
        return {
            "kind": "policy",
            "obs_dim": self.obs_dim,
            "head": self.head,
            "n_out": self.n_out,
            "hidden_sizes": list(self.hidden_sizes),
        }

    @classmethod
    def from_architecture(cls, arch, values):
        if arch.get("kind") != "policy":
            raise ContractError("checkpoint does not hold a policy network")
        kw = {"n_actions": arch["n_out"]} if arch["head"] == "categorical" else {"action_dim": arch["n_out"]}
        net = cls(arch["obs_dim"], hidden_sizes=arch["hidden_sizes"], **kw)
        net.params.assign(np.asarray(values, dtype=np.float64))
        return net

    def clone(self):
        return PolicyNetwork.from_architecture(self.architecture, self.params.values)

    def _log_std(self):
        raw = self.params.view("log_std")
        return np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)

    def forward(self, states):
        x = check_states(states, self.obs_dim)
        out, acts = self.mlp.forward(self.params, x)
        if self.head == "categorical":
            return Categorical(out), acts
        return DiagGaussian(out, self._log_std()), acts

    def distribution(self, states):
        return self.forward(states)[0]

    def backward(self, acts, head_grad):
        """Flat gradient from d(loss)/d(head outputs), as returned by the distributions."""
        grad = np.zeros(len(self.params))
        self.mlp.backward(self.params, acts, head_grad[0], grad)
        if self.head == "gaussian":
            raw = self.params.view("log_std")
            inside = (raw > LOG_STD_MIN) & (raw < LOG_STD_MAX)
            self.params.view("log_std", grad)[:] += head_grad[1].sum(axis=0) * inside
        return grad

    def log_prob(self, states, actions):
        return self.distribution(states).log_prob(actions)

    def act(self, state, rng, deterministic=False):
        dist = self.distribution(state)
        action = dist.mode() if deterministic else dist.sample(rng)
        logp = dist.log_prob(action)
        if self.head == "categorical":
            return int(action[0]), float(logp[0])
        return action[0], float(logp[0])


class ValueNetwork:
    """State-value MLP with a single linear output."""

    def __init__(self, obs_dim, *, hidden_sizes=(32, 32), seed=0):
        self.obs_dim = int(obs_dim)
        self.hidden_sizes = tuple(int(h) for h in hidden_sizes)
        self.mlp = MLP((self.obs_dim, *self.hidden_sizes, 1))
        self.params = ParamVector(self.mlp.layout())
        self.mlp.init(self.params, np.random.default_rng(seed), output_gain=1.0)

    @property
    def architecture(self):
        return {"kind": "value", "obs_dim": self.obs_dim, "hidden_sizes": list(self.hidden_sizes)}

    @classmethod
    def from_architecture(cls, arch, values):
        if arch.get("kind") != "value":
            raise ContractError("checkpoint does not hold a value network")
        net = cls(arch["obs_dim"], hidden_sizes=arch["hidden_sizes"])
        net.params.assign(np.asarray(values, dtype=np.float64))
        return net

    def forward(self, states):
        x = check_states(states, self.obs_dim)
        out, acts = self.mlp.forward(self.params, x)
        return out[:, 0], acts

    def predict(self, states):
        return self.forward(states)[0]

    def backward(self, acts, dvalues):
        grad = np.zeros(len(self.params))
        self.mlp.backward(self.params, acts, np.asarray(dvalues, dtype=np.float64)[:, None], grad)
        return grad

    def mse(self, states, targets):
        """Mean squared error to ``targets`` and its parameter gradient."""
        values, acts = self.forward(states)
        resid = values - np.asarray(targets, dtype=np.float64)
        loss = float(np.mean(resid**2))
        if not math.isfinite(loss):
            raise ContractError("non-finite critic loss")
        return loss, self.backward(acts, 2.0 * resid / resid.shape[0])


class QNetwork:
    """Action-value MLP, one output per discrete action.

    With ``hidden_sizes=()``, ``output_bias=False`` and one-hot states this is
    exactly a Q-table (a shared bias would couple the entries).
    """

    def __init__(self, obs_dim, n_actions, *, hidden_sizes=(32, 32), seed=0, zero_init=False, output_bias=True):
        self.obs_dim = int(obs_dim)
        self.n_actions = int(n_actions)
        self.hidden_sizes = tuple(int(h) for h in hidden_sizes)
        self.output_bias = bool(output_bias)
        self.mlp = MLP((self.obs_dim, *self.hidden_sizes, self.n_actions), output_bias=self.output_bias)
        self.params = ParamVector(self.mlp.layout())
        if not zero_init:
            self.mlp.init(self.params, np.random.default_rng(seed), output_gain=1.0)

    @property
    def architecture(self):
        return {
            "kind": "q",
            "obs_dim": self.obs_dim,
            "n_actions": self.n_actions,
            "hidden_sizes": list(self.hidden_sizes),
            "output_bias": self.output_bias,
        }

    @classmethod
    def from_architecture(cls, arch, values):
        net = cls(
            arch["obs_dim"],
            arch["n_actions"],
            hidden_sizes=arch["hidden_sizes"],
            zero_init=True,
            output_bias=arch.get("output_bias", True),
        )
        net.params.assign(np.asarray(values, dtype=np.float64))
        return net

    def forward(self, states):
        x = check_states(states, self.obs_dim)
        return self.mlp.forward(self.params, x)

    def predict(self, states):
        return self.forward(states)[0]

    def backward(self, acts, dq):
        grad = np.zeros(len(self.params))
        self.mlp.backward(self.params, acts, dq, grad)
        return grad


class Optimizer:
    """Adam (default) or plain SGD over a flat parameter vector."""

    def __init__(self, n_params, lr=3e-4, *, method="adam", beta1=0.9, beta2=0.999, eps=1e-8):
        if method not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer method {method!r}")
        self.method = method
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0

    def step(self, params: ParamVector, grad, direction="descend"):
        """Apply one update in place; ``direction='ascend'`` maximises the objective."""
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != params.values.shape or self.m.shape != grad.shape:
            raise ContractError("gradient length does not match parameters")
        if not np.all(np.isfinite(grad)):
            raise ContractError("non-finite gradient")
        if direction not in ("ascend", "descend"):
            raise ContractError(f"unknown direction {direction!r}")
        sign = 1.0 if direction == "ascend" else -1.0
        self.t += 1
        if self.method == "sgd":
            update = self.lr * grad
        else:
            self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
            self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad**2
            m_hat = self.m / (1.0 - self.beta1**self.t)
            v_hat = self.v / (1.0 - self.beta2**self.t)
            update = self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        new = params.values + sign * update
        if not np.all(np.isfinite(new)):
            raise ContractError("update produced non-finite parameters")
        params.values[:] = new
        return params


def save_checkpoint(net, path, metadata=None):
    """Write the architecture and flat values as JSON; floats round-trip exactly."""
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "architecture": net.architecture,
        "values": [float(v) for v in net.params.values],
        "metadata": metadata or {},
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload))
    return path


def load_checkpoint(path):
    """Return ``(network, metadata)`` from a file written by :func:`save_checkpoint`."""
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ContractError(f"cannot load checkpoint {path}: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT or payload.get("version") != CHECKPOINT_VERSION:
        raise ContractError(f"{path} is not a version-{CHECKPOINT_VERSION} parameter checkpoint")
    arch = payload["architecture"]
    kinds = {"policy": PolicyNetwork, "value": ValueNetwork, "q": QNetwork}
    if arch.get("kind") not in kinds:
        raise ContractError(f"unknown network kind {arch.get('kind')!r} in {path}")
    return kinds[arch["kind"]].from_architecture(arch, payload["values"]), payload.get("metadata", {})
