import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import central_difference, max_relative_error
from repaint._validation import ContractError
from repaint.approximator import (
    Categorical,
    DiagGaussian,
    Optimizer,
    ParamVector,
    PolicyNetwork,
    QNetwork,
    ValueNetwork,
    load_checkpoint,
    save_checkpoint,
)


def zero_policy(obs_dim=3, **kw):
    net = PolicyNetwork(obs_dim, hidden_sizes=(4,), **kw)
    net.params.values[:] = 0.0
    return net


def test_zero_weight_categorical_is_uniform():
    net = zero_policy(n_actions=5)
    probs = net.distribution(np.array([0.3, -2.0, 7.0])).probs
    np.testing.assert_allclose(probs, np.full((1, 5), 0.2), rtol=0, atol=1e-15)


def test_softmax_arithmetic():
    dist = Categorical([[math.log(2.0), 0.0]])
    np.testing.assert_allclose(dist.probs[0], [2 / 3, 1 / 3], rtol=1e-15)


def test_zero_weight_gaussian_head():
    net = zero_policy(action_dim=2)
    net.params.view("log_std")[:] = -1.0
    dist = net.distribution(np.ones(3))
    np.testing.assert_array_equal(dist.mean, np.zeros((1, 2)))
    np.testing.assert_allclose(dist.std, np.full((1, 2), math.exp(-1.0)))


def test_log_std_is_clamped():
    net = zero_policy(action_dim=1)
    net.params.view("log_std")[:] = 10.0
    assert net.distribution(np.ones(3)).log_std[0, 0] == 2.0
    net.params.view("log_std")[:] = -10.0
    assert net.distribution(np.ones(3)).log_std[0, 0] == -5.0


def test_log_prob_examples():
    assert Categorical.from_probs([[0.5, 0.5]]).log_prob([0])[0] == pytest.approx(math.log(0.5), rel=1e-15)
    g = DiagGaussian([[0.0]], [[0.0]])
    assert g.log_prob([[0.0]])[0] == pytest.approx(-0.5 * math.log(2 * math.pi), rel=1e-15)
    delta = 1e-8
    lp = Categorical.from_probs([[1.0 - delta, delta]]).log_prob([1])[0]
    assert abs(lp - math.log(delta)) <= 1e-6 * abs(math.log(delta))


def test_log_prob_out_of_support():
    dist = Categorical.from_probs([[0.5, 0.5]])
    with pytest.raises(ContractError):
        dist.log_prob([2])
    with pytest.raises(ContractError):
        dist.log_prob([-1])


def test_entropy_examples():
    assert Categorical(np.zeros((1, 4))).entropy()[0] == pytest.approx(math.log(4), rel=1e-15)
    assert Categorical.from_probs([[1 - 1e-12, 1e-12]]).entropy()[0] < 1e-10
    assert DiagGaussian([[0.0]], [[0.0]]).entropy()[0] == pytest.approx(0.5 * math.log(2 * math.pi * math.e))


def test_dimension_mismatch():
    net = PolicyNetwork(3, n_actions=2, hidden_sizes=(4,))
    with pytest.raises(ContractError):
        net.distribution(np.ones(4))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 6), elements=st.floats(-50, 50)))
def test_softmax_normalization(logits):
    dist = Categorical(logits)
    np.testing.assert_allclose(dist.probs.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(dist.probs > 0)


def test_forward_determinism():
    net = PolicyNetwork(4, n_actions=3, hidden_sizes=(8, 8), seed=3)
    x = np.random.default_rng(0).normal(size=(5, 4))
    a = net.distribution(x).probs
    b = net.distribution(x).probs
    assert a.tobytes() == b.tobytes()


def test_linear_value_gradient_by_hand():
    v = ValueNetwork(3, hidden_sizes=())
    v.params.values[:] = [0.5, -1.0, 2.0, 0.25]
    x = np.array([1.0, 2.0, 3.0])
    target = 1.0
    loss, grad = v.mse(x, [target])
    resid = 0.5 - 2.0 + 6.0 + 0.25 - target
    assert loss == pytest.approx(resid**2)
    np.testing.assert_allclose(grad, 2 * resid * np.append(x, 1.0))


def test_log_prob_gradient_through_final_layer():
    net = PolicyNetwork(2, n_actions=3, hidden_sizes=(), seed=1)
    x = np.array([[0.4, -0.7]])
    dist, acts = net.forward(x)
    grad = net.backward(acts, dist.log_prob_grad([2]))
    onehot = np.array([0.0, 0.0, 1.0])
    dlogits = onehot - dist.probs[0]
    np.testing.assert_allclose(net.params.view("W0", grad), np.outer(x[0], dlogits), atol=1e-15)
    np.testing.assert_allclose(net.params.view("b0", grad), dlogits, atol=1e-15)


def _loss_fn(net, build):
    def f(theta):
        saved = net.params.values.copy()
        net.params.values[:] = theta
        try:
            return build()[0]
        finally:
            net.params.values[:] = saved

    return f


@pytest.mark.parametrize("head", ["categorical", "gaussian"])
@pytest.mark.parametrize("which", ["log_prob", "entropy", "cross_entropy"])
def test_head_gradients_match_finite_differences(head, which):
    rng = np.random.default_rng(11)
    kw = {"n_actions": 4} if head == "categorical" else {"action_dim": 2}
    net = PolicyNetwork(3, hidden_sizes=(6, 5), seed=2, output_gain=1.0, **kw)
    if head == "gaussian":
        net.params.view("log_std")[:] = [-0.3, 0.4]
    teacher = PolicyNetwork(3, hidden_sizes=(5,), seed=9, output_gain=1.0, **kw)
    x = rng.normal(size=(7, 3))
    actions = rng.integers(0, 4, size=7) if head == "categorical" else rng.normal(size=(7, 2))

    def build():
        dist, acts = net.forward(x)
        if which == "log_prob":
            val, hg = dist.log_prob(actions), dist.log_prob_grad(actions)
        elif which == "entropy":
            val, hg = dist.entropy(), dist.entropy_grad()
        else:
            t = teacher.distribution(x)
            val, hg = dist.cross_entropy(t), dist.cross_entropy_grad(t)
        return float(val.mean()), net.backward(acts, tuple(g / len(x) for g in hg))

    analytic = build()[1]
    numeric = central_difference(_loss_fn(net, build), net.params.values)
    assert max_relative_error(analytic, numeric) < 1e-4


def test_critic_mse_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    v = ValueNetwork(4, hidden_sizes=(8, 8), seed=4)
    x, y = rng.normal(size=(9, 4)), rng.normal(size=9)
    analytic = v.mse(x, y)[1]
    numeric = central_difference(_loss_fn(v, lambda: v.mse(x, y)), v.params.values)
    assert max_relative_error(analytic, numeric) < 1e-4


def test_q_network_gradient():
    rng = np.random.default_rng(6)
    q = QNetwork(3, 2, hidden_sizes=(5,), seed=1)
    x = rng.normal(size=(4, 3))
    w = rng.normal(size=(4, 2))

    def build():
        out, acts = q.forward(x)
        return float((w * out).sum()), q.backward(acts, w)

    numeric = central_difference(_loss_fn(q, build), q.params.values)
    assert max_relative_error(build()[1], numeric) < 1e-4


def test_optimizer_zero_gradient_keeps_params():
    p = ParamVector([("w", (3,))], [1.0, 2.0, 3.0])
    opt = Optimizer(3, lr=0.1)
    opt.step(p, np.zeros(3))
    np.testing.assert_array_equal(p.values, [1.0, 2.0, 3.0])
    assert opt.t == 1


def test_sgd_descend():
    p = ParamVector([("w", (2,))], [1.0, -1.0])
    g = np.array([0.5, 2.0])
    Optimizer(2, lr=0.1, method="sgd").step(p, g, direction="descend")
    np.testing.assert_allclose(p.values, np.array([1.0, -1.0]) - 0.1 * g)


def test_adam_first_step_has_magnitude_lr():
    # m_hat = g, v_hat = g^2 after bias correction, so the step is lr * g / (|g| + eps)
    p = ParamVector([("w", (3,))], np.zeros(3))
    g = np.array([0.3, -4.0, 1e-3])
    Optimizer(3, lr=0.01).step(p, g, direction="ascend")
    expected = 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.values, expected, rtol=1e-12)


def test_optimizer_rejects_non_finite_gradient():
    p = ParamVector([("w", (2,))], np.zeros(2))
    with pytest.raises(ContractError):
        Optimizer(2).step(p, np.array([np.nan, 0.0]))


@pytest.mark.parametrize("kw", [{"n_actions": 3}, {"action_dim": 2}])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, kw):
    net = PolicyNetwork(4, hidden_sizes=(7,), seed=12, **kw)
    net.params.values[:] += np.random.default_rng(0).normal(size=len(net.params)) * 1e-3
    path = save_checkpoint(net, tmp_path / "p.json", metadata={"note": "x"})
    loaded, meta = load_checkpoint(path)
    assert loaded.params.values.tobytes() == net.params.values.tobytes()
    assert meta == {"note": "x"}
    x = np.random.default_rng(1).normal(size=(3, 4))
    a, b = net.distribution(x), loaded.distribution(x)
    if net.head == "categorical":
        assert a.probs.tobytes() == b.probs.tobytes()
    else:
        assert a.mean.tobytes() == b.mean.tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text('{"format": "other"}')
    with pytest.raises(ContractError):
        load_checkpoint(bad)
