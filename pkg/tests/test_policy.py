import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hlic import autodiff as ad
from hlic.codec import EvalStats
from hlic.policy import (PolicyError, PolicyNet, lambda_from_prime, log_prob_of, normal_log_prob,
                         observe, policy_forward, sample_action, value)

from conftest import numeric_grad, rel_err


def random_net(seed):
    """Net with every layer randomized, so outputs depend on the observation."""
    net = PolicyNet(seed=seed)
    rng = np.random.default_rng(seed + 100)
    for t in net.params().values():
        t.data = t.data + rng.normal(0, 0.3, t.shape)
    return net


def test_observe_examples():
    o = observe(EvalStats(32.0, 0.95, 0.4, 0.05, 0.01, 0.03))
    assert o == pytest.approx([0.95, 0.8, 0.4, 0.05, 0.1, 0.3], abs=1e-15)
    z = observe(EvalStats(0.0, 1.0, 0.0, 0.0, 0.0, 0.0))
    assert z[1:].tolist() == [0.0] * 5
    s = EvalStats(31.0, 0.9, 0.3, 0.0, 0.02, 0.04)
    assert np.array_equal(observe(s), observe(s))


def test_initial_distribution():
    net = PolicyNet(seed=3)
    for o in np.random.default_rng(0).normal(size=(5, 6)):
        mu, sd = policy_forward(net, o)
        assert mu == pytest.approx([math.log(0.01), 0.0], abs=1e-15)
        assert mu[0] == pytest.approx(-4.6052, abs=1e-4)
        assert sd.tolist() == pytest.approx([0.5, 0.5], abs=1e-15)
        assert value(net, o) == 0.0


def test_random_nets_finite():
    rng = np.random.default_rng(5)
    for seed in range(20):
        net = random_net(seed)
        obs = rng.normal(0, 10, size=(8, 6))
        mu, sd = policy_forward(net, obs)
        assert np.all(np.isfinite(mu)) and np.all(sd > 0)
        assert np.all(np.isfinite(value(net, obs)))


def test_log_std_clamp():
    net = PolicyNet()
    net.actor["log_std"].data = np.array([-50.0, 50.0])
    _, sd = policy_forward(net, np.zeros(6))
    assert sd == pytest.approx([1e-3, 2.0])


def test_sample_action():
    rng = np.random.default_rng(0)
    a, raw, _ = sample_action(np.array([1.0, 2.0]), np.array([1e-3, 1e-3]), rng)
    assert a == pytest.approx([1.0, 2.0], abs=1e-2)
    a1 = sample_action(np.zeros(2), np.ones(2), np.random.default_rng(42))
    a2 = sample_action(np.zeros(2), np.ones(2), np.random.default_rng(42))
    assert np.array_equal(a1[0], a2[0]) and a1[2] == a2[2]
    clamped, raw, lp = sample_action(np.array([25.0, -30.0]), np.array([0.1, 0.1]), rng)
    assert clamped.tolist() == [20.0, -20.0]
    assert lp == normal_log_prob(raw, [25.0, -30.0], [0.1, 0.1])
    with pytest.raises(PolicyError):
        sample_action(np.zeros(2), np.array([1.0, 0.0]), rng)


def test_log_prob_closed_form():
    assert normal_log_prob([0.3, -1.0], [0.3, -1.0], [1.0, 1.0]) == pytest.approx(-1.83788, abs=1e-5)
    assert normal_log_prob([0.3, -1.0], [0.3, -1.0], [1.0, 1.0]) == pytest.approx(-math.log(2 * math.pi), abs=1e-15)


def test_log_prob_of_matches_sample():
    net = random_net(1)
    rng = np.random.default_rng(3)
    for _ in range(10):
        o = rng.normal(size=6)
        _, raw, lp = sample_action(*policy_forward(net, o), rng)
        assert log_prob_of(net, o, raw) == pytest.approx(lp, abs=1e-12)
        assert net.log_prob_tensor(o, raw).data[0] == pytest.approx(lp, abs=1e-12)


def test_diagonal_sampling_independent():
    rng = np.random.default_rng(0)
    xs = np.array([sample_action(np.zeros(2), np.ones(2), rng)[1] for _ in range(4000)])
    assert abs(np.corrcoef(xs.T)[0, 1]) < 0.05


def test_lambda_from_prime():
    assert lambda_from_prime([0.0, 0.0]).tolist() == [1.0, 1.0]
    assert lambda_from_prime([math.log(0.0128), math.log(120)]) == pytest.approx([0.0128, 120.0], rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20))
def test_lambda_monotone(a, b):
    lo, hi = sorted((a, b))
    if hi - lo > 1e-12:
        assert lambda_from_prime([lo])[0] < lambda_from_prime([hi])[0]


def test_critic_gradient_matches_finite_differences():
    net = random_net(2)
    obs = np.random.default_rng(1).normal(size=(4, 6))
    with ad.recording():
        out = ad.reduce_sum(net.value_tensor(obs))
        ad.backward(out)
    for name, t in net.critic.items():
        base = t.data.copy()

        def f(arr, t=t, base=base):
            t.data = arr
            v = float(np.sum(value(net, obs)))
            t.data = base
            return v

        assert rel_err(t.grad, numeric_grad(f, base.copy(), h=1e-6)) < 1e-4, name


def test_actor_and_critic_share_nothing():
    net = random_net(4)
    obs = np.random.default_rng(2).normal(size=(3, 6))
    with ad.recording():
        out = ad.reduce_sum(net.value_tensor(obs))
        ad.backward(out)
    assert all(t.grad is None or not np.any(t.grad) for t in net.actor.values())
    for t in net.critic.values():
        t.grad = None
    with ad.recording():
        out = ad.reduce_sum(net.log_prob_tensor(obs, np.zeros((3, 2))))
        ad.backward(out)
    assert all(t.grad is None or not np.any(t.grad) for t in net.critic.values())
    assert not {id(t) for t in net.actor.values()} & {id(t) for t in net.critic.values()}


def test_save_load_round_trip(tmp_path):
    net = random_net(6)
    path = tmp_path / "p.npz"
    net.save(path)
    back = PolicyNet.load(path)
    a, b = net.state_arrays(), back.state_arrays()
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)
    o = np.arange(6.0)
    assert np.array_equal(policy_forward(net, o)[0], policy_forward(back, o)[0])
