"""GAE, Gaussian policy math, analytic gradients, and update loops.

The finite-difference harness here is the ground truth for every hand-written
backward pass: central differences over the full flattened parameter vector,
compared to the analytic gradient by vector-norm relative error.
"""

import numpy as np
import pytest
import scipy.stats

from kellylab.nets import Adam, ContextPolicyNet, PolicyNet
from kellylab.rl import (
    MiniBatch,
    RolloutBuffer,
    TrainConfig,
    _normalized,
    a2c_update,
    act_and_value,
    gae_advantages,
    gaussian_entropy,
    gaussian_log_prob,
    loss_and_grads,
    loss_terms,
    ppo_update,
    sample_action,
)


# -- GAE -----------------------------------------------------------------------


def test_gae_lambda_zero_is_one_step_td():
    rng = np.random.default_rng(0)
    rewards = rng.normal(size=6)
    values = rng.normal(size=6)
    dones = np.array([0.0, 0.0, 1.0, 0.0, 0.0, 0.0])
    bootstrap = 0.7
    gamma = 0.95
    adv, returns = gae_advantages(rewards, values, dones, bootstrap, gamma, 0.0)
    v_next = np.append(values[1:], bootstrap)
    delta = rewards + gamma * v_next * (1.0 - dones) - values
    assert np.allclose(adv, delta, atol=1e-15)
    assert np.allclose(returns, adv + values, atol=1e-15)


def test_gae_lambda_one_gamma_one_is_monte_carlo():
    rng = np.random.default_rng(1)
    rewards = rng.normal(size=5)
    values = rng.normal(size=5)
    dones = np.zeros(5)
    bootstrap = -0.3
    adv, _ = gae_advantages(rewards, values, dones, bootstrap, 1.0, 1.0)
    reward_to_go = np.cumsum(rewards[::-1])[::-1]
    assert np.allclose(adv, reward_to_go + bootstrap - values, atol=1e-12)


def test_gae_worked_example():
    adv, returns = gae_advantages(
        rewards=[1.0, 1.0], values=[0.5, 0.5], dones=[0.0, 1.0],
        bootstrap_value=0.0, gamma=1.0, lam=0.5,
    )
    assert adv == pytest.approx([1.25, 0.5], abs=1e-15)
    assert returns == pytest.approx([1.75, 1.0], abs=1e-15)


def test_gae_done_cuts_the_recursion():
    adv, _ = gae_advantages(
        rewards=[1.0, 2.0, 3.0], values=[0.0, 0.0, 0.0], dones=[0.0, 1.0, 0.0],
        bootstrap_value=10.0, gamma=0.9, lam=0.8,
    )
    assert adv[2] == pytest.approx(3.0 + 0.9 * 10.0, abs=1e-15)
    assert adv[1] == pytest.approx(2.0, abs=1e-15)
    assert adv[0] == pytest.approx(1.0 + 0.9 * 0.8 * 2.0, abs=1e-15)


def test_gae_shape_mismatch():
    with pytest.raises(ValueError, match="share one shape"):
        gae_advantages([1.0], [1.0, 2.0], [0.0], 0.0, 0.99, 0.9)


# -- Gaussian policy math --------------------------------------------------------


def test_gaussian_log_prob_matches_scipy():
    rng = np.random.default_rng(2)
    mean = rng.normal(size=(4, 3))
    log_std = np.array([-0.5, 0.1, 0.3])
    actions = rng.normal(size=(4, 3))
    got = gaussian_log_prob(mean, log_std, actions)
    cov = np.diag(np.exp(2.0 * log_std))
    want = [
        scipy.stats.multivariate_normal.logpdf(actions[i], mean[i], cov)
        for i in range(4)
    ]
    assert np.allclose(got, want, atol=1e-12)


def test_gaussian_entropy_closed_form():
    log_std = np.array([-0.5, 0.2])
    want = float(np.sum(log_std) + 0.5 * 2 * (np.log(2.0 * np.pi) + 1.0))
    assert gaussian_entropy(log_std) == pytest.approx(want, rel=1e-15)


def test_act_and_value_deterministic_returns_the_mean():
    net = PolicyNet(4, 2, np.random.default_rng(0), hidden=(8,))
    obs = np.random.default_rng(1).normal(size=4)
    action, log_prob, value = act_and_value(net, obs, deterministic=True)
    mean, val = net.forward(obs[None, :])
    assert np.array_equal(action, mean[0])
    assert value == float(val[0])
    want_lp = float(gaussian_log_prob(mean, net.log_std.value, action[None, :])[0])
    assert log_prob == want_lp


def test_sample_action_requires_rng_when_stochastic():
    net = PolicyNet(3, 1, np.random.default_rng(0), hidden=(4,))
    with pytest.raises(ValueError, match="needs an rng"):
        sample_action(net, np.zeros(3))


def test_sample_action_moments():
    net = PolicyNet(3, 1, np.random.default_rng(4), hidden=(4,))
    net.log_std.value[:] = np.log(0.5)
    obs = np.array([0.3, -0.2, 0.1])
    mean = net.forward(obs[None, :])[0][0, 0]
    rng = np.random.default_rng(1)
    draws = np.array([sample_action(net, obs, rng)[0][0] for _ in range(20000)])
    assert abs(draws.mean() - mean) < 3.0 * 0.5 / np.sqrt(20000)
    assert abs(draws.std(ddof=1) - 0.5) < 3.0 * 0.5 / np.sqrt(2 * 20000)
    # reported log-probability is the density at the sampled action
    action, log_prob = sample_action(net, obs, np.random.default_rng(2))
    want = float(gaussian_log_prob(
        np.array([[mean]]), net.log_std.value, action[None, :])[0])
    assert log_prob == pytest.approx(want, rel=1e-12)


# -- finite-difference gradient verification -------------------------------------


def fd_gradient(net, batch, config, h=1e-5):
    """Central-difference gradient of the total loss over the flat params."""
    flat0 = net.get_flat().copy()
    grad = np.empty_like(flat0)
    for i in range(flat0.size):
        bump = flat0.copy()
        bump[i] += h
        net.set_flat(bump)
        up = loss_terms(net, batch, config)["loss"]
        bump[i] -= 2.0 * h
        net.set_flat(bump)
        down = loss_terms(net, batch, config)["loss"]
        grad[i] = (up - down) / (2.0 * h)
    net.set_flat(flat0)
    return grad


def gradient_rel_error(net, batch, config):
    loss_and_grads(net, batch, config)
    analytic = net.get_flat_grad().copy()
    numeric = fd_gradient(net, batch, config)
    denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def contexts_clear_of_relu_kinks(net, rng, batch_size):
    """Context rows whose relu pre-activations all sit away from zero.

    A pre-activation at exactly zero is a kink where the analytic mask and a
    central difference legitimately disagree, so the harness samples around
    those points rather than asserting anything about them.
    """
    for _ in range(200):
        contexts = rng.dirichlet(np.ones(2), size=batch_size)
        net.regime.forward(contexts)
        margin = min(np.abs(layer._z).min() for layer in net.regime.layers)
        if margin > 1e-3:
            return contexts
    raise AssertionError("no context draw cleared the relu kinks")


def random_case(index):
    """One randomized (net, batch, config) triple for the FD harness."""
    rng = np.random.default_rng(3000 + index)
    batch_size = 8
    obs_dim = 5
    action_dim = 1 + index % 2
    use_context = index % 2 == 1
    algo = ("ppo", "ppo", "a2c")[index % 3]
    clipping = index % 6 < 3
    config = TrainConfig(
        algo=algo,
        total_steps=1,
        learning_rate=1e-3,
        rollout_steps=batch_size,
        batch_size=batch_size,
        n_epochs=1,
        clip_range=0.2,
        value_coef=(0.5, 1.0)[index % 2],
        entropy_coef=(0.0, 0.01)[(index // 2) % 2],
        clipping_enabled=clipping,
    )
    if use_context:
        net = ContextPolicyNet(
            obs_dim, 2, action_dim, rng,
            init_log_std=float(rng.uniform(-1.0, 0.5)),
            feature_sizes=(8, 4), regime_sizes=(6, 4), shared_sizes=(4,),
        )
        contexts = contexts_clear_of_relu_kinks(net, rng, batch_size)
    else:
        net = PolicyNet(obs_dim, action_dim, rng,
                        init_log_std=float(rng.uniform(-1.0, 0.5)),
                        hidden=(8, 8))
        contexts = None
    observations = rng.normal(size=(batch_size, obs_dim))
    if use_context:
        mean, _ = net.forward(observations, contexts)
    else:
        mean, _ = net.forward(observations)
    actions = mean + np.exp(net.log_std.value) * rng.normal(
        size=(batch_size, action_dim)
    )
    log_probs = gaussian_log_prob(mean, net.log_std.value, actions)
    offsets = rng.normal(0.0, 0.2, size=batch_size)
    # keep every ratio a safe distance from the clip boundaries so the
    # clipped surrogate is smooth at the finite-difference step size
    for _ in range(50):
        ratio = np.exp(-offsets)
        near = (np.abs(ratio - 1.2) < 2e-3) | (np.abs(ratio - 0.8) < 2e-3)
        if not near.any():
            break
        offsets[near] += 0.01
    batch = MiniBatch(
        observations=observations,
        actions=actions,
        old_log_probs=log_probs + offsets,
        advantages=rng.normal(size=batch_size),
        returns=rng.normal(size=batch_size),
        contexts=contexts,
    )
    return net, batch, config


def test_analytic_gradients_match_finite_differences():
    worst = 0.0
    for index in range(100):
        net, batch, config = random_case(index)
        err = gradient_rel_error(net, batch, config)
        worst = max(worst, err)
        assert err <= 1e-4, f"case {index}: relative error {err:.3e}"
    assert worst > 0.0


def test_zero_advantages_and_matched_returns_give_zero_gradients():
    net, batch, config = random_case(0)
    _, value = net.forward(batch.observations)
    batch = batch._replace(advantages=np.zeros(len(batch.advantages)),
                           returns=value.copy())
    loss_and_grads(net, batch, config)
    assert np.all(net.get_flat_grad() == 0.0)


def test_clipped_out_samples_contribute_no_policy_gradient():
    net = PolicyNet(4, 1, np.random.default_rng(7), hidden=(6,))
    config = TrainConfig(algo="ppo", total_steps=1, learning_rate=1e-3,
                         rollout_steps=1, batch_size=1, n_epochs=1,
                         clip_range=0.2)
    obs = np.random.default_rng(8).normal(size=(1, 4))
    mean, value = net.forward(obs)
    action = mean + 0.1
    log_prob = gaussian_log_prob(mean, net.log_std.value, action)

    # positive advantage with ratio e^0.5 > 1.2: the clipped branch is active
    batch = MiniBatch(obs, action, log_prob - 0.5, np.array([1.0]),
                      value.copy())
    terms = loss_and_grads(net, batch, config)
    assert terms["clip_fraction"] == 1.0
    assert np.all(net.get_flat_grad() == 0.0)

    # negative advantage with ratio e^-0.5 < 0.8: same story
    batch = MiniBatch(obs, action, log_prob + 0.5, np.array([-1.0]),
                      value.copy())
    loss_and_grads(net, batch, config)
    assert np.all(net.get_flat_grad() == 0.0)

    # same ratios with the advantage signs flipped flow gradients again
    batch = MiniBatch(obs, action, log_prob - 0.5, np.array([-1.0]),
                      value.copy())
    loss_and_grads(net, batch, config)
    assert np.any(net.get_flat_grad() != 0.0)


def test_a2c_gradient_equals_unclipped_ppo_at_ratio_one():
    rng = np.random.default_rng(9)
    net = PolicyNet(4, 2, rng, hidden=(8,))
    obs = rng.normal(size=(6, 4))
    mean, value = net.forward(obs)
    actions = mean + 0.3 * rng.normal(size=mean.shape)
    log_probs = gaussian_log_prob(mean, net.log_std.value, actions)
    batch = MiniBatch(obs, actions, log_probs, rng.normal(size=6),
                      rng.normal(size=6))
    base = dict(total_steps=1, learning_rate=1e-3, rollout_steps=6,
                batch_size=6, n_epochs=1)
    loss_and_grads(net, batch, TrainConfig(algo="a2c", **base))
    a2c_grad = net.get_flat_grad().copy()
    loss_and_grads(net, batch,
                   TrainConfig(algo="ppo", clipping_enabled=False, **base))
    ppo_grad = net.get_flat_grad().copy()
    assert np.array_equal(a2c_grad, ppo_grad)


# -- advantage normalization ------------------------------------------------------


def test_normalization_post_conditions():
    rng = np.random.default_rng(10)
    adv = rng.normal(3.0, 2.0, size=64)
    out = _normalized(adv, True)
    assert out.mean() == pytest.approx(0.0, abs=1e-12)
    assert out.std(ddof=1) == pytest.approx(1.0, rel=1e-12)
    assert _normalized(adv, False) is adv
    single = np.array([5.0])
    assert _normalized(single, True) is single
    flat = np.full(8, 2.5)
    assert _normalized(flat, True) is flat


# -- buffer and update loops ------------------------------------------------------


def filled_buffer(rng, size=8, obs_dim=4, action_dim=1):
    buffer = RolloutBuffer(size, obs_dim, action_dim)
    for i in range(size):
        buffer.add(
            obs=rng.normal(size=obs_dim),
            action=rng.normal(size=action_dim),
            log_prob=float(rng.normal()),
            reward=float(rng.normal()),
            value=float(rng.normal()),
            done=i == size - 1,
        )
    return buffer


def test_buffer_lifecycle_errors():
    rng = np.random.default_rng(11)
    buffer = RolloutBuffer(2, 3, 1)
    buffer.add(np.zeros(3), np.zeros(1), 0.0, 0.0, 0.0, False)
    with pytest.raises(ValueError, match="holds 1/2"):
        buffer.compute_advantages(0.0, 0.99, 0.9)
    buffer.add(np.zeros(3), np.zeros(1), 0.0, 0.0, 0.0, True)
    with pytest.raises(ValueError, match="full"):
        buffer.add(np.zeros(3), np.zeros(1), 0.0, 0.0, 0.0, False)
    buffer.compute_advantages(0.0, 0.99, 0.9)
    assert buffer.advantages is not None
    buffer.reset()
    assert buffer.pos == 0
    assert buffer.advantages is None

    ctx_buffer = RolloutBuffer(2, 3, 1, context_dim=2)
    with pytest.raises(ValueError, match="expects a context"):
        ctx_buffer.add(np.zeros(3), np.zeros(1), 0.0, 0.0, 0.0, False)

    net = PolicyNet(3, 1, rng, hidden=(4,))
    config = TrainConfig.ppo(total_steps=2, rollout_steps=2, batch_size=2,
                             n_epochs=1)
    fresh = RolloutBuffer(2, 3, 1)
    with pytest.raises(ValueError, match="compute_advantages"):
        ppo_update(net, fresh, config, Adam(net.params(), 1e-3),
                   np.random.default_rng(0))
    with pytest.raises(ValueError, match="compute_advantages"):
        a2c_update(net, fresh, config, Adam(net.params(), 1e-3))


def test_ppo_update_runs_and_moves_parameters():
    rng = np.random.default_rng(12)
    net = PolicyNet(4, 1, rng, hidden=(8,))
    buffer = filled_buffer(rng)
    buffer.compute_advantages(0.0, 0.99, 0.9)
    config = TrainConfig.ppo(total_steps=8, rollout_steps=8, batch_size=4,
                             n_epochs=2)
    before = net.get_flat().copy()
    diag = ppo_update(net, buffer, config, Adam(net.params(), 3e-4),
                      np.random.default_rng(0))
    assert not diag["aborted"]
    assert diag["n_minibatches"] == 4
    assert np.isfinite(diag["loss"])
    assert np.isfinite(diag["approx_kl"])
    assert 0.0 <= diag["clip_fraction"] <= 1.0
    assert not np.array_equal(before, net.get_flat())


def test_a2c_update_takes_one_step():
    rng = np.random.default_rng(13)
    net = PolicyNet(4, 1, rng, hidden=(8,))
    buffer = filled_buffer(rng)
    buffer.compute_advantages(0.0, 0.99, 0.9)
    config = TrainConfig.a2c(total_steps=8, rollout_steps=8, batch_size=8)
    before = net.get_flat().copy()
    diag = a2c_update(net, buffer, config, Adam(net.params(), 1e-4))
    assert not diag["aborted"]
    assert diag["n_minibatches"] == 1
    assert not np.array_equal(before, net.get_flat())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_ppo_update_aborts_on_nonfinite_loss():
    rng = np.random.default_rng(14)
    net = PolicyNet(4, 1, rng, hidden=(8,))
    buffer = filled_buffer(rng)
    buffer.compute_advantages(0.0, 0.99, 0.9)
    buffer.advantages[3] = np.inf
    config = TrainConfig.ppo(total_steps=8, rollout_steps=8, batch_size=8,
                             n_epochs=3, advantage_normalization=False)
    before = net.get_flat().copy()
    diag = ppo_update(net, buffer, config, Adam(net.params(), 3e-4),
                      np.random.default_rng(0))
    assert diag["aborted"]
    assert diag["n_minibatches"] == 0
    assert np.array_equal(before, net.get_flat())


# -- TrainConfig -----------------------------------------------------------------


def test_train_config_validation():
    with pytest.raises(ValueError, match="algo must be"):
        TrainConfig(algo="ddpg", total_steps=1, learning_rate=1e-3,
                    rollout_steps=1, batch_size=1, n_epochs=1)
    with pytest.raises(ValueError, match="total_steps must be positive"):
        TrainConfig.ppo(total_steps=0)
    with pytest.raises(ValueError, match="discount must be in"):
        TrainConfig.ppo(total_steps=1, discount=0.0)
    with pytest.raises(ValueError, match="gae_lambda must be in"):
        TrainConfig.ppo(total_steps=1, gae_lambda=1.5)
    with pytest.raises(ValueError, match="clip_range must be positive"):
        TrainConfig.ppo(total_steps=1, clip_range=0.0)
    with pytest.raises(ValueError, match="max_grad_norm"):
        TrainConfig.ppo(total_steps=1, max_grad_norm=-1.0)
    # a zero clip range is fine once clipping is off
    TrainConfig.ppo(total_steps=1, clip_range=0.0, clipping_enabled=False)


def test_effective_epochs():
    assert TrainConfig.ppo(total_steps=1).effective_epochs == 10
    unclipped = TrainConfig.ppo(total_steps=1, clipping_enabled=False)
    assert unclipped.effective_epochs == 1
    assert TrainConfig.a2c(total_steps=1).effective_epochs == 1


def test_presets_match_documented_defaults():
    ppo = TrainConfig.ppo(total_steps=100)
    assert (ppo.learning_rate, ppo.rollout_steps, ppo.batch_size,
            ppo.n_epochs) == (3e-4, 1280, 64, 10)
    assert (ppo.clip_range, ppo.gae_lambda, ppo.discount) == (0.2, 0.9, 0.99)
    assert (ppo.value_coef, ppo.entropy_coef, ppo.max_grad_norm) == (1.0, 0.0, 0.5)
    assert ppo.init_log_std == 0.0
    a2c = TrainConfig.a2c(total_steps=100)
    assert (a2c.learning_rate, a2c.rollout_steps, a2c.batch_size,
            a2c.n_epochs) == (1e-4, 256, 256, 1)
    assert a2c.init_log_std == -2.0
    assert not a2c.advantage_normalization
