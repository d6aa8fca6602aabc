"""On-policy actor-critic machinery: GAE, A2C, and clipped PPO.

The policy is a diagonal Gaussian over target weights: the net outputs the
mean, a free parameter vector holds log standard deviations. Updates maximize
the clipped surrogate min(rho * A, clip(rho, 1-eps, 1+eps) * A) (PPO) or the
score-function surrogate log pi * A (A2C) minus a squared-error value loss,
with gradients written out analytically (see tests for the finite-difference
verification of every path).

Sign conventions: losses are minimized; advantages enter PPO normalized per
minibatch (mean 0, std 1 with ddof=1, skipped when the spread is below 1e-8)
and raw for A2C.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .nets import Adam, clip_grad_norm

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class TrainConfig:
    """Hyperparameters for one training run. Use ppo()/a2c() for the defaults."""

    algo: str
    total_steps: int
    learning_rate: float
    rollout_steps: int
    batch_size: int
    n_epochs: int
    clip_range: float = 0.2
    discount: float = 0.99
    gae_lambda: float = 0.9
    value_coef: float = 1.0
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    clipping_enabled: bool = True
    init_log_std: float = 0.0
    advantage_normalization: bool = True

    def __post_init__(self):
        if self.algo not in ("ppo", "a2c"):
            raise ValueError(f"algo must be 'ppo' or 'a2c', got {self.algo!r}")
        for name in (
            "total_steps",
            "learning_rate",
            "rollout_steps",
            "batch_size",
            "n_epochs",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError(f"discount must be in (0, 1], got {self.discount}")
        if not 0.0 <= self.gae_lambda <= 1.0:
            raise ValueError(f"gae_lambda must be in [0, 1], got {self.gae_lambda}")
        if self.algo == "ppo" and self.clipping_enabled and self.clip_range <= 0:
            raise ValueError("clip_range must be positive when clipping is enabled")
        if self.max_grad_norm < 0:
            raise ValueError("max_grad_norm must be >= 0 (0 disables clipping)")

    @classmethod
    def ppo(cls, total_steps, **overrides) -> "TrainConfig":
        base = dict(
            algo="ppo",
            total_steps=total_steps,
            learning_rate=3e-4,
            rollout_steps=1280,
            batch_size=64,
            n_epochs=10,
            clip_range=0.2,
            init_log_std=0.0,
            advantage_normalization=True,
        )
        base.update(overrides)
        return cls(**base)

    @classmethod
    def a2c(cls, total_steps, **overrides) -> "TrainConfig":
        base = dict(
            algo="a2c",
            total_steps=total_steps,
            learning_rate=1e-4,
            rollout_steps=256,
            batch_size=256,
            n_epochs=1,
            init_log_std=-2.0,
            advantage_normalization=False,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def effective_epochs(self) -> int:
        """Unclipped PPO must take a single pass or the policy runs away."""
        if self.algo == "ppo" and not self.clipping_enabled:
            return 1
        return self.n_epochs


def gae_advantages(rewards, values, dones, bootstrap_value, gamma, lam):
    """Generalized advantage estimates and value targets.

    rewards[t] is the reward earned by step t, values[t] = V(x_t), dones[t]
    flags episode end at step t; bootstrap_value estimates V of the state
    after the last step (ignored past a done). Backward recursion:
    delta_t = r + gamma V(x_{t+1}) (1 - done) - V(x_t),
    A_t = delta_t + gamma lam (1 - done) A_{t+1}; targets are A + V.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if not rewards.shape == values.shape == dones.shape:
        raise ValueError("rewards, values, and dones must share one shape")
    t_len = rewards.shape[0]
    advantages = np.empty(t_len)
    next_value = float(bootstrap_value)
    next_advantage = 0.0
    for t in range(t_len - 1, -1, -1):
        nonterminal = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        next_advantage = delta + gamma * lam * nonterminal * next_advantage
        advantages[t] = next_advantage
        next_value = values[t]
    return advantages, advantages + values


class RolloutBuffer:
    """Fixed-size on-policy transition store for one update."""

    def __init__(self, size, obs_dim, action_dim, context_dim=None):
        self.size = int(size)
        self.observations = np.zeros((size, obs_dim))
        self.actions = np.zeros((size, action_dim))
        self.log_probs = np.zeros(size)
        self.rewards = np.zeros(size)
        self.values = np.zeros(size)
        self.dones = np.zeros(size)
        self.contexts = None if context_dim is None else np.zeros((size, context_dim))
        self.advantages = None
        self.returns = None
        self.pos = 0

    def add(self, obs, action, log_prob, reward, value, done, context=None):
        if self.pos >= self.size:
            raise ValueError("rollout buffer is full")
        i = self.pos
        self.observations[i] = obs
        self.actions[i] = action
        self.log_probs[i] = log_prob
        self.rewards[i] = reward
        self.values[i] = value
        self.dones[i] = float(done)
        if self.contexts is not None:
            if context is None:
                raise ValueError("this buffer expects a context per step")
            self.contexts[i] = context
        self.pos = i + 1

    def compute_advantages(self, bootstrap_value, gamma, lam):
        if self.pos != self.size:
            raise ValueError(f"buffer holds {self.pos}/{self.size} steps")
        self.advantages, self.returns = gae_advantages(
            self.rewards, self.values, self.dones, bootstrap_value, gamma, lam
        )

    def reset(self):
        self.advantages = None
        self.returns = None
        self.pos = 0


class MiniBatch(NamedTuple):
    observations: np.ndarray
    actions: np.ndarray
    old_log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    contexts: np.ndarray = None


def gaussian_log_prob(mean, log_std, actions) -> np.ndarray:
    """Row-wise log density of a diagonal Gaussian."""
    std = np.exp(log_std)
    diff = (actions - mean) / std
    return -0.5 * np.sum(diff**2, axis=1) - np.sum(log_std) - 0.5 * mean.shape[
        1
    ] * _LOG_2PI


def gaussian_entropy(log_std) -> float:
    return float(np.sum(log_std) + 0.5 * log_std.shape[0] * (_LOG_2PI + 1.0))


def _forward(net, batch: MiniBatch):
    if batch.contexts is None:
        return net.forward(batch.observations)
    return net.forward(batch.observations, batch.contexts)


def loss_terms(net, batch: MiniBatch, config: TrainConfig) -> dict:
    """Forward pass and every loss component, no gradients touched."""
    mean, value = _forward(net, batch)
    log_std = net.log_std.value
    log_probs = gaussian_log_prob(mean, log_std, batch.actions)
    ratio = np.exp(log_probs - batch.old_log_probs)
    adv = batch.advantages

    if config.algo == "a2c":
        policy_loss = -float(np.mean(log_probs * adv))
    elif config.clipping_enabled:
        eps = config.clip_range
        unclipped = ratio * adv
        clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
        policy_loss = -float(np.mean(np.minimum(unclipped, clipped)))
    else:
        policy_loss = -float(np.mean(ratio * adv))

    value_loss = float(np.mean((value - batch.returns) ** 2))
    entropy = gaussian_entropy(log_std)
    total = (
        policy_loss
        + config.value_coef * value_loss
        - config.entropy_coef * entropy
    )
    with np.errstate(divide="ignore", invalid="ignore"):
        kl_terms = (ratio - 1.0) - np.log(ratio)
    return {
        "mean": mean,
        "value": value,
        "log_probs": log_probs,
        "ratio": ratio,
        "policy_loss": policy_loss,
        "value_loss": value_loss,
        "entropy": entropy,
        "loss": total,
        "approx_kl": float(np.mean(kl_terms)),
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > config.clip_range)),
    }


def loss_and_grads(net, batch: MiniBatch, config: TrainConfig) -> dict:
    """Loss terms plus analytic gradients accumulated into net params.

    The per-sample policy gradient through the ratio is zeroed exactly when
    the clipped branch is active: (A > 0 and rho > 1 + eps) or (A < 0 and
    rho < 1 - eps); ties at the boundary keep the unclipped branch.
    """
    terms = loss_terms(net, batch, config)
    mean, value = terms["mean"], terms["value"]
    ratio = terms["ratio"]
    adv = batch.advantages
    n = len(adv)
    log_std = net.log_std.value
    std = np.exp(log_std)

    if config.algo == "a2c":
        d_log_probs = -adv / n
    elif config.clipping_enabled:
        eps = config.clip_range
        unclipped = ratio * adv
        clipped = np.clip(ratio, 1.0 - eps, 1.0 + eps) * adv
        flows = unclipped <= clipped
        d_log_probs = -(adv * ratio * flows) / n
    else:
        d_log_probs = -(adv * ratio) / n

    diff = (batch.actions - mean) / std
    d_mean = d_log_probs[:, None] * diff / std
    d_log_std = np.sum(d_log_probs[:, None] * (diff**2 - 1.0), axis=0)
    d_log_std -= config.entropy_coef  # d(-coef * entropy)/d log_std
    d_value = config.value_coef * 2.0 * (value - batch.returns) / n

    net.zero_grads()
    net.backward(d_mean, d_value)
    net.log_std.grad += d_log_std
    return terms


def sample_action(net, observation, rng=None, deterministic=False, context=None):
    """Draw (action, log-probability) from the policy at one observation."""
    action, log_prob, _ = act_and_value(
        net, observation, rng, deterministic=deterministic, context=context
    )
    return action, log_prob


def act_and_value(net, observation, rng=None, deterministic=False, context=None):
    """(action, log-probability, value) in a single forward pass."""
    obs = np.asarray(observation, dtype=np.float64)[None, :]
    if context is not None:
        mean, value = net.forward(obs, np.asarray(context, dtype=np.float64)[None, :])
    else:
        mean, value = net.forward(obs)
    mean = mean[0]
    log_std = net.log_std.value
    if deterministic:
        action = mean.copy()
    else:
        if rng is None:
            raise ValueError("stochastic sampling needs an rng")
        action = mean + np.exp(log_std) * rng.standard_normal(mean.shape[0])
    log_prob = float(gaussian_log_prob(mean[None, :], log_std, action[None, :])[0])
    return action, log_prob, float(value[0])


def _normalized(advantages, enabled: bool) -> np.ndarray:
    if not enabled or advantages.shape[0] < 2:
        return advantages
    std = advantages.std(ddof=1)
    if std < 1e-8:
        return advantages
    return (advantages - advantages.mean()) / std


def _aggregate(diags: list, aborted: bool) -> dict:
    keys = ("loss", "policy_loss", "value_loss", "entropy", "clip_fraction",
            "approx_kl", "grad_norm")
    out = {k: float(np.mean([d[k] for d in diags])) if diags else float("nan")
           for k in keys}
    out["n_minibatches"] = len(diags)
    out["aborted"] = aborted
    return out


def ppo_update(net, buffer: RolloutBuffer, config: TrainConfig, optimizer: Adam,
               rng) -> dict:
    """Epochs of shuffled-minibatch clipped-surrogate steps over one rollout.

    With clipping disabled the surrogate is the raw ratio * advantage and a
    single epoch runs regardless of n_epochs. A non-finite loss or gradient
    aborts the update before applying that step.
    """
    if buffer.advantages is None:
        raise ValueError("compute_advantages() before updating")
    diags = []
    for _epoch in range(config.effective_epochs):
        perm = rng.permutation(buffer.size)
        for start in range(0, buffer.size, config.batch_size):
            idx = perm[start : start + config.batch_size]
            adv = _normalized(
                buffer.advantages[idx], config.advantage_normalization
            )
            batch = MiniBatch(
                observations=buffer.observations[idx],
                actions=buffer.actions[idx],
                old_log_probs=buffer.log_probs[idx],
                advantages=adv,
                returns=buffer.returns[idx],
                contexts=None if buffer.contexts is None else buffer.contexts[idx],
            )
            terms = loss_and_grads(net, batch, config)
            grad_norm = clip_grad_norm(net.params(), config.max_grad_norm)
            terms["grad_norm"] = grad_norm
            if not (math.isfinite(terms["loss"]) and math.isfinite(grad_norm)):
                return _aggregate(diags, aborted=True)
            optimizer.step()
            net.clamp_log_std()
            diags.append(terms)
    return _aggregate(diags, aborted=False)


def a2c_update(net, buffer: RolloutBuffer, config: TrainConfig, optimizer: Adam,
               rng=None) -> dict:
    """One gradient step over the whole rollout (no shuffling, raw advantages
    unless the config says otherwise)."""
    if buffer.advantages is None:
        raise ValueError("compute_advantages() before updating")
    adv = _normalized(buffer.advantages, config.advantage_normalization)
    batch = MiniBatch(
        observations=buffer.observations,
        actions=buffer.actions,
        old_log_probs=buffer.log_probs,
        advantages=adv,
        returns=buffer.returns,
        contexts=buffer.contexts,
    )
    terms = loss_and_grads(net, batch, config)
    grad_norm = clip_grad_norm(net.params(), config.max_grad_norm)
    terms["grad_norm"] = grad_norm
    if not (math.isfinite(terms["loss"]) and math.isfinite(grad_norm)):
        return _aggregate([], aborted=True)
    optimizer.step()
    net.clamp_log_std()
    return _aggregate([terms], aborted=False)
