"""Policy and value approximators with both update backends.

``GaussianPolicy`` squashes a Gaussian head into the action box with tanh.
Two learners operate on search trajectories: supervised distillation of
visit-count distributions plus n-step value regression, and a twin-critic
entropy-regularized actor-critic for the non-distillation variants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .net import (
    LOG_TWO_PI,
    ActorCriticObjective,
    CrossEntropyToWeights,
    Mlp,
    OptState,
    SquaredError,
    _stable_log_one_minus_tanh_sq,
    init_mlp,
    init_opt,
    train_step,
)


@dataclass
class GaussianPolicy:
    """State -> squashed diagonal Gaussian over the action box."""

    net: Mlp
    action_low: np.ndarray
    action_high: np.ndarray
    log_std_min: float = -5.0
    log_std_max: float = 2.0

    def __post_init__(self):
        self.action_low = np.asarray(self.action_low, dtype=np.float64)
        self.action_high = np.asarray(self.action_high, dtype=np.float64)
        self._center = 0.5 * (self.action_high + self.action_low)
        self._scale = 0.5 * (self.action_high - self.action_low)

    @property
    def action_dim(self) -> int:
        return self.action_low.size

    def head(self, s):
        out = self.net.forward(np.asarray(s, dtype=np.float64))
        half = self.net.out_dim // 2
        mean = out[..., :half]
        log_std = np.clip(out[..., half:], self.log_std_min, self.log_std_max)
        return mean, log_std

    def _squash(self, u):
        return self._center + self._scale * np.tanh(u)

    def _log_prob_from_u(self, u, mean, log_std):
        xi = (u - mean) * np.exp(-log_std)
        gauss = np.sum(-0.5 * LOG_TWO_PI - log_std - 0.5 * xi * xi, axis=-1)
        correction = np.sum(
            np.log(self._scale) + _stable_log_one_minus_tanh_sq(u), axis=-1
        )
        return gauss - correction

    def sample(self, s, rng: np.random.Generator):
        """Reparameterized draw squashed into the box; returns the action
        and its log density."""
        mean, log_std = self.head(s)
        xi = rng.standard_normal(mean.shape)
        u = mean + np.exp(log_std) * xi
        action = self._squash(u)
        return action, float(self._log_prob_from_u(u, mean, log_std))

    def sample_batch(self, states: np.ndarray, rng: np.random.Generator):
        mean, log_std = self.head(states)
        xi = rng.standard_normal(mean.shape)
        u = mean + np.exp(log_std) * xi
        return self._squash(u), self._log_prob_from_u(u, mean, log_std)

    def mean_action(self, s):
        mean, _ = self.head(s)
        return self._squash(mean)

    def log_prob(self, s, action):
        """Log density of a given in-box action."""
        mean, log_std = self.head(s)
        t = np.clip(
            (np.asarray(action) - self._center) / self._scale,
            -1.0 + 1e-12,
            1.0 - 1e-12,
        )
        u = np.arctanh(t)
        return float(self._log_prob_from_u(u, mean, log_std))

    def act(self, s, rng: np.random.Generator | None = None, mode: str = "mean"):
        if mode == "mean":
            return self.mean_action(s)
        if mode == "sample":
            return self.sample(s, rng)[0]
        raise ConfigError(f"unknown action mode {mode!r}")

    # proposal interface consumed by the tree search
    def propose(self, s, rng: np.random.Generator):
        return self.sample(s, rng)[0]

    def propose_uniform(self, s, rng: np.random.Generator):
        return rng.uniform(self.action_low, self.action_high)


def make_policy(
    state_dim: int,
    action_low,
    action_high,
    hidden=(64, 64),
    seed: int = 0,
    log_std_min: float = -5.0,
    log_std_max: float = 2.0,
) -> GaussianPolicy:
    action_low = np.asarray(action_low, dtype=np.float64)
    net = init_mlp([state_dim, *hidden, 2 * action_low.size], seed)
    return GaussianPolicy(net, action_low, action_high, log_std_min, log_std_max)


def policy_sample(policy: GaussianPolicy, s, rng: np.random.Generator):
    return policy.sample(s, rng)


@dataclass
class ValueNet:
    """State -> scalar value."""

    net: Mlp

    def __call__(self, s) -> float:
        return float(self.net.forward(np.asarray(s, dtype=np.float64))[..., 0])

    def batch(self, states: np.ndarray) -> np.ndarray:
        return self.net.forward(states)[:, 0]


def make_value(state_dim: int, hidden=(64, 64), seed: int = 0) -> ValueNet:
    return ValueNet(init_mlp([state_dim, *hidden, 1], seed))


@dataclass
class CriticPair:
    """Twin action-value networks plus slowly tracking target copies."""

    q1: Mlp
    q2: Mlp
    q1_target: Mlp
    q2_target: Mlp

    def target_min(self, x: np.ndarray) -> np.ndarray:
        a = self.q1_target.forward(x)[..., 0]
        b = self.q2_target.forward(x)[..., 0]
        return np.minimum(a, b)

    def online_min(self, x: np.ndarray) -> np.ndarray:
        a = self.q1.forward(x)[..., 0]
        b = self.q2.forward(x)[..., 0]
        return np.minimum(a, b)

    def soft_update(self, rate: float) -> None:
        """target <- (1 - rate) * target + rate * online, in place."""
        for online, target in ((self.q1, self.q1_target), (self.q2, self.q2_target)):
            for po, pt in zip(online.params(), target.params()):
                pt *= 1.0 - rate
                pt += rate * po


def make_critics(state_dim: int, action_dim: int, hidden=(64, 64), seed: int = 0):
    q1 = init_mlp([state_dim + action_dim, *hidden, 1], seed)
    q2 = init_mlp([state_dim + action_dim, *hidden, 1], seed + 1)
    return CriticPair(q1, q2, q1.copy(), q2.copy())


# ---------------------------------------------------------------------------
# distillation targets and updates


def compute_z(traj, t: int, n: int, gamma: float) -> float:
    """n-step discounted sum of penalized rewards bootstrapped with the
    stored search value n steps ahead; shorter tails bootstrap with the
    final stored value at the matching discount."""
    length = len(traj)
    if not 0 <= t < length:
        raise ContractError(f"index {t} outside trajectory of length {length}")
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    stop = min(t + n, length - 1)
    z = 0.0
    discount = 1.0
    for i in range(t, stop):
        z += discount * traj.rewards_penalized[i]
        discount *= gamma
    return z + discount * traj.search_values[stop]


def sl_policy_update(
    policy: GaussianPolicy, batch, opt: OptState
) -> tuple[GaussianPolicy, float]:
    """Cross-entropy step toward search visit distributions.

    ``batch`` items are ``(state, support_actions, weights)``; the loss is
    the batch mean of -sum_j w_j log pi(a_j | s).
    """
    if len(batch) == 0:
        raise DataError("empty batch in sl_policy_update")
    loss_fn = CrossEntropyToWeights(
        policy.action_low,
        policy.action_high,
        policy.log_std_min,
        policy.log_std_max,
    )
    items = []
    for s, actions, weights in batch:
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if actions.shape[0] == 0:
            raise DataError("empty action support in sl_policy_update batch")
        items.append((s, (actions, np.asarray(weights, dtype=np.float64))))
    net, _, loss = train_step(policy.net, opt, items, loss_fn)
    return (
        GaussianPolicy(
            net,
            policy.action_low,
            policy.action_high,
            policy.log_std_min,
            policy.log_std_max,
        ),
        loss,
    )


def value_update(value: ValueNet, batch, opt: OptState) -> tuple[ValueNet, float]:
    """One squared-error step toward the n-step targets."""
    if len(batch) == 0:
        raise DataError("empty batch in value_update")
    items = []
    for s, z in batch:
        if not np.isfinite(z):
            raise DataError(f"non-finite value target {z!r}")
        items.append((s, np.array([z])))
    net, _, loss = train_step(value.net, opt, items, SquaredError())
    return ValueNet(net), loss


# ---------------------------------------------------------------------------
# actor-critic backend


@dataclass
class SacConfig:
    gamma: float = 0.99
    target_trail: float = 0.005
    init_temperature: float = 0.2
    auto_temperature: bool = True
    target_entropy: float | None = None  # defaults to -action_dim
    temperature_lr: float = 3e-4


@dataclass
class SacOptimizers:
    policy: OptState
    q1: OptState
    q2: OptState
    log_alpha: float = np.log(0.2)
    alpha_m: float = 0.0
    alpha_v: float = 0.0
    alpha_step: int = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))


def make_sac_optimizers(
    policy: GaussianPolicy,
    critics: CriticPair,
    lr: float = 3e-4,
    init_temperature: float = 0.2,
) -> SacOptimizers:
    return SacOptimizers(
        policy=init_opt(policy.net, learning_rate=lr),
        q1=init_opt(critics.q1, learning_rate=lr),
        q2=init_opt(critics.q2, learning_rate=lr),
        log_alpha=float(np.log(init_temperature)),
    )


def actor_critic_update(
    policy: GaussianPolicy,
    critics: CriticPair,
    batch,
    cfg: SacConfig,
    opts: SacOptimizers,
    rng: np.random.Generator,
):
    """One twin-critic TD step on entropy-regularized targets, one policy
    step on the min-critic objective, a temperature step toward the entropy
    target, and a convex-trail target update.

    ``batch`` items are ``(s, a, r_tilde, s_next, done)``. Returns the new
    policy, the critics (targets updated in place), and diagnostics.
    """
    if len(batch) == 0:
        raise DataError("empty batch in actor_critic_update")
    states = np.stack([np.asarray(item[0], np.float64) for item in batch])
    actions = np.stack([np.asarray(item[1], np.float64) for item in batch])
    rewards = np.array([float(item[2]) for item in batch])
    next_states = np.stack([np.asarray(item[3], np.float64) for item in batch])
    dones = np.array([float(item[4]) for item in batch])

    alpha = opts.alpha
    next_actions, next_logp = policy.sample_batch(next_states, rng)
    next_q = critics.target_min(np.concatenate([next_states, next_actions], axis=1))
    targets = rewards + cfg.gamma * (1.0 - dones) * (next_q - alpha * next_logp)
    if not np.all(np.isfinite(targets)):
        raise DataError("non-finite critic targets")

    sa = np.concatenate([states, actions], axis=1)
    critic_batch = [(sa[i], np.array([targets[i]])) for i in range(len(batch))]
    q1_new, _, q1_loss = train_step(critics.q1, opts.q1, critic_batch, SquaredError())
    q2_new, _, q2_loss = train_step(critics.q2, opts.q2, critic_batch, SquaredError())
    critics = CriticPair(q1_new, q2_new, critics.q1_target, critics.q2_target)

    objective = ActorCriticObjective(
        critics.q1,
        critics.q2,
        alpha,
        policy.action_low,
        policy.action_high,
        policy.log_std_min,
        policy.log_std_max,
    )
    xi = rng.standard_normal((len(batch), policy.action_dim))
    policy_batch = [(states[i], (states[i], xi[i])) for i in range(len(batch))]
    policy_net, _, policy_loss = train_step(
        policy.net, opts.policy, policy_batch, objective
    )
    policy = GaussianPolicy(
        policy_net,
        policy.action_low,
        policy.action_high,
        policy.log_std_min,
        policy.log_std_max,
    )

    _, fresh_logp = policy.sample_batch(states, rng)
    mean_logp = float(fresh_logp.mean())
    if cfg.auto_temperature:
        target_entropy = (
            -policy.action_dim if cfg.target_entropy is None else cfg.target_entropy
        )
        grad = -(mean_logp + target_entropy)
        opts.alpha_step += 1
        opts.alpha_m = 0.9 * opts.alpha_m + 0.1 * grad
        opts.alpha_v = 0.999 * opts.alpha_v + 0.001 * grad * grad
        m_hat = opts.alpha_m / (1.0 - 0.9**opts.alpha_step)
        v_hat = opts.alpha_v / (1.0 - 0.999**opts.alpha_step)
        opts.log_alpha -= cfg.temperature_lr * m_hat / (np.sqrt(v_hat) + 1e-8)

    critics.soft_update(cfg.target_trail)

    diagnostics = {
        "critic_loss": 0.5 * (q1_loss + q2_loss),
        "policy_loss": policy_loss,
        "alpha": opts.alpha,
        "mean_log_prob": mean_logp,
        "mean_target": float(targets.mean()),
    }
    return policy, critics, diagnostics


class SacValueAdapter:
    """State value derived from the critics at the policy's mean action;
    bootstraps the tree search for the actor-critic variants."""

    def __init__(self, policy: GaussianPolicy, critics: CriticPair):
        self.policy = policy
        self.critics = critics

    def __call__(self, s) -> float:
        s = np.asarray(s, dtype=np.float64)
        a = self.policy.mean_action(s)
        return float(self.critics.target_min(np.concatenate([s, a])[None, :])[0])
