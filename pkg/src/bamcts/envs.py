"""Desk-scale ground-truth environments, offline dataset generation at
graded behavior quality, and true-environment policy evaluation.

All dynamics are closed-form so ground truth is exact and fast. Each
environment ships a scripted expert controller; behavior qualities are
derived from it (random / medium / expert / medium-replay-mix).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ensemble import TransitionDataset
from .errors import ConfigError
from .oracle import DiscreteBAMDP

ENV_NAMES = ("nav2d-noisy", "pendulum-noisy", "bandit-bamdp", "tracker-1d")
BEHAVIOR_QUALITIES = ("random", "medium", "expert", "medium-replay-mix")


class Env:
    """Stochastic environment with a scripted expert controller.

    ``reset`` and ``step`` are pure in the passed generator, so trajectories
    are fully determined by (seed, action sequence).
    """

    name: str
    state_dim: int
    action_dim: int
    horizon: int
    action_low: np.ndarray
    action_high: np.ndarray

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def step(self, state, action, rng: np.random.Generator):
        raise NotImplementedError

    def expert_action(self, state) -> np.ndarray:
        raise NotImplementedError


class Nav2dNoisy(Env):
    """Point mass on the plane: s' = s + 0.1 a + eps, eps ~ N(0, 0.05^2 I);
    reward is the negative squared distance to the goal scaled by dt."""

    name = "nav2d-noisy"
    state_dim = 2
    action_dim = 2
    horizon = 40

    def __init__(self, seed: int = 0, noise_std: float = 0.05):
        self.seed = seed
        self.noise_std = noise_std
        self.dt = 0.1
        self.goal = np.array([1.0, 1.0])
        self.action_low = -np.ones(2)
        self.action_high = np.ones(2)

    def reset(self, rng):
        return rng.uniform(-1.0, 1.0, size=2)

    def step(self, state, action, rng):
        action = np.clip(action, self.action_low, self.action_high)
        nxt = state + self.dt * action + rng.normal(0.0, self.noise_std, size=2)
        reward = -float(np.sum((nxt - self.goal) ** 2)) * self.dt
        return reward, nxt

    def expert_action(self, state):
        return np.clip(10.0 * (self.goal - state), -1.0, 1.0)


class PendulumNoisy(Env):
    """Analytic pendulum with a stochastic torque disturbance; the optional
    heteroscedastic mode scales the disturbance with angular velocity."""

    name = "pendulum-noisy"
    state_dim = 2
    action_dim = 1
    horizon = 60

    def __init__(self, seed: int = 0, heteroscedastic: bool = False):
        self.seed = seed
        self.heteroscedastic = heteroscedastic
        self.gravity = 10.0
        self.mass = 1.0
        self.length = 1.0
        self.dt = 0.05
        self.max_speed = 8.0
        self.noise_std = 0.1
        self.action_low = np.array([-2.0])
        self.action_high = np.array([2.0])

    def reset(self, rng):
        return np.array([rng.uniform(-np.pi / 3, np.pi / 3), rng.uniform(-1.0, 1.0)])

    def step(self, state, action, rng):
        theta, omega = state
        torque = float(np.clip(action, self.action_low, self.action_high)[0])
        std = self.noise_std * (1.0 + 0.5 * abs(omega)) if self.heteroscedastic else self.noise_std
        torque += rng.normal(0.0, std)
        accel = (
            3.0 * self.gravity / (2.0 * self.length) * np.sin(theta)
            + 3.0 / (self.mass * self.length**2) * torque
        )
        omega = np.clip(omega + accel * self.dt, -self.max_speed, self.max_speed)
        theta = ((theta + omega * self.dt) + np.pi) % (2.0 * np.pi) - np.pi
        reward = -(theta**2 + 0.1 * omega**2 + 0.001 * torque**2) * self.dt
        return float(reward), np.array([theta, omega])

    def expert_action(self, state):
        theta, omega = state
        return np.clip(np.array([-8.0 * theta - 2.0 * omega]), self.action_low, self.action_high)


class Tracker1d(Env):
    """Track a sinusoidal target; reward is the negative squared tracking
    error normalized by the horizon (0 at perfect tracking). The state is
    (position, current target, normalized time)."""

    name = "tracker-1d"
    state_dim = 3
    action_dim = 1
    horizon = 50

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.gain = 0.2
        self.noise_std = 0.02
        self.amplitude = 0.8
        self.action_low = np.array([-1.0])
        self.action_high = np.array([1.0])

    def target(self, t: int) -> float:
        return self.amplitude * np.sin(2.0 * np.pi * t / self.horizon)

    def reset(self, rng):
        return np.array([rng.uniform(-1.0, 1.0), self.target(0), 0.0])

    def step(self, state, action, rng):
        x, _, phase = state
        t_next = int(round(phase * self.horizon)) + 1
        a = float(np.clip(action, self.action_low, self.action_high)[0])
        x_next = x + self.gain * a + rng.normal(0.0, self.noise_std)
        target_next = self.target(t_next)
        reward = -((x_next - target_next) ** 2) / self.horizon
        return float(reward), np.array(
            [x_next, target_next, t_next / self.horizon]
        )

    def expert_action(self, state):
        x, _, phase = state
        t_next = int(round(phase * self.horizon)) + 1
        return np.clip(
            np.array([(self.target(t_next) - x) / self.gain]),
            self.action_low,
            self.action_high,
        )


def two_candidate_bandit() -> DiscreteBAMDP:
    """The shipped two-candidate bandit: arm 0 pays 1 under the first
    candidate and 0 under the second (the transition reveals which), arm 1
    pays 0.6 always. With a uniform prior, gamma=1 and horizon 2 the
    Bayes-optimal value is 1.3 and the optimal first action is arm 0."""
    n_states, n_actions = 3, 2
    transitions = np.zeros((2, n_states, n_actions, n_states))
    rewards = np.zeros((2, n_states, n_actions))
    for s in range(n_states):
        transitions[0, s, 0, 1] = 1.0  # candidate 0: arm 0 reveals state 1
        transitions[1, s, 0, 2] = 1.0  # candidate 1: arm 0 reveals state 2
        transitions[:, s, 1, s] = 1.0  # arm 1 stays put
        rewards[0, s, 0] = 1.0
        rewards[1, s, 0] = 0.0
        rewards[:, s, 1] = 0.6
    return DiscreteBAMDP(
        transitions=transitions,
        rewards=rewards,
        prior=np.array([0.5, 0.5]),
        gamma=1.0,
        horizon=2,
        initial_state=0,
    )


def two_model_chain() -> DiscreteBAMDP:
    """The shipped 2-model stochastic chain used by the root-sampling
    verifier: the candidates disagree on transition probabilities, so every
    realized history carries information."""
    transitions = np.zeros((2, 2, 2, 2))
    transitions[0, 0, 0] = [0.8, 0.2]
    transitions[1, 0, 0] = [0.2, 0.8]
    transitions[0, 0, 1] = [0.5, 0.5]
    transitions[1, 0, 1] = [0.9, 0.1]
    transitions[0, 1, 0] = [0.3, 0.7]
    transitions[1, 1, 0] = [0.6, 0.4]
    transitions[0, 1, 1] = [0.9, 0.1]
    transitions[1, 1, 1] = [0.4, 0.6]
    rewards = np.zeros((2, 2, 2))
    rewards[:, 0, 0] = 0.2
    rewards[:, 0, 1] = 0.5
    rewards[:, 1, 0] = 1.0
    rewards[:, 1, 1] = 0.1
    return DiscreteBAMDP(
        transitions=transitions,
        rewards=rewards,
        prior=np.array([0.5, 0.5]),
        gamma=0.95,
        horizon=4,
        initial_state=0,
    )


class BanditBamdpEnv(Env):
    """Discrete wrapper whose ``bamdp`` attribute feeds the oracle suite.
    Episodes sample a hidden candidate at reset (held on the instance, so
    one worker per instance)."""

    name = "bandit-bamdp"
    state_dim = 1
    action_dim = 1
    horizon = 2

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.bamdp = two_candidate_bandit()
        self.action_low = np.zeros(1)
        self.action_high = np.ones(1) * (self.bamdp.n_actions - 1)
        self._theta = 0

    def reset(self, rng):
        self._theta = min(
            int(np.searchsorted(np.cumsum(self.bamdp.prior), rng.random())),
            self.bamdp.n_models - 1,
        )
        return np.array([float(self.bamdp.initial_state)])

    def step(self, state, action, rng):
        s = int(round(float(state[0])))
        a = int(np.clip(round(float(np.asarray(action).reshape(-1)[0])), 0, self.bamdp.n_actions - 1))
        probs = self.bamdp.transitions[self._theta, s, a]
        s_next = min(int(np.searchsorted(np.cumsum(probs), rng.random())), self.bamdp.n_states - 1)
        reward = float(self.bamdp.rewards[self._theta, s, a])
        return reward, np.array([float(s_next)])

    def expert_action(self, state):
        return np.zeros(1)


def make_env(name: str, seed: int = 0) -> Env:
    if name == "nav2d-noisy":
        return Nav2dNoisy(seed)
    if name == "pendulum-noisy":
        return PendulumNoisy(seed)
    if name == "tracker-1d":
        return Tracker1d(seed)
    if name == "bandit-bamdp":
        return BanditBamdpEnv(seed)
    raise ConfigError(f"unknown environment {name!r}; choose from {ENV_NAMES}")


# ---------------------------------------------------------------------------
# behavior policies and dataset generation


@dataclass
class BehaviorSpec:
    """Data-collection behavior: a quality tag with optional overrides."""

    quality: str = "medium"
    noise_scale: float | None = None
    controller: object = None  # optional callable (env, state, rng) -> action

    def __post_init__(self):
        if self.quality not in BEHAVIOR_QUALITIES:
            raise ConfigError(
                f"unknown behavior quality {self.quality!r}; "
                f"choose from {BEHAVIOR_QUALITIES}"
            )


def _behavior_action(env: Env, spec: BehaviorSpec, state, rng, episode_mode: str):
    if spec.controller is not None:
        return spec.controller(env, state, rng)
    mode = spec.quality if spec.quality != "medium-replay-mix" else episode_mode
    if mode == "random":
        return rng.uniform(env.action_low, env.action_high)
    if mode == "expert":
        noise = 0.05 if spec.noise_scale is None else spec.noise_scale
        a = env.expert_action(state) + noise * rng.standard_normal(env.action_dim)
        return np.clip(a, env.action_low, env.action_high)
    # medium: weakened expert with exploration noise
    noise = 0.4 if spec.noise_scale is None else spec.noise_scale
    a = 0.5 * env.expert_action(state) + noise * rng.standard_normal(env.action_dim)
    return np.clip(a, env.action_low, env.action_high)


def generate_dataset(
    env: Env, spec: BehaviorSpec, n_transitions: int, seed: int = 0
) -> TransitionDataset:
    """Roll the behavior controller until n transitions are collected;
    records episode boundaries and stores behavior return statistics."""
    if n_transitions < 1:
        raise ConfigError(f"need at least one transition, got {n_transitions}")
    rng = np.random.default_rng(seed)
    states, actions, rewards, next_states, dones = [], [], [], [], []
    episode_returns = []
    while len(states) < n_transitions:
        episode_mode = (
            "random" if rng.random() < 0.5 else "medium"
        ) if spec.quality == "medium-replay-mix" else spec.quality
        s = env.reset(rng)
        ep_return = 0.0
        for t in range(env.horizon):
            a = _behavior_action(env, spec, s, rng, episode_mode)
            r, s_next = env.step(s, a, rng)
            done = t == env.horizon - 1
            states.append(s)
            actions.append(np.asarray(a, dtype=np.float64).reshape(-1))
            rewards.append(r)
            next_states.append(s_next)
            dones.append(done)
            ep_return += r
            s = s_next
            if len(states) >= n_transitions:
                break
        else:
            episode_returns.append(ep_return)
            continue
        if dones[-1]:
            episode_returns.append(ep_return)
        break
    returns = np.asarray(episode_returns) if episode_returns else np.zeros(1)
    data = TransitionDataset(
        states=np.stack(states)[:n_transitions],
        actions=np.stack(actions)[:n_transitions],
        rewards=np.asarray(rewards)[:n_transitions],
        next_states=np.stack(next_states)[:n_transitions],
        dones=np.asarray(dones)[:n_transitions],
    )
    data.info = {
        "env": env.name,
        "env_seed": env.seed,
        "quality": spec.quality,
        "behavior_mean_return": float(returns.mean()),
        "behavior_std_return": float(returns.std()),
        "episodes": len(episode_returns),
        "seed": seed,
    }
    return data


def evaluate_policy(
    env: Env, policy, episodes: int, seed: int = 0, mode: str = "mean"
):
    """Seeded true-environment rollouts with pure policy inference (no
    search); returns (mean, std) of undiscounted returns."""
    if episodes < 1:
        raise ConfigError(f"need at least one episode, got {episodes}")
    returns = np.empty(episodes)
    for i, child in enumerate(np.random.SeedSequence(seed).spawn(episodes)):
        rng = np.random.default_rng(child)
        s = env.reset(rng)
        total = 0.0
        for _ in range(env.horizon):
            a = policy.act(s, rng, mode=mode)
            r, s = env.step(s, a, rng)
            total += r
        returns[i] = total
    return float(returns.mean()), float(returns.std())
