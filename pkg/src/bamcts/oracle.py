"""Exact machinery for small discrete Bayes-adaptive MDPs.

Three tools anchor the continuous planner's correctness: a brute-force
expectimax over histories (the Bayes-optimal value), a root-sampling
Monte-Carlo tree search over the same space, and a histogram verifier for
the root-sampling equivalence (the sampled-model frequency at any realized
history equals the exact posterior there).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .ensemble import BeliefDegeneracyWarning, _check_simplex
from .errors import CapacityError, ConfigError, DataError

NODE_BUDGET = 10_000_000


@dataclass
class DiscreteBAMDP:
    """A finite family of candidate MDPs over shared state/action sets.

    ``transitions[k, s, a]`` is a distribution over next states and
    ``rewards[k, s, a]`` a deterministic reward in [0, 1] for candidate k.
    """

    transitions: np.ndarray
    rewards: np.ndarray
    prior: np.ndarray
    gamma: float
    horizon: int
    initial_state: int = 0

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.prior = np.asarray(self.prior, dtype=np.float64)
        if self.transitions.ndim != 4:
            raise ConfigError("transitions must have shape (K, S, A, S)")
        k, s, a, s2 = self.transitions.shape
        if s != s2 or self.rewards.shape != (k, s, a):
            raise ConfigError("reward table shape must be (K, S, A)")
        row_sums = self.transitions.sum(axis=3)
        if np.any(np.abs(row_sums - 1.0) > 1e-12):
            raise ConfigError("each transition row must sum to 1 within 1e-12")
        if np.any(self.rewards < 0.0) or np.any(self.rewards > 1.0):
            raise ConfigError("rewards must lie in [0, 1]")
        _check_simplex(self.prior, k)
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")

    @property
    def n_models(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_states(self) -> int:
        return self.transitions.shape[1]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[2]

    def to_json(self, path) -> None:
        payload = {
            "transitions": self.transitions.tolist(),
            "rewards": self.rewards.tolist(),
            "prior": self.prior.tolist(),
            "gamma": self.gamma,
            "horizon": self.horizon,
            "initial_state": self.initial_state,
        }
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1)

    @classmethod
    def from_json(cls, path) -> "DiscreteBAMDP":
        with open(path) as fh:
            payload = json.load(fh)
        missing = {
            "transitions", "rewards", "prior", "gamma", "horizon"
        } - payload.keys()
        if missing:
            raise DataError(f"{path}: missing fields {sorted(missing)}")
        return cls(
            transitions=payload["transitions"],
            rewards=payload["rewards"],
            prior=payload["prior"],
            gamma=float(payload["gamma"]),
            horizon=int(payload["horizon"]),
            initial_state=int(payload.get("initial_state", 0)),
        )


# ---------------------------------------------------------------------------
# brute-force Bayes-optimal values


@dataclass
class HistoryNode:
    """One reachable history: exact posterior plus optimal values.

    ``children`` is keyed by the realized outcome ``(action, reward, next
    state)``; rewards are part of the outcome because candidate MDPs may
    disagree on them, in which case the observed reward is informative.
    """

    history: tuple
    state: int
    belief: np.ndarray
    value: float = 0.0
    q_values: np.ndarray = field(default=None)
    optimal_actions: tuple[int, ...] = ()
    children: dict = field(default_factory=dict)


def bayes_optimal_tree(m: DiscreteBAMDP, horizon: int | None = None) -> HistoryNode:
    """Exhaustive expectimax over reachable histories.

    Branches over joint (reward, next-state) outcomes; the posterior at a
    child multiplies the parent belief by the transition likelihood and the
    reward indicator of each candidate.
    """
    horizon = m.horizon if horizon is None else int(horizon)
    counter = {"nodes": 0}

    def expand(state: int, belief: np.ndarray, remaining: int, history: tuple):
        counter["nodes"] += 1
        if counter["nodes"] > NODE_BUDGET:
            raise CapacityError(f"history tree exceeded {NODE_BUDGET} nodes")
        node = HistoryNode(history=history, state=state, belief=belief)
        if remaining == 0:
            node.q_values = np.zeros(m.n_actions)
            return node
        q = np.zeros(m.n_actions)
        for a in range(m.n_actions):
            reward_values = np.unique(m.rewards[:, state, a])
            for r in reward_values:
                matches = np.isclose(m.rewards[:, state, a], r, atol=1e-12)
                for s_next in range(m.n_states):
                    w = belief * matches * m.transitions[:, state, a, s_next]
                    p = float(w.sum())
                    if p <= 0.0:
                        continue
                    child = expand(
                        s_next,
                        w / p,
                        remaining - 1,
                        history + (a, float(r), s_next),
                    )
                    node.children[(a, float(r), s_next)] = child
                    q[a] += p * (float(r) + m.gamma * child.value)
        node.q_values = q
        node.value = float(q.max())
        node.optimal_actions = tuple(
            int(a) for a in np.flatnonzero(q >= node.value - 1e-12)
        )
        return node

    return expand(m.initial_state, m.prior.copy(), horizon, (m.initial_state,))


def exact_history_posterior(m: DiscreteBAMDP, history: tuple) -> np.ndarray:
    """Posterior over candidates after an (s0, a1, s1, a2, s2, ...) history,
    using transition likelihoods only."""
    b = m.prior.copy()
    state = history[0]
    steps = (len(history) - 1) // 2
    for i in range(steps):
        a = history[1 + 2 * i]
        s_next = history[2 + 2 * i]
        w = b * m.transitions[:, state, a, s_next]
        total = w.sum()
        if total <= 0.0:
            raise DataError(f"history {history} is unreachable")
        b = w / total
        state = s_next
    return b


# ---------------------------------------------------------------------------
# root-sampling BAMCP


class _BamcpNode:
    __slots__ = ("visits", "action_visits", "q_values")

    def __init__(self, n_actions: int):
        self.visits = 0
        self.action_visits = np.zeros(n_actions, dtype=np.int64)
        self.q_values = np.zeros(n_actions)


def _uct_action(node: _BamcpNode, c: float) -> int:
    unvisited = np.flatnonzero(node.action_visits == 0)
    if unvisited.size:
        return int(unvisited[0])
    bonus = c * np.sqrt(np.log(node.visits) / node.action_visits)
    scores = node.q_values + bonus
    return int(np.argmax(scores))


def bamcp_search(
    m: DiscreteBAMDP,
    root_state: int,
    belief: np.ndarray,
    simulations: int,
    max_depth: int,
    uct_c: float,
    rng: np.random.Generator,
    rollout_policy=None,
) -> int:
    """Root-sampling tree search: each simulation draws one candidate model
    from the belief and follows it for the whole pass; tree nodes are keyed
    by the realized state/action history. Returns the root action with the
    highest Q estimate (lowest index on ties)."""
    if simulations < 1:
        raise ConfigError(f"need at least one simulation, got {simulations}")
    belief = _check_simplex(belief, m.n_models)
    if rollout_policy is None:
        rollout_policy = lambda state, r: int(r.integers(m.n_actions))

    tree: dict[tuple, _BamcpNode] = {}
    cum_belief = np.cumsum(belief)

    def rollout(state: int, theta: int, depth: int) -> float:
        if depth == 0:
            return 0.0
        a = rollout_policy(state, rng)
        s_next = int(np.searchsorted(np.cumsum(m.transitions[theta, state, a]), rng.random()))
        s_next = min(s_next, m.n_states - 1)
        r = m.rewards[theta, state, a]
        return r + m.gamma * rollout(s_next, theta, depth - 1)

    def simulate(key: tuple, state: int, theta: int, depth: int) -> float:
        if depth == 0:
            return 0.0
        node = tree.get(key)
        if node is None:
            node = _BamcpNode(m.n_actions)
            tree[key] = node
            a = rollout_policy(state, rng)
            s_next = int(
                np.searchsorted(np.cumsum(m.transitions[theta, state, a]), rng.random())
            )
            s_next = min(s_next, m.n_states - 1)
            r = m.rewards[theta, state, a]
            ret = r + m.gamma * rollout(s_next, theta, depth - 1)
            node.visits = 1
            node.action_visits[a] = 1
            node.q_values[a] = ret
            return ret
        a = _uct_action(node, uct_c)
        s_next = int(
            np.searchsorted(np.cumsum(m.transitions[theta, state, a]), rng.random())
        )
        s_next = min(s_next, m.n_states - 1)
        r = m.rewards[theta, state, a]
        ret = r + m.gamma * simulate(key + (a, s_next), s_next, theta, depth - 1)
        node.visits += 1
        node.action_visits[a] += 1
        node.q_values[a] += (ret - node.q_values[a]) / node.action_visits[a]
        return ret

    root_key = (root_state,)
    for _ in range(simulations):
        theta = int(np.searchsorted(cum_belief, rng.random()))
        theta = min(theta, m.n_models - 1)
        simulate(root_key, root_state, theta, max_depth)

    return int(np.argmax(tree[root_key].q_values))


def root_sampling_histogram(
    m: DiscreteBAMDP,
    forced_actions,
    samples: int,
    rng: np.random.Generator,
) -> dict[tuple, np.ndarray]:
    """Sample a candidate at the root, simulate the forced action sequence
    under it, and tally which candidate reached each realized history. The
    returned frequencies estimate the exact posterior at every history
    (root-sampling equivalence)."""
    if samples < 1:
        raise ConfigError(f"need at least one sample, got {samples}")
    counts: dict[tuple, np.ndarray] = {}
    cum_prior = np.cumsum(m.prior)
    cum_trans = np.cumsum(m.transitions, axis=3)

    for _ in range(samples):
        theta = min(int(np.searchsorted(cum_prior, rng.random())), m.n_models - 1)
        state = m.initial_state
        history = (state,)
        tally = counts.setdefault(history, np.zeros(m.n_models))
        tally[theta] += 1
        for a in forced_actions:
            s_next = min(
                int(np.searchsorted(cum_trans[theta, state, a], rng.random())),
                m.n_states - 1,
            )
            history = history + (int(a), s_next)
            tally = counts.setdefault(history, np.zeros(m.n_models))
            tally[theta] += 1
            state = s_next

    return {h: c / c.sum() for h, c in counts.items()}


# ---------------------------------------------------------------------------
# adapter exposing a DiscreteBAMDP through the world-model interface the
# continuous planner consumes (sample_transition / update_belief /
# penalized_reward); states and actions are plain ints.


class DiscreteBeliefModel:
    def __init__(self, m: DiscreteBAMDP):
        self.bamdp = m
        self._cum_trans = np.cumsum(m.transitions, axis=3)

    @property
    def K(self) -> int:
        return self.bamdp.n_models

    def update_belief(self, b, s, a, r, s_next) -> np.ndarray:
        b = _check_simplex(b, self.K)
        m = self.bamdp
        w = (
            b
            * m.transitions[:, s, a, s_next]
            * np.isclose(m.rewards[:, s, a], r, atol=1e-9)
        )
        total = w.sum()
        if total <= 0.0:
            warnings.warn(
                "observed transition has zero likelihood under every candidate",
                BeliefDegeneracyWarning,
            )
            return b.copy()
        return w / total

    def sample_transition(self, b, s, a, rng):
        b = _check_simplex(b, self.K)
        theta = min(int(np.searchsorted(np.cumsum(b), rng.random())), self.K - 1)
        s_next = min(
            int(np.searchsorted(self._cum_trans[theta, s, a], rng.random())),
            self.bamdp.n_states - 1,
        )
        r = float(self.bamdp.rewards[theta, s, a])
        return r, s_next, self.update_belief(b, s, a, r, s_next)

    def penalized_reward(self, r, b, s, a, penalty_coeff) -> float:
        """Mixture-spread penalty over the categorical next state (one-hot
        encoding) plus the reward table; zero when candidates agree."""
        if penalty_coeff < 0:
            raise ConfigError(f"penalty coefficient must be >= 0, got {penalty_coeff}")
        b = _check_simplex(b, self.K)
        if penalty_coeff == 0.0:
            return float(r)
        m = self.bamdp
        p_next = b @ m.transitions[:, s, a, :]
        state_var = float(np.sum(p_next - p_next**2))
        rw = m.rewards[:, s, a]
        reward_var = float(b @ rw**2 - (b @ rw) ** 2)
        return float(r) - penalty_coeff * np.sqrt(
            max(state_var + reward_var, 0.0)
        )
