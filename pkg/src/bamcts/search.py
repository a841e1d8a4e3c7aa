"""Monte-Carlo tree search over information states with double progressive
widening.

The tree alternates decision nodes (a state paired with a belief over world
models) and per-action outcome sets. Action sets and sampled-outcome sets
both grow sublinearly in visit counts, capped by configuration; selection
uses UCT on Q estimates min-max normalized across the whole tree; rewards
inside the tree are pessimistic (mixture-std penalty cached per outcome at
creation time).

The world model is any object exposing ``sample_transition(b, s, a, rng)``,
``update_belief`` and ``penalized_reward(r, b, s, a, coeff)`` (the Gaussian
ensemble, or the discrete adapter used by the oracle tests). The action
proposal must expose ``propose(s, rng)`` and ``propose_uniform(s, rng)``;
the value function is a plain callable on states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

RECURSION_CONDITIONS = ("node", "action", "child")


@dataclass
class SearchConfig:
    simulations: int = 50
    max_depth: int = 10
    gamma: float = 0.99
    action_widening: float = 0.5      # exponent on decision-node visits
    outcome_widening: float = 0.5     # exponent on action-edge visits
    uct_c: float = 2.5
    root_noise_frac: float = 0.3      # chance of an exploratory root proposal
    dirichlet_concentration: float = 0.3  # used by finite-support proposals
    max_actions: int = 20
    max_outcomes: int = 5
    penalty_coeff: float = 1.0
    recursion_condition: str = "node"
    keep_tree: bool = False

    def __post_init__(self):
        if self.simulations < 1:
            raise ConfigError(f"simulations must be >= 1, got {self.simulations}")
        if not 0.0 < self.action_widening < 1.0:
            raise ConfigError("action widening exponent must lie in (0, 1)")
        if not 0.0 < self.outcome_widening < 1.0:
            raise ConfigError("outcome widening exponent must lie in (0, 1)")
        if not 0.0 <= self.root_noise_frac <= 1.0:
            raise ConfigError("root noise fraction must lie in [0, 1]")
        if self.max_actions < 1 or self.max_outcomes < 1:
            raise ConfigError("widening caps must be >= 1")
        if self.penalty_coeff < 0.0:
            raise ConfigError("penalty coefficient must be >= 0")
        if self.recursion_condition not in RECURSION_CONDITIONS:
            raise ConfigError(
                f"recursion_condition must be one of {RECURSION_CONDITIONS}"
            )


@dataclass
class InfoState:
    """A physical state paired with a belief over world models."""

    state: object
    belief: np.ndarray


class Outcome:
    __slots__ = ("reward", "penalized", "node", "visits")

    def __init__(self, reward: float, penalized: float, node: "DecisionNode"):
        self.reward = reward
        self.penalized = penalized
        self.node = node
        self.visits = 0


class ActionEdge:
    __slots__ = ("action", "visits", "q_value", "outcomes")

    def __init__(self, action):
        self.action = action
        self.visits = 0
        self.q_value = 0.0
        self.outcomes: list[Outcome] = []


class DecisionNode:
    __slots__ = ("state", "belief", "visits", "actions")

    def __init__(self, state, belief):
        self.state = state
        self.belief = belief
        self.visits = 0
        self.actions: list[ActionEdge] = []


class SearchTree:
    """Root node plus the running Q range used for normalization."""

    def __init__(self, root: DecisionNode):
        self.root = root
        self.q_min = math.inf
        self.q_max = -math.inf

    def note_q(self, q: float) -> None:
        if q < self.q_min:
            self.q_min = q
        if q > self.q_max:
            self.q_max = q

    def normalized(self, q: float) -> float:
        if self.q_max - self.q_min < 1e-12:
            return 0.5
        return (q - self.q_min) / (self.q_max - self.q_min)


@dataclass
class SearchResult:
    """Visit-count action distribution and visit-weighted root value."""

    actions: list
    probabilities: np.ndarray
    value: float
    root_visits: np.ndarray
    root_q: np.ndarray
    tree: SearchTree | None = None

    def sample(self, rng: np.random.Generator):
        i = min(
            int(np.searchsorted(np.cumsum(self.probabilities), rng.random())),
            len(self.actions) - 1,
        )
        return self.actions[i]

    def modal_action(self):
        return self.actions[int(np.argmax(self.root_visits))]


def _same_action(a, b) -> bool:
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return np.array_equal(a, b)
    return a == b


def action_pw(
    tree: SearchTree,
    node: DecisionNode,
    cfg: SearchConfig,
    proposal,
    rng: np.random.Generator,
    is_root: bool = False,
) -> ActionEdge:
    """Widen the action set when the visit budget allows, otherwise pick by
    UCT over normalized Q values (unvisited children first)."""
    can_widen = (
        math.floor(node.visits**cfg.action_widening) >= len(node.actions)
        and len(node.actions) < cfg.max_actions
    )
    if can_widen:
        if is_root and rng.random() < cfg.root_noise_frac:
            action = proposal.propose_uniform(node.state, rng)
        else:
            action = proposal.propose(node.state, rng)
        for edge in node.actions:
            if _same_action(edge.action, action):
                return edge
        edge = ActionEdge(action)
        node.actions.append(edge)
        return edge

    best = None
    best_score = -math.inf
    log_n = math.log(max(node.visits, 1))
    for edge in node.actions:
        if edge.visits == 0:
            return edge
        score = tree.normalized(edge.q_value) + cfg.uct_c * math.sqrt(
            log_n / edge.visits
        )
        if score > best_score:
            best = edge
            best_score = score
    return best


def state_pw(
    node: DecisionNode,
    edge: ActionEdge,
    cfg: SearchConfig,
    model,
    rng: np.random.Generator,
) -> Outcome:
    """Sample a fresh outcome (to the widening cap) or revisit the least
    visited existing one (insertion order breaks ties). Usage is counted on
    the outcome itself: leaf children never run a simulation of their own,
    so their decision-node counters cannot drive the rotation."""
    can_widen = (
        math.floor(edge.visits**cfg.outcome_widening) >= len(edge.outcomes)
        and len(edge.outcomes) < cfg.max_outcomes
    )
    if can_widen:
        r, s_next, b_next = model.sample_transition(
            node.belief, node.state, edge.action, rng
        )
        penalized = model.penalized_reward(
            r, node.belief, node.state, edge.action, cfg.penalty_coeff
        )
        outcome = Outcome(r, penalized, DecisionNode(s_next, b_next))
        edge.outcomes.append(outcome)
        outcome.visits = 1
        return outcome
    outcome = min(edge.outcomes, key=lambda o: o.visits)
    outcome.visits += 1
    return outcome


def simulate(
    tree: SearchTree,
    node: DecisionNode,
    depth: int,
    cfg: SearchConfig,
    proposal,
    value,
    model,
    rng: np.random.Generator,
    is_root: bool = False,
) -> float:
    if depth == 0:
        return float(value(node.state))
    edge = action_pw(tree, node, cfg, proposal, rng, is_root=is_root)
    outcome = state_pw(node, edge, cfg, model, rng)
    node.visits += 1
    edge.visits += 1
    if cfg.recursion_condition == "node":
        recurse = node.visits > 1
    elif cfg.recursion_condition == "action":
        recurse = edge.visits > 1
    else:
        recurse = outcome.node.visits > 0
    if recurse:
        ret = simulate(
            tree, outcome.node, depth - 1, cfg, proposal, value, model, rng
        )
    else:
        ret = float(value(outcome.node.state))
    ret = outcome.penalized + cfg.gamma * ret
    edge.q_value += (ret - edge.q_value) / edge.visits
    tree.note_q(edge.q_value)
    return ret


def search(
    root: InfoState,
    cfg: SearchConfig,
    proposal,
    value,
    model,
    rng: np.random.Generator,
) -> SearchResult:
    """Run ``cfg.simulations`` passes from the root information state and
    return the visit-count action distribution plus the visit-weighted root
    value."""
    root_node = DecisionNode(root.state, np.asarray(root.belief, dtype=np.float64))
    tree = SearchTree(root_node)
    for _ in range(cfg.simulations):
        simulate(
            tree,
            root_node,
            cfg.max_depth,
            cfg,
            proposal,
            value,
            model,
            rng,
            is_root=True,
        )

    total = root_node.visits
    actions = [edge.action for edge in root_node.actions]
    visits = np.array([edge.visits for edge in root_node.actions], dtype=np.float64)
    q_values = np.array([edge.q_value for edge in root_node.actions])
    probabilities = visits / total
    v_ret = float(probabilities @ q_values)
    return SearchResult(
        actions=actions,
        probabilities=probabilities,
        value=v_ret,
        root_visits=visits,
        root_q=q_values,
        tree=tree if cfg.keep_tree else None,
    )


# ---------------------------------------------------------------------------
# diagnostics


def iter_nodes(root: DecisionNode, depth: int = 0):
    """Yields (node, depth) over the whole tree, parents first."""
    stack = [(root, depth)]
    while stack:
        node, d = stack.pop()
        yield node, d
        for edge in node.actions:
            for outcome in edge.outcomes:
                stack.append((outcome.node, d + 1))


def dump_tree(tree: SearchTree, path) -> None:
    """Line-oriented text dump: one line per node, one per action edge."""
    with open(path, "w") as fh:
        for node, depth in iter_nodes(tree.root):
            fh.write(
                f"node depth={depth} visits={node.visits} "
                f"children={len(node.actions)}\n"
            )
            for edge in node.actions:
                fh.write(
                    f"  action depth={depth} visits={edge.visits} "
                    f"q={edge.q_value:.6g} outcomes={len(edge.outcomes)}\n"
                )


class FiniteProposal:
    """Uniform proposal over an explicit finite action set; lets the
    continuous planner run on discrete problems for oracle comparisons."""

    def __init__(self, actions):
        self.actions = list(actions)

    def propose(self, state, rng: np.random.Generator):
        return self.actions[int(rng.integers(len(self.actions)))]

    def propose_uniform(self, state, rng: np.random.Generator):
        return self.actions[int(rng.integers(len(self.actions)))]
