"""Self-check suite: root-sampling equivalence, Bayes-optimal action
recovery, widening invariants, and gradient checks.

Each check returns (name, status, detail) with status in {"pass", "fail",
"skip"}; the CLI renders them as a machine-readable table.
"""

from __future__ import annotations

import math

import numpy as np

from . import net
from .envs import two_candidate_bandit, two_model_chain
from .oracle import (
    DiscreteBeliefModel,
    bamcp_search,
    bayes_optimal_tree,
    exact_history_posterior,
    root_sampling_histogram,
)
from .search import FiniteProposal, InfoState, SearchConfig, iter_nodes, search

LEMMA1_MIN_SAMPLES = 10_000


def finite_difference_gradients(mlp, batch, loss, step: float = 1e-5):
    """Central finite differences of the batch loss for every parameter
    coordinate; independent of the backprop path."""
    grads = []
    for p in mlp.params():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gf = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = net.batch_loss_value(mlp, batch, loss)
            flat[j] = orig - step
            lo = net.batch_loss_value(mlp, batch, loss)
            flat[j] = orig
            gf[j] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def max_gradient_error(mlp, batch, loss, step: float = 1e-5) -> float:
    analytic = net.batch_gradient(mlp, batch, loss)
    numeric = finite_difference_gradients(mlp, batch, loss, step)
    worst = 0.0
    for a, f in zip(analytic, numeric):
        rel = np.abs(a - f) / np.maximum(1.0, np.abs(f))
        worst = max(worst, float(rel.max()))
    return worst


def _gradient_case(descriptor: str, seed: int):
    rng = np.random.default_rng(seed)
    if descriptor == "gaussian-nll":
        mlp = net.init_mlp([3, 8, 4], seed)
        batch = [(rng.normal(size=3), rng.normal(size=2)) for _ in range(4)]
        return mlp, batch, net.GaussianNll()
    if descriptor == "squared-error":
        mlp = net.init_mlp([3, 8, 2], seed)
        batch = [(rng.normal(size=3), rng.normal(size=2)) for _ in range(4)]
        return mlp, batch, net.SquaredError()
    low, high = -np.ones(2), np.ones(2)
    if descriptor == "cross-entropy-to-weights":
        mlp = net.init_mlp([3, 8, 4], seed)
        batch = []
        for _ in range(3):
            actions = rng.uniform(-0.9, 0.9, size=(3, 2))
            w = rng.uniform(0.1, 1.0, size=3)
            batch.append((rng.normal(size=3), (actions, w / w.sum())))
        return mlp, batch, net.CrossEntropyToWeights(low, high)
    if descriptor == "actor-critic-objective":
        mlp = net.init_mlp([3, 8, 4], seed)
        critic1 = net.init_mlp([5, 8, 1], seed + 1000)
        critic2 = net.init_mlp([5, 8, 1], seed + 2000)
        batch = []
        for _ in range(3):
            s = rng.normal(size=3)
            batch.append((s, (s, rng.normal(size=2))))
        return mlp, batch, net.ActorCriticObjective(critic1, critic2, 0.2, low, high)
    raise ValueError(f"unknown descriptor {descriptor!r}")


LOSS_DESCRIPTORS = (
    "gaussian-nll",
    "squared-error",
    "cross-entropy-to-weights",
    "actor-critic-objective",
)


def check_gradients(seeds: int = 20, tolerance: float = 1e-4):
    worst = 0.0
    worst_case = ""
    for descriptor in LOSS_DESCRIPTORS:
        for seed in range(seeds):
            mlp, batch, loss = _gradient_case(descriptor, seed)
            err = max_gradient_error(mlp, batch, loss)
            if err > worst:
                worst = err
                worst_case = f"{descriptor}/seed{seed}"
    status = "pass" if worst < tolerance else "fail"
    return (
        "gradient_checks",
        status,
        f"max_rel_err={worst:.3g} at {worst_case} tol={tolerance}",
    )


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(p - q).sum())


def check_lemma1(samples: int = 100_000, seeds=(0, 1, 2, 3, 4), max_depth: int = 2):
    """Root-sampling frequencies vs exact posteriors on the shipped chain."""
    if samples < LEMMA1_MIN_SAMPLES:
        return (
            "lemma1_tv",
            "skip",
            f"underpowered: samples={samples} < {LEMMA1_MIN_SAMPLES}",
        )
    m = two_model_chain()
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for actions in ((0,), (1,), (0, 0), (0, 1), (1, 0), (1, 1)):
            if len(actions) > max_depth:
                continue
            hist = root_sampling_histogram(m, actions, samples, rng)
            for history, freq in hist.items():
                exact = exact_history_posterior(m, history)
                worst = max(worst, total_variation(exact, freq))
    status = "pass" if worst <= 0.02 else "fail"
    return ("lemma1_tv", status, f"max_tv={worst:.4f} tol=0.02 samples={samples}")


def myopic_state_value(m):
    """One-step greedy value under the state-implied belief: candidates that
    can be told apart by the current state are told apart, nothing else.
    Carries no lookahead, so at the bandit root it prefers the safe arm;
    only a planner that integrates belief-updated successors recovers the
    information-gathering arm."""
    posteriors = []
    for s in range(m.n_states):
        reachable = m.transitions[:, :, :, s].sum(axis=(1, 2)) > 0
        weights = m.prior * reachable
        if s == m.initial_state or weights.sum() == 0:
            weights = m.prior.copy()
        posteriors.append(weights / weights.sum())

    def value(s):
        b = posteriors[s]
        return float(max(b @ m.rewards[:, s, a] for a in range(m.n_actions)))

    return value


def bandit_search_config(simulations: int = 5000) -> SearchConfig:
    """Configuration under which the continuous planner resolves the
    two-candidate bandit: one Bayes-adaptive step bootstrapped by the
    myopic value, wide outcome sampling for an unbiased mixture estimate."""
    return SearchConfig(
        simulations=simulations,
        max_depth=1,
        gamma=1.0,
        action_widening=0.5,
        outcome_widening=0.8,
        uct_c=2.5,
        root_noise_frac=0.0,
        max_actions=2,
        max_outcomes=2000,
        penalty_coeff=0.0,
    )


def check_bayes_optimal(
    seeds: int = 100, simulations: int = 5000, required: float = 0.95
):
    """Both planners must recover the oracle-optimal bandit arm."""
    m = two_candidate_bandit()
    root = bayes_optimal_tree(m)
    if abs(root.value - 1.3) > 1e-9 or root.optimal_actions != (0,):
        return (
            "bayes_optimal_recovery",
            "fail",
            f"oracle value {root.value} or action set {root.optimal_actions} wrong",
        )
    optimal = set(root.optimal_actions)

    bamcp_hits = 0
    for seed in range(seeds):
        rng = np.random.default_rng(1000 + seed)
        a = bamcp_search(m, m.initial_state, m.prior, simulations, m.horizon, 2.0, rng)
        bamcp_hits += a in optimal

    model = DiscreteBeliefModel(m)
    proposal = FiniteProposal(range(m.n_actions))
    cfg = bandit_search_config(simulations)
    value = myopic_state_value(m)
    search_hits = 0
    for seed in range(seeds):
        rng = np.random.default_rng(2000 + seed)
        result = search(
            InfoState(m.initial_state, m.prior.copy()), cfg, proposal,
            value, model, rng,
        )
        search_hits += result.modal_action() in optimal

    ok = bamcp_hits >= required * seeds and search_hits >= required * seeds
    return (
        "bayes_optimal_recovery",
        "pass" if ok else "fail",
        f"bamcp={bamcp_hits}/{seeds} search={search_hits}/{seeds} "
        f"required>={required * seeds:.0f}",
    )


def widening_violations(tree, cfg: SearchConfig) -> list[str]:
    """All decision/chance widening bounds plus count conservation."""
    problems = []
    for node, depth in iter_nodes(tree.root):
        if node.actions:
            bound = min(
                math.floor(node.visits**cfg.action_widening) + 1, cfg.max_actions
            )
            if len(node.actions) > bound:
                problems.append(
                    f"depth {depth}: {len(node.actions)} actions > bound {bound}"
                )
            child_total = sum(edge.visits for edge in node.actions)
            if node.visits != child_total:
                problems.append(
                    f"depth {depth}: node visits {node.visits} != "
                    f"sum of action visits {child_total}"
                )
        for edge in node.actions:
            bound = min(
                math.floor(edge.visits**cfg.outcome_widening) + 1, cfg.max_outcomes
            )
            if len(edge.outcomes) > bound:
                problems.append(
                    f"depth {depth}: {len(edge.outcomes)} outcomes > bound {bound}"
                )
    return problems


def check_dpw_invariants(total_simulations: int = 10_000, seed: int = 0):
    """Fuzz searches over widening configurations on the shipped chain
    model; every tree must satisfy the widening bounds exactly."""
    m = two_model_chain()
    model = DiscreteBeliefModel(m)
    proposal = FiniteProposal(range(m.n_actions))
    rng = np.random.default_rng(seed)
    spent = 0
    runs = 0
    problems: list[str] = []
    exponents = (0.3, 0.5, 0.8)
    action_caps = (5, 10, 20)
    outcome_caps = (1, 5)
    while spent < total_simulations:
        sims = int(rng.integers(20, 200))
        cfg = SearchConfig(
            simulations=sims,
            max_depth=int(rng.integers(1, 6)),
            gamma=m.gamma,
            action_widening=float(rng.choice(exponents)),
            outcome_widening=float(rng.choice(exponents)),
            uct_c=float(rng.uniform(0.5, 3.0)),
            root_noise_frac=float(rng.choice((0.0, 0.3))),
            max_actions=int(rng.choice(action_caps)),
            max_outcomes=int(rng.choice(outcome_caps)),
            penalty_coeff=float(rng.choice((0.0, 1.0))),
            recursion_condition=str(rng.choice(("node", "action", "child"))),
            keep_tree=True,
        )
        result = search(
            InfoState(m.initial_state, m.prior.copy()), cfg, proposal,
            lambda s: 0.0, model, rng,
        )
        problems.extend(widening_violations(result.tree, cfg))
        spent += sims
        runs += 1
    status = "pass" if not problems else "fail"
    detail = f"simulations={spent} runs={runs} violations={len(problems)}"
    if problems:
        detail += " first=" + problems[0]
    return ("dpw_invariants", status, detail)


def run_all(samples: int = 100_000, seeds: int = 100, simulations: int = 5000):
    return [
        check_lemma1(samples=samples),
        check_bayes_optimal(seeds=seeds, simulations=simulations),
        check_dpw_invariants(),
        check_gradients(),
    ]
