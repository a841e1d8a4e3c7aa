"""Tree-search tests: progressive widening, UCT selection, backups, and
agreement with the discrete oracle."""

import numpy as np
import pytest

import bamcts.search as sm
from bamcts.envs import two_candidate_bandit, two_model_chain
from bamcts.errors import ConfigError
from bamcts.oracle import DiscreteBeliefModel, bayes_optimal_tree
from bamcts.search import (
    ActionEdge,
    DecisionNode,
    FiniteProposal,
    InfoState,
    Outcome,
    SearchConfig,
    SearchTree,
    action_pw,
    search,
    state_pw,
)
from bamcts.verify import bandit_search_config, myopic_state_value, widening_violations

ZERO_VALUE = lambda s: 0.0


def chain_setup(**overrides):
    m = two_model_chain()
    model = DiscreteBeliefModel(m)
    proposal = FiniteProposal(range(m.n_actions))
    defaults = dict(
        simulations=50, max_depth=3, gamma=m.gamma, uct_c=1.5,
        root_noise_frac=0.0, max_actions=2, max_outcomes=4, penalty_coeff=0.0,
    )
    defaults.update(overrides)
    return m, model, proposal, SearchConfig(**defaults)


class TestSearchConfig:
    def test_rejects_zero_simulations(self):
        with pytest.raises(ConfigError):
            SearchConfig(simulations=0)

    def test_rejects_bad_widening(self):
        with pytest.raises(ConfigError):
            SearchConfig(action_widening=1.0)
        with pytest.raises(ConfigError):
            SearchConfig(outcome_widening=0.0)

    def test_rejects_bad_condition(self):
        with pytest.raises(ConfigError):
            SearchConfig(recursion_condition="whenever")


class TestActionPW:
    def test_first_visit_widens(self):
        _, _, proposal, cfg = chain_setup()
        tree = SearchTree(DecisionNode(0, np.array([0.5, 0.5])))
        rng = np.random.default_rng(0)
        edge = action_pw(tree, tree.root, cfg, proposal, rng)
        assert len(tree.root.actions) == 1
        assert edge.visits == 0 and edge.q_value == 0.0

    def test_widening_arithmetic(self):
        # N=2, |C|=2, alpha=0.5: floor(sqrt(2)) = 1 < 2 -> UCT selection
        _, _, proposal, cfg = chain_setup()
        tree = SearchTree(DecisionNode(0, np.array([0.5, 0.5])))
        node = tree.root
        node.actions = [ActionEdge(0), ActionEdge(1)]
        node.actions[0].visits = 1
        node.actions[1].visits = 1
        node.actions[0].q_value = 1.0
        node.actions[1].q_value = 0.0
        node.visits = 2
        tree.note_q(0.0)
        tree.note_q(1.0)
        rng = np.random.default_rng(0)
        edge = action_pw(tree, node, cfg, proposal, rng)
        assert edge in node.actions  # selection branch, no new action
        assert len(node.actions) == 2

    def test_unvisited_child_selected_first(self):
        _, _, proposal, cfg = chain_setup()
        tree = SearchTree(DecisionNode(0, np.array([0.5, 0.5])))
        node = tree.root
        node.actions = [ActionEdge(0), ActionEdge(1)]
        node.actions[0].visits = 3
        node.actions[0].q_value = 10.0
        node.visits = 3
        tree.note_q(10.0)
        rng = np.random.default_rng(0)
        edge = action_pw(tree, node, cfg, proposal, rng)
        assert edge is node.actions[1]

    def test_normalized_q_in_uct(self):
        # tree Q range [0, 2]: a child at Q=1 scores 0.5 + bonus
        tree = SearchTree(DecisionNode(0, np.array([1.0])))
        tree.note_q(0.0)
        tree.note_q(2.0)
        assert tree.normalized(1.0) == pytest.approx(0.5)
        assert tree.normalized(0.0) == 0.0
        assert tree.normalized(2.0) == 1.0

    def test_degenerate_range_normalizes_to_half(self):
        tree = SearchTree(DecisionNode(0, np.array([1.0])))
        tree.note_q(3.0)
        assert tree.normalized(3.0) == 0.5

    def test_cap_forces_selection(self):
        _, _, proposal, cfg = chain_setup(max_actions=1)
        tree = SearchTree(DecisionNode(0, np.array([0.5, 0.5])))
        node = tree.root
        node.actions = [ActionEdge(0)]
        node.actions[0].visits = 1
        node.visits = 1
        rng = np.random.default_rng(0)
        for _ in range(5):
            edge = action_pw(tree, node, cfg, proposal, rng)
            assert edge is node.actions[0]
        assert len(node.actions) == 1


class TestStatePW:
    def test_cap_one_returns_cached_outcome(self):
        _, model, _, cfg = chain_setup(max_outcomes=1)
        node = DecisionNode(0, np.array([0.5, 0.5]))
        edge = ActionEdge(0)
        rng = np.random.default_rng(0)
        first = state_pw(node, edge, cfg, model, rng)
        edge.visits = 10
        for _ in range(5):
            assert state_pw(node, edge, cfg, model, rng) is first

    def test_least_visited_with_index_tiebreak(self):
        _, model, _, cfg = chain_setup()
        node = DecisionNode(0, np.array([0.5, 0.5]))
        edge = ActionEdge(0)
        edge.visits = 100  # floor(100^0.5) = 10, but cap outcomes below
        outcomes = []
        for visits in (5, 2, 2):
            outcome = Outcome(0.0, 0.0, DecisionNode(1, np.array([0.5, 0.5])))
            outcome.visits = visits
            outcomes.append(outcome)
        edge.outcomes = outcomes
        cfg2 = SearchConfig(
            simulations=1, max_depth=1, max_outcomes=3,
            outcome_widening=cfg.outcome_widening, action_widening=cfg.action_widening,
        )
        picked = state_pw(node, edge, cfg2, model, np.random.default_rng(0))
        assert picked is outcomes[1]
        assert picked.visits == 3

    def test_widened_belief_matches_update(self):
        _, model, _, cfg = chain_setup()
        node = DecisionNode(0, np.array([0.5, 0.5]))
        edge = ActionEdge(0)
        outcome = state_pw(node, edge, cfg, model, np.random.default_rng(3))
        expected = model.update_belief(
            node.belief, node.state, edge.action,
            outcome.reward, outcome.node.state,
        )
        assert np.allclose(outcome.node.belief, expected)


class TestSimulateAndSearch:
    def test_depth_zero_returns_value(self):
        _, model, proposal, cfg = chain_setup()
        tree = SearchTree(DecisionNode(0, np.array([0.5, 0.5])))
        out = sm.simulate(
            tree, tree.root, 0, cfg, proposal, lambda s: 3.7, model,
            np.random.default_rng(0),
        )
        assert out == 3.7

    def test_single_backup_arithmetic(self):
        # gamma=0.5, penalized reward 1, child bootstraps at V=4 -> Q=3
        _, model, proposal, _ = chain_setup()
        cfg = SearchConfig(
            simulations=1, max_depth=2, gamma=0.5, penalty_coeff=0.0,
            max_actions=1, max_outcomes=1, root_noise_frac=0.0,
        )

        class UnitRewardModel:
            K = 2

            def sample_transition(self, b, s, a, rng):
                return 1.0, s, b

            def penalized_reward(self, r, b, s, a, lam):
                return r

        tree = SearchTree(DecisionNode(0, np.array([0.5, 0.5])))
        sm.simulate(
            tree, tree.root, 2, cfg, proposal, lambda s: 4.0,
            UnitRewardModel(), np.random.default_rng(0), is_root=True,
        )
        assert tree.root.actions[0].q_value == pytest.approx(1.0 + 0.5 * 4.0)

    def test_incremental_mean(self):
        edge = ActionEdge(0)
        for ret in (2.0, 4.0):
            edge.visits += 1
            edge.q_value += (ret - edge.q_value) / edge.visits
        assert edge.q_value == pytest.approx(3.0)

    def test_result_distribution_formulas(self):
        # hand-built root: counts 30/20, Q 1.0/2.0 -> pi=[0.6,0.4], v=1.4
        visits = np.array([30.0, 20.0])
        q = np.array([1.0, 2.0])
        probs = visits / visits.sum()
        v_ret = float(probs @ q)
        assert np.allclose(probs, [0.6, 0.4])
        assert v_ret == pytest.approx(1.4)

    def test_search_returns_normalized_distribution(self):
        m, model, proposal, cfg = chain_setup(simulations=50)
        rng = np.random.default_rng(0)
        result = search(InfoState(0, m.prior.copy()), cfg, proposal, ZERO_VALUE, model, rng)
        assert result.probabilities.sum() == pytest.approx(1.0, abs=1e-9)
        assert len(result.actions) == len(result.probabilities)
        assert result.value == pytest.approx(
            float(result.probabilities @ result.root_q)
        )

    def test_single_action_cap(self):
        m, model, proposal, cfg = chain_setup(max_actions=1)
        rng = np.random.default_rng(0)
        result = search(InfoState(0, m.prior.copy()), cfg, proposal, ZERO_VALUE, model, rng)
        assert len(result.actions) == 1
        assert np.allclose(result.probabilities, [1.0])

    def test_deterministic_given_rng(self):
        m, model, proposal, cfg = chain_setup(simulations=80)

        def run():
            rng = np.random.default_rng(42)
            r = search(InfoState(0, m.prior.copy()), cfg, proposal, ZERO_VALUE, model, rng)
            return r.probabilities, r.value, r.root_q

        p1, v1, q1 = run()
        p2, v2, q2 = run()
        assert np.array_equal(p1, p2)
        assert v1 == v2
        assert np.array_equal(q1, q2)

    def test_count_conservation_and_bounds(self):
        m, model, proposal, cfg = chain_setup(
            simulations=200, keep_tree=True, root_noise_frac=0.3
        )
        rng = np.random.default_rng(5)
        result = search(InfoState(0, m.prior.copy()), cfg, proposal, ZERO_VALUE, model, rng)
        assert result.tree.root.visits == cfg.simulations
        assert widening_violations(result.tree, cfg) == []

    @pytest.mark.parametrize("condition", ["node", "action", "child"])
    def test_recursion_conditions_run_clean(self, condition):
        m, model, proposal, cfg = chain_setup(
            simulations=60, recursion_condition=condition, keep_tree=True
        )
        rng = np.random.default_rng(2)
        result = search(InfoState(0, m.prior.copy()), cfg, proposal, ZERO_VALUE, model, rng)
        assert widening_violations(result.tree, cfg) == []

    def test_pessimism_propagation(self):
        m, model, proposal, _ = chain_setup()
        for lam, expect_drop in ((0.0, False), (1.0, True)):
            cfg = SearchConfig(
                simulations=100, max_depth=3, gamma=m.gamma,
                penalty_coeff=lam, keep_tree=True, root_noise_frac=0.0,
                max_actions=2, max_outcomes=4,
            )
            rng = np.random.default_rng(9)
            result = search(InfoState(0, m.prior.copy()), cfg, proposal, ZERO_VALUE, model, rng)
            for node, _ in sm.iter_nodes(result.tree.root):
                for edge in node.actions:
                    for outcome in edge.outcomes:
                        if expect_drop:
                            assert outcome.penalized < outcome.reward
                        else:
                            assert outcome.penalized == outcome.reward

    def test_uct_invariant_to_q_shift(self):
        # adding a constant to every Q leaves normalized scores unchanged
        tree = SearchTree(DecisionNode(0, np.array([1.0])))
        qs = np.array([0.2, 1.0, 3.0])
        for q in qs:
            tree.note_q(q)
        base = [tree.normalized(q) for q in qs]
        shifted_tree = SearchTree(DecisionNode(0, np.array([1.0])))
        for q in qs + 100.0:
            shifted_tree.note_q(q)
        shifted = [shifted_tree.normalized(q + 100.0) for q in qs]
        assert np.allclose(base, shifted)


class TestOracleAgreement:
    def test_bandit_modal_action(self):
        # the bootstrap value is myopic (it prefers the safe arm at the
        # root); only the belief-updated lookahead recovers the optimum
        m = two_candidate_bandit()
        oracle_root = bayes_optimal_tree(m)
        optimal = set(oracle_root.optimal_actions)
        model = DiscreteBeliefModel(m)
        proposal = FiniteProposal(range(m.n_actions))
        cfg = bandit_search_config(simulations=2000)
        value = myopic_state_value(m)
        assert value(m.initial_state) == pytest.approx(0.6)  # myopia picks B
        hits = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            result = search(
                InfoState(m.initial_state, m.prior.copy()), cfg, proposal,
                value, model, rng,
            )
            hits += result.modal_action() in optimal
        assert hits >= 95


class TestTreeDump:
    def test_dump_writes_every_node(self, tmp_path):
        m, model, proposal, cfg = chain_setup(simulations=30, keep_tree=True)
        rng = np.random.default_rng(0)
        result = search(InfoState(0, m.prior.copy()), cfg, proposal, ZERO_VALUE, model, rng)
        path = tmp_path / "tree.txt"
        sm.dump_tree(result.tree, path)
        lines = path.read_text().splitlines()
        node_lines = [l for l in lines if l.startswith("node ")]
        n_nodes = sum(1 for _ in sm.iter_nodes(result.tree.root))
        assert len(node_lines) == n_nodes
        assert node_lines[0].startswith("node depth=0 visits=30")
