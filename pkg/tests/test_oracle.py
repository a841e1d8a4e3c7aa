"""Discrete BAMDP oracle tests: brute-force Bayes-optimal values,
root-sampling search, and the root-sampling equivalence verifier."""

import numpy as np
import pytest

from bamcts import oracle
from bamcts.envs import two_candidate_bandit, two_model_chain
from bamcts.errors import CapacityError, ConfigError, DataError


def single_mdp_chain():
    """K=1 three-state chain for comparing against plain value iteration."""
    transitions = np.zeros((1, 3, 2, 3))
    transitions[0, 0, 0] = [0.1, 0.9, 0.0]
    transitions[0, 0, 1] = [0.7, 0.2, 0.1]
    transitions[0, 1, 0] = [0.0, 0.3, 0.7]
    transitions[0, 1, 1] = [0.5, 0.5, 0.0]
    transitions[0, 2, 0] = [0.0, 0.0, 1.0]
    transitions[0, 2, 1] = [1.0, 0.0, 0.0]
    rewards = np.array([[[0.0, 0.2], [0.1, 0.6], [1.0, 0.3]]])
    return oracle.DiscreteBAMDP(
        transitions=transitions, rewards=rewards, prior=np.array([1.0]),
        gamma=0.9, horizon=4, initial_state=0,
    )


def finite_horizon_value_iteration(m, horizon):
    """Independent dynamic program on the K=1 case (state-indexed, not
    history-indexed), valid because the belief never moves."""
    p = m.transitions[0]
    r = m.rewards[0]
    v = np.zeros(m.n_states)
    for _ in range(horizon):
        q = r + m.gamma * p @ v
        v = q.max(axis=1)
    return v


class TestDiscreteBAMDP:
    def test_validation_rejects_bad_rows(self):
        bad = np.zeros((1, 1, 1, 1))
        bad[0, 0, 0, 0] = 0.9
        with pytest.raises(ConfigError):
            oracle.DiscreteBAMDP(bad, np.zeros((1, 1, 1)), [1.0], 0.9, 2)

    def test_validation_rejects_out_of_range_rewards(self):
        t = np.ones((1, 1, 1, 1))
        with pytest.raises(ConfigError):
            oracle.DiscreteBAMDP(t, np.full((1, 1, 1), 1.5), [1.0], 0.9, 2)

    def test_json_round_trip(self, tmp_path):
        m = two_model_chain()
        path = tmp_path / "chain.json"
        m.to_json(path)
        loaded = oracle.DiscreteBAMDP.from_json(path)
        assert np.array_equal(loaded.transitions, m.transitions)
        assert np.array_equal(loaded.rewards, m.rewards)
        assert np.array_equal(loaded.prior, m.prior)
        assert loaded.gamma == m.gamma and loaded.horizon == m.horizon

    def test_json_missing_fields(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('{"gamma": 0.9}')
        with pytest.raises(DataError):
            oracle.DiscreteBAMDP.from_json(path)


class TestBayesOptimalTree:
    def test_bandit_value_and_action(self):
        m = two_candidate_bandit()
        root = oracle.bayes_optimal_tree(m)
        assert root.value == pytest.approx(1.3, abs=1e-12)
        assert root.optimal_actions == (0,)
        assert root.q_values[0] == pytest.approx(1.3, abs=1e-12)
        assert root.q_values[1] == pytest.approx(1.2, abs=1e-12)

    def test_reward_only_information(self):
        # single-state bandit: transitions are identical, only the observed
        # reward reveals the candidate; the tree must still reach 1.3
        transitions = np.ones((2, 1, 2, 1))
        rewards = np.zeros((2, 1, 2))
        rewards[0, 0, 0] = 1.0
        rewards[1, 0, 0] = 0.0
        rewards[:, 0, 1] = 0.6
        m = oracle.DiscreteBAMDP(
            transitions, rewards, [0.5, 0.5], gamma=1.0, horizon=2
        )
        root = oracle.bayes_optimal_tree(m)
        assert root.value == pytest.approx(1.3, abs=1e-12)
        assert root.optimal_actions == (0,)

    def test_single_model_matches_value_iteration(self):
        m = single_mdp_chain()
        root = oracle.bayes_optimal_tree(m)
        expected = finite_horizon_value_iteration(m, m.horizon)
        assert root.value == pytest.approx(expected[m.initial_state], abs=1e-10)

    def test_zero_horizon(self):
        m = two_candidate_bandit()
        root = oracle.bayes_optimal_tree(m, horizon=0)
        assert root.value == 0.0
        assert not root.children

    def test_bellman_consistency(self):
        m = two_model_chain()
        root = oracle.bayes_optimal_tree(m, horizon=3)

        def check(node):
            if not node.children:
                return
            assert node.value == pytest.approx(node.q_values.max(), abs=1e-10)
            backup = np.zeros_like(node.q_values)
            for (a, r, s_next), child in node.children.items():
                w = node.belief * np.isclose(
                    m.rewards[:, node.state, a], r, atol=1e-12
                ) * m.transitions[:, node.state, a, s_next]
                backup[a] += w.sum() * (r + m.gamma * child.value)
            assert np.allclose(backup, node.q_values, atol=1e-10)
            for child in node.children.values():
                check(child)

        check(root)

    def test_posteriors_are_normalized_products(self):
        m = two_model_chain()
        root = oracle.bayes_optimal_tree(m, horizon=2)

        def check(node):
            assert node.belief.sum() == pytest.approx(1.0, abs=1e-12)
            for child in node.children.values():
                check(child)

        check(root)

    def test_node_budget(self, monkeypatch):
        monkeypatch.setattr(oracle, "NODE_BUDGET", 10)
        with pytest.raises(CapacityError):
            oracle.bayes_optimal_tree(two_model_chain(), horizon=4)


class TestBamcpSearch:
    def test_bandit_recovers_optimal_action(self):
        m = two_candidate_bandit()
        hits = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            a = oracle.bamcp_search(m, 0, m.prior, 5000, 2, 2.0, rng)
            hits += a == 0
        assert hits >= 95

    def test_single_model_rewarded_action(self):
        # deterministic chain where only action 1 pays
        transitions = np.zeros((1, 2, 2, 2))
        transitions[0, :, :, 1] = 1.0
        rewards = np.zeros((1, 2, 2))
        rewards[0, :, 1] = 1.0
        m = oracle.DiscreteBAMDP(transitions, rewards, [1.0], 0.9, 3)
        for e in (2, 5, 20):
            rng = np.random.default_rng(e)
            assert oracle.bamcp_search(m, 0, m.prior, e, 3, 1.0, rng) == 1

    def test_single_simulation_returns_action(self):
        m = two_candidate_bandit()
        rng = np.random.default_rng(0)
        a = oracle.bamcp_search(m, 0, m.prior, 1, 2, 1.0, rng)
        assert a in (0, 1)

    def test_rejects_zero_simulations(self):
        m = two_candidate_bandit()
        with pytest.raises(ConfigError):
            oracle.bamcp_search(m, 0, m.prior, 0, 2, 1.0, np.random.default_rng(0))


class TestRootSamplingHistogram:
    def test_empty_sequence_matches_prior(self):
        m = two_model_chain()
        rng = np.random.default_rng(0)
        hist = oracle.root_sampling_histogram(m, (), 50_000, rng)
        assert set(hist) == {(0,)}
        assert np.abs(hist[(0,)] - m.prior).max() < 0.01

    def test_single_model_always_one(self):
        m = single_mdp_chain()
        rng = np.random.default_rng(0)
        hist = oracle.root_sampling_histogram(m, (0, 1), 2000, rng)
        for freq in hist.values():
            assert np.allclose(freq, [1.0])

    def test_one_step_posterior_tv(self):
        # action 0 from state 0 has likelihoods 0.2 vs 0.8 for s'=1: the
        # frequency at that history estimates the posterior [0.2, 0.8]
        m = two_model_chain()
        rng = np.random.default_rng(1)
        hist = oracle.root_sampling_histogram(m, (0,), 100_000, rng)
        freq = hist[(0, 0, 1)]
        exact = oracle.exact_history_posterior(m, (0, 0, 1))
        assert np.allclose(exact, [0.2, 0.8], atol=1e-12)
        assert 0.5 * np.abs(freq - exact).sum() <= 0.02

    def test_depth_two_tv_bound_five_seeds(self):
        m = two_model_chain()
        for seed in (0, 1, 2, 3, 4):
            rng = np.random.default_rng(seed)
            hist = oracle.root_sampling_histogram(m, (0, 0), 100_000, rng)
            for history, freq in hist.items():
                exact = oracle.exact_history_posterior(m, history)
                tv = 0.5 * np.abs(freq - exact).sum()
                assert tv <= 0.02, f"history {history}: tv {tv}"


class TestDiscreteBeliefModel:
    def test_transition_consistency(self):
        m = two_model_chain()
        model = oracle.DiscreteBeliefModel(m)
        rng = np.random.default_rng(0)
        b = m.prior.copy()
        r, s_next, b_next = model.sample_transition(b, 0, 0, rng)
        expected = model.update_belief(b, 0, 0, r, s_next)
        assert np.allclose(b_next, expected)

    def test_penalty_zero_when_candidates_agree(self):
        m = single_mdp_chain()
        model = oracle.DiscreteBeliefModel(m)
        r_t = model.penalized_reward(0.5, np.array([1.0]), 0, 0, 1.0)
        # a single candidate still has within-model stochasticity in the
        # one-hot encoding; only the deterministic state 2/action 0 row has
        # exactly zero spread
        r_det = model.penalized_reward(0.5, np.array([1.0]), 2, 0, 1.0)
        assert r_det == pytest.approx(0.5)
        assert r_t <= 0.5
