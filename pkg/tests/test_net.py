"""Network, optimizer, and loss-gradient tests."""

import numpy as np
import pytest

from bamcts import net
from bamcts.errors import ConfigError, NumericError, ShapeError
from bamcts.verify import LOSS_DESCRIPTORS, _gradient_case, max_gradient_error


class TestInitMlp:
    def test_deterministic_given_seed(self):
        a = net.init_mlp([2, 4, 1], seed=7)
        b = net.init_mlp([2, 4, 1], seed=7)
        assert a.equals(b)

    def test_different_seeds_differ(self):
        a = net.init_mlp([2, 4, 1], seed=7)
        b = net.init_mlp([2, 4, 1], seed=8)
        assert not a.equals(b)

    def test_biases_zero(self):
        mlp = net.init_mlp([3, 3], seed=123)
        for b in mlp.biases:
            assert np.all(b == 0.0)

    def test_first_layer_weight_scale(self):
        # wide layer so the empirical std concentrates near 1/sqrt(fan_in)
        mlp = net.init_mlp([2, 200, 1], seed=5)
        target = 1.0 / np.sqrt(2.0)
        std = mlp.weights[0].std()
        assert abs(std - target) / target < 0.2

    def test_rejects_bad_sizes(self):
        with pytest.raises(ConfigError):
            net.init_mlp([4], seed=0)
        with pytest.raises(ConfigError):
            net.init_mlp([4, 0, 2], seed=0)
        with pytest.raises(ConfigError):
            net.init_mlp([], seed=0)


class TestForwardGaussian:
    def test_zero_parameters_give_standard_head(self):
        mlp = net.init_mlp([3, 4], seed=0)
        for w in mlp.weights:
            w[:] = 0.0
        head = net.forward_gaussian(mlp, np.zeros(3))
        assert np.allclose(head.mean, 0.0)
        assert np.allclose(head.log_std, 0.0)
        assert np.allclose(head.std, 1.0)

    def test_log_std_clamped(self):
        mlp = net.init_mlp([1, 2], seed=0)
        mlp.weights[0][:] = 0.0
        mlp.biases[0][:] = [0.0, 50.0]
        head = net.forward_gaussian(mlp, np.zeros(1), log_std_max=2.0)
        assert head.log_std[0] == 2.0
        mlp.biases[0][:] = [0.0, -50.0]
        head = net.forward_gaussian(mlp, np.zeros(1), log_std_min=-5.0)
        assert head.log_std[0] == -5.0

    def test_identity_mean_rows(self):
        mlp = net.init_mlp([2, 4], seed=0)
        mlp.weights[0][:] = 0.0
        mlp.weights[0][0, 0] = 1.0
        mlp.weights[0][1, 1] = 1.0
        mlp.biases[0][:] = 0.0
        head = net.forward_gaussian(mlp, np.array([3.0, -1.0]))
        assert np.allclose(head.mean, [3.0, -1.0])

    def test_std_always_inside_clamp(self):
        rng = np.random.default_rng(0)
        mlp = net.init_mlp([3, 16, 8], seed=1)
        for w in mlp.weights:
            w *= 100.0  # force extreme raw outputs
        for _ in range(50):
            head = net.forward_gaussian(mlp, rng.normal(size=3))
            assert np.all(head.std >= np.exp(-5.0) - 1e-12)
            assert np.all(head.std <= np.exp(2.0) + 1e-12)

    def test_dimension_mismatch(self):
        mlp = net.init_mlp([3, 4], seed=0)
        with pytest.raises(ShapeError):
            net.forward_gaussian(mlp, np.zeros(2))

    def test_non_finite_input(self):
        mlp = net.init_mlp([3, 4], seed=0)
        with pytest.raises(NumericError):
            net.forward_gaussian(mlp, np.array([1.0, np.nan, 0.0]))

    def test_odd_output_rejected(self):
        mlp = net.init_mlp([3, 5], seed=0)
        with pytest.raises(ShapeError):
            net.forward_gaussian(mlp, np.zeros(3))


class TestTrainStep:
    def test_zero_learning_rate_keeps_parameters(self):
        mlp = net.init_mlp([2, 4, 2], seed=3)
        opt = net.init_opt(mlp, learning_rate=0.0)
        batch = [(np.array([1.0, -1.0]), np.array([0.5, 0.5]))]
        new_mlp, _, _ = net.train_step(mlp, opt, batch, net.SquaredError())
        assert new_mlp.equals(mlp)

    def test_stationary_point_keeps_parameters(self):
        # one-parameter linear model already fitting its target exactly
        mlp = net.Mlp((1, 1), [np.array([[2.0]])], [np.array([0.0])])
        opt = net.init_opt(mlp, learning_rate=0.1)
        batch = [(np.array([1.0]), np.array([2.0]))]
        new_mlp, _, loss = net.train_step(mlp, opt, batch, net.SquaredError())
        assert loss == 0.0
        assert new_mlp.equals(mlp)

    def test_returns_pre_step_loss(self):
        mlp = net.Mlp((1, 1), [np.array([[1.0]])], [np.array([0.0])])
        opt = net.init_opt(mlp, learning_rate=0.5)
        batch = [(np.array([1.0]), np.array([3.0]))]
        _, _, loss = net.train_step(mlp, opt, batch, net.SquaredError())
        assert loss == pytest.approx(4.0)

    def test_empty_batch_rejected(self):
        mlp = net.init_mlp([2, 2], seed=0)
        opt = net.init_opt(mlp)
        with pytest.raises(ConfigError):
            net.train_step(mlp, opt, [], net.SquaredError())

    def test_non_finite_loss_rejected(self):
        mlp = net.init_mlp([2, 2], seed=0)
        opt = net.init_opt(mlp)
        batch = [(np.array([1.0, 1.0]), np.array([np.inf, 0.0]))]
        with pytest.raises(NumericError):
            net.train_step(mlp, opt, batch, net.SquaredError())

    def test_training_is_deterministic(self):
        def run():
            mlp = net.init_mlp([2, 8, 2], seed=11)
            opt = net.init_opt(mlp, learning_rate=1e-2)
            rng = np.random.default_rng(4)
            for _ in range(20):
                batch = [
                    (rng.normal(size=2), rng.normal(size=2)) for _ in range(8)
                ]
                mlp, opt, _ = net.train_step(mlp, opt, batch, net.SquaredError())
            return mlp

        a, b = run(), run()
        for pa, pb in zip(a.params(), b.params()):
            assert np.array_equal(pa, pb)

    def test_descent_on_fixed_batch(self):
        mlp = net.init_mlp([2, 16, 1], seed=2)
        opt = net.init_opt(mlp, learning_rate=1e-2)
        rng = np.random.default_rng(0)
        batch = [(rng.normal(size=2), rng.normal(size=1)) for _ in range(16)]
        first = None
        last = None
        for _ in range(200):
            mlp, opt, loss = net.train_step(mlp, opt, batch, net.SquaredError())
            first = loss if first is None else first
            last = loss
        assert last < first * 0.1


class TestGradientChecks:
    @pytest.mark.parametrize("descriptor", LOSS_DESCRIPTORS)
    def test_matches_finite_differences(self, descriptor):
        for seed in range(5):
            mlp, batch, loss = _gradient_case(descriptor, seed)
            assert max_gradient_error(mlp, batch, loss) < 1e-4

    def test_gaussian_nll_two_layer(self):
        mlp, batch, loss = _gradient_case("gaussian-nll", 42)
        assert max_gradient_error(mlp, batch, loss, step=1e-5) < 1e-4


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        mlp = net.init_mlp([3, 8, 4], seed=9)
        path = tmp_path / "model.bamc"
        net.save_mlp(path, mlp, role="policy", log_std_bounds=(-4.0, 1.5))
        loaded, role, bounds = net.load_mlp(path)
        assert role == "policy"
        assert bounds == (-4.0, 1.5)
        assert loaded.equals(mlp)

    def test_identical_bytes_for_identical_model(self, tmp_path):
        mlp = net.init_mlp([3, 8, 4], seed=9)
        p1, p2 = tmp_path / "a.bamc", tmp_path / "b.bamc"
        net.save_mlp(p1, mlp)
        net.save_mlp(p2, mlp)
        assert p1.read_bytes() == p2.read_bytes()

    def test_different_models_different_bytes(self, tmp_path):
        p1, p2 = tmp_path / "a.bamc", tmp_path / "b.bamc"
        net.save_mlp(p1, net.init_mlp([3, 8, 4], seed=9))
        net.save_mlp(p2, net.init_mlp([3, 8, 4], seed=10))
        assert p1.read_bytes() != p2.read_bytes()
