import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deepmpc.approximator import SignGradientRegressor
from deepmpc.exceptions import ContractViolation
from deepmpc.observer import (
    ModifiedStateObserver,
    ObserverState,
    error_triple,
    observer_derivative,
    residual_target,
    train_uncertainty_step,
    uncertainty_residual,
)
from deepmpc.plant import DisturbanceScenario, DoubleIntegrator, PlanarArm, Push, ScalarPlant, eval_true_dynamics

from helpers import constant_net, scalar_learning_run


class TestErrorTriple:
    def test_all_zero_when_equal(self):
        tri = error_triple([1.0, 2.0], [1.0, 2.0], [1.0, 2.0])
        for e in (tri.e_r, tri.e_a, tri.e_r_hat):
            np.testing.assert_array_equal(e, 0.0)

    def test_hand_example(self):
        tri = error_triple([1.0, 0.0], [0.5, 0.0], [0.0, 0.0])
        np.testing.assert_array_equal(tri.e_r, [1.0, 0.0])
        np.testing.assert_array_equal(tri.e_a, [0.5, 0.0])
        np.testing.assert_array_equal(tri.e_r_hat, [0.5, 0.0])

    @given(st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=8))
    def test_decomposition(self, triples):
        x, xh, xd = (np.array(v) for v in zip(*triples))
        tri = error_triple(x, xh, xd)
        np.testing.assert_allclose(tri.e_a + tri.e_r_hat, tri.e_r, rtol=0, atol=1e-12 * (1 + np.abs(tri.e_r).max()))

    def test_dimension_mismatch(self):
        with pytest.raises(ContractViolation):
            error_triple([1.0, 2.0], [1.0], [0.0, 0.0])


class TestObserverDerivative:
    def test_exact_estimate_tracks_plant(self, rng):
        arm = PlanarArm([1.0, 1.0], [1.0, 1.0])
        scen = DisturbanceScenario(1, [Push(2, (3.0, -4.0, 0.0), 0.0, 1.0)])
        x = rng.uniform(-1, 1, size=4)
        u = rng.normal(size=2)
        xi = arm.uncertainty(x, 0.5, scen)
        np.testing.assert_allclose(observer_derivative(arm, x, x, u, xi, 7.0 * np.eye(4)),
                                   eval_true_dynamics(arm, x, u, scen, 0.5), atol=1e-12)

    def test_estimation_error_decays_at_gain_rate(self):
        lam = 20.0
        plant = ScalarPlant(a=-0.5, b=1.0, bias=1.5)
        obs = ModifiedStateObserver(plant, lam, approximator=constant_net(1.5), learning=False, x_hat0=[1.0])
        x = np.zeros(1)
        h = 1e-4
        checkpoints = {round(c / lam / h): c / lam for c in (0.5, 1.0, 2.0)}
        for k in range(1, max(checkpoints) + 1):
            x, _, _ = obs.coupled_step(x, np.array([0.3]), None, (k - 1) * h, h)
            if k in checkpoints:
                e_a = abs(x[0] - obs.x_hat[0])
                assert e_a == pytest.approx(np.exp(-lam * checkpoints[k]), rel=1e-2)

    def test_zero_gain_rejected(self):
        with pytest.raises(ContractViolation):
            ObserverState(np.zeros(2), np.zeros((2, 2)))
        with pytest.raises(ContractViolation):
            ModifiedStateObserver(DoubleIntegrator(), 0.0)
        with pytest.raises(ContractViolation):
            ModifiedStateObserver(DoubleIntegrator(), [[1.0, 2.0], [0.0, 1.0]])

    def test_dimension_checks(self):
        with pytest.raises(ContractViolation):
            observer_derivative(DoubleIntegrator(), np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(1), np.eye(2))


class TestTraining:
    def test_zero_error_leaves_weights(self):
        net = SignGradientRegressor(hidden_layer_sizes=(4,), random_state=0).initialize(2, 1)
        w = net.get_flat_weights()
        train_uncertainty_step(net, np.ones(2), np.zeros(2), np.array([[0.0], [1.0]]), np.eye(2))
        np.testing.assert_array_equal(net.get_flat_weights(), w)

    def test_target_is_innovation_through_pseudo_inverse(self):
        B = np.array([[0.0], [1.0]])
        target = residual_target(np.array([0.2]), np.array([0.1, 0.03]), B, 10.0 * np.eye(2))
        np.testing.assert_allclose(target, [0.2 + 0.3])

    def test_step_moves_estimate_toward_target(self):
        net = SignGradientRegressor(hidden_layer_sizes=(8,), step_size=1e-3, random_state=0).initialize(1, 1)
        x = np.array([0.5])
        before = net.forward(x)[0]
        train_uncertainty_step(net, x, np.array([0.5]), np.eye(1), np.eye(1), eta=1e-3)
        assert net.forward(x)[0] > before
        assert net.step_size == 1e-3

    def test_constant_uncertainty_is_learned(self):
        xi_hat, _ = scalar_learning_run(learning=True)
        assert np.abs(xi_hat[-200:] - 2.0).max() < 0.05 * 2.0

    def test_learning_reduces_steady_estimation_error(self):
        _, ea_on = scalar_learning_run(learning=True)
        _, ea_off = scalar_learning_run(learning=False)
        assert ea_off[-200:].mean() > ea_on[-200:].mean()

    def test_without_approximator_estimate_is_zero(self):
        obs = ModifiedStateObserver(DoubleIntegrator(), 5.0)
        np.testing.assert_array_equal(obs.xi_hat(np.ones(2)), [0.0])
        assert not obs.learning

    def test_residual_definition(self):
        m = DoubleIntegrator(bias=1.0)
        np.testing.assert_allclose(uncertainty_residual(m, np.zeros(2), np.array([0.25])), [0.0, 0.75])
