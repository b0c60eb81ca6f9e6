import json
import math

import numpy as np
import pytest
import sympy as sp
from hypothesis import given
from hypothesis import strategies as st

from deepmpc.exceptions import ContractViolation, IntegrationBlowUp
from deepmpc.plant import (
    GRAVITY,
    NO_DISTURBANCE,
    DisturbanceScenario,
    DoubleIntegrator,
    PlanarArm,
    PlantModel,
    Push,
    ScalarPlant,
    canonical_scenario_paths,
    eval_known_dynamics,
    eval_true_dynamics,
    external_wrench,
    integrate_step,
    load_scenario,
    model_from_dict,
    model_to_dict,
    simulate,
)


def lagrangian_two_link():
    """Symbolic forward dynamics of the two-link arm with point masses at the link ends.

    Built from positions and the Lagrangian alone, independent of the
    Jacobian-based implementation under test. Returns a numeric function
    ``(q1, q2, qd1, qd2, tau1, tau2, F1x, F1y, F2x, F2y) -> (qdd1, qdd2)``.
    """
    q1, q2, qd1, qd2 = sp.symbols("q1 q2 qd1 qd2")
    t1, t2, f1x, f1y, f2x, f2y = sp.symbols("t1 t2 f1x f1y f2x f2y")
    qdd1, qdd2 = sp.symbols("qdd1 qdd2")
    g = sp.Float(GRAVITY)
    p1 = sp.Matrix([sp.sin(q1), -sp.cos(q1)])
    p2 = p1 + sp.Matrix([sp.sin(q1 + q2), -sp.cos(q1 + q2)])
    q = sp.Matrix([q1, q2])
    qd = sp.Matrix([qd1, qd2])
    v1 = p1.jacobian(q) * qd
    v2 = p2.jacobian(q) * qd
    T = (v1.dot(v1) + v2.dot(v2)) / 2
    V = g * (p1[1] + p2[1])
    L = T - V
    # generalized forces of the pushes by virtual work
    Qf = p1.jacobian(q).T * sp.Matrix([f1x, f1y]) + p2.jacobian(q).T * sp.Matrix([f2x, f2y])
    eqs = []
    for i, (qi, qdi) in enumerate(zip(q, qd)):
        dL = sp.diff(L, qdi)
        ddt = sum(sp.diff(dL, a) * b for a, b in zip(list(q) + list(qd), list(qd) + [qdd1, qdd2]))
        eqs.append(sp.Eq(ddt - sp.diff(L, qi), [t1, t2][i] + Qf[i]))
    sol = sp.solve(eqs, [qdd1, qdd2], dict=True)[0]
    return sp.lambdify((q1, q2, qd1, qd2, t1, t2, f1x, f1y, f2x, f2y), [sol[qdd1], sol[qdd2]], "numpy")


@pytest.fixture(scope="module")
def oracle():
    return lagrangian_two_link()


@pytest.fixture
def arm2():
    return PlanarArm([1.0, 1.0], [1.0, 1.0])


class TestTrueDynamics:
    def test_double_integrator_companion_form(self):
        m = DoubleIntegrator()
        np.testing.assert_array_equal(eval_true_dynamics(m, [0.3, -1.2], [0.7]), [-1.2, 0.7])

    def test_arm_hanging_equilibrium(self, arm2):
        np.testing.assert_allclose(eval_true_dynamics(arm2, np.zeros(4), np.zeros(2)), 0.0, atol=1e-15)

    def test_arm_horizontal_link_hand_value(self, arm2):
        # M = [[5, 2], [2, 1]], G = g (3, 1)  ->  qdd = -M^-1 G = g (-1, 1)
        xdot = eval_true_dynamics(arm2, [math.pi / 2, 0.0, 0.0, 0.0], np.zeros(2))
        np.testing.assert_allclose(xdot, [0.0, 0.0, -GRAVITY, GRAVITY], atol=1e-12)

    def test_arm_matches_lagrangian_oracle(self, arm2, oracle):
        qdd = oracle(math.pi / 2, 0.0, 0.0, 0.0, 0, 0, 0, 0, 0, 0)
        xdot = eval_true_dynamics(arm2, [math.pi / 2, 0.0, 0.0, 0.0], np.zeros(2))
        np.testing.assert_allclose(xdot[2:], np.array(qdd, dtype=float), rtol=1e-12, atol=1e-12)

    def test_known_dynamics_matches_oracle_at_generic_states(self, arm2, oracle, rng):
        for _ in range(10):
            x = rng.uniform(-2, 2, size=4)
            expected = np.array(oracle(*x, 0, 0, 0, 0, 0, 0), dtype=float)
            np.testing.assert_allclose(eval_known_dynamics(arm2, x)[2:], expected, rtol=1e-10, atol=1e-10)
            np.testing.assert_array_equal(eval_known_dynamics(arm2, x)[:2], x[2:])

    def test_pushes_match_oracle_virtual_work(self, arm2, oracle, rng):
        scen = DisturbanceScenario(1, [Push(1, (3.0, -2.0, 5.0), 0.0, 1.0), Push(2, (-1.0, 4.0, 0.0), 0.0, 1.0)])
        for _ in range(5):
            x = rng.uniform(-2, 2, size=4)
            u = rng.normal(size=2)
            tau = arm2.joint_torque(x, u)
            expected = np.array(oracle(*x, *tau, 3.0, -2.0, -1.0, 4.0), dtype=float)
            np.testing.assert_allclose(eval_true_dynamics(arm2, x, u, scen, 0.5)[2:], expected, rtol=1e-9, atol=1e-9)

    def test_dimension_mismatch(self, arm2):
        with pytest.raises(ContractViolation):
            eval_true_dynamics(arm2, np.zeros(3), np.zeros(2))
        with pytest.raises(ContractViolation):
            eval_true_dynamics(arm2, np.zeros(4), np.zeros(3))
        with pytest.raises(ContractViolation):
            eval_known_dynamics(arm2, np.zeros(5))

    def test_known_dynamics_of_double_integrator(self):
        np.testing.assert_array_equal(eval_known_dynamics(DoubleIntegrator(), [2.0, 0.5]), [0.5, 0.0])


class TestExternalWrench:
    scen = DisturbanceScenario(2, [Push(2, (0.0, -10.0, 0.0), 2.0, 4.0)])

    def test_before_window_is_zero(self):
        np.testing.assert_array_equal(external_wrench(self.scen, 1.0, 2, 3), np.zeros(3))

    def test_inside_window(self):
        np.testing.assert_array_equal(external_wrench(self.scen, 3.0, 2, 3), [0.0, -10.0, 0.0])

    def test_window_is_half_open(self):
        assert external_wrench(self.scen, 2.0, 2).any()
        assert not external_wrench(self.scen, 4.0, 2).any()

    def test_overlapping_pushes_sum(self):
        s = DisturbanceScenario(3, [Push(1, (1, 2, 3), 0, 2), Push(1, (4, -5, 6), 1, 3)])
        np.testing.assert_array_equal(external_wrench(s, 1.5, 1), [5, -3, 9])

    def test_invalid_link(self):
        with pytest.raises(ContractViolation):
            external_wrench(self.scen, 0.0, 4, n_links=3)
        with pytest.raises(ContractViolation):
            external_wrench(self.scen, 0.0, 0)

    def test_sine_profile(self):
        p = Push(1, (2.0, 0.0), 1.0, 3.0, profile="sine", frequency=0.5)
        np.testing.assert_allclose(p.value(1.5), [2.0 * math.sin(math.pi * 0.5), 0, 0])

    def test_push_validation(self):
        with pytest.raises(ContractViolation):
            Push(1, (1, 0, 0), 2.0, 2.0)
        with pytest.raises(ContractViolation):
            Push(1, (1, 0, 0, 0), 0.0, 1.0)


class TestIntegrator:
    def test_equilibrium_is_fixed(self, arm2):
        np.testing.assert_array_equal(integrate_step(arm2, np.zeros(4), np.zeros(2), h=1e-2), np.zeros(4))

    def test_double_integrator_exact(self):
        np.testing.assert_allclose(integrate_step(DoubleIntegrator(), [0.0, 1.0], [0.0], h=0.1), [0.1, 1.0], atol=1e-15)

    def test_nonpositive_step(self):
        with pytest.raises(ContractViolation):
            integrate_step(DoubleIntegrator(), [0.0, 1.0], [0.0], h=0.0)

    def test_blow_up_carries_time_and_state(self):
        class Exploding(ScalarPlant):
            def known_dynamics(self, x):
                return np.array([np.inf])

        with pytest.raises(IntegrationBlowUp) as info:
            integrate_step(Exploding(), [1.0], [0.0], t=0.25, h=0.1)
        assert info.value.t == 0.25
        np.testing.assert_array_equal(info.value.x, [1.0])

    def test_one_step_error_shrinks_sixteenfold(self, arm2):
        x0 = np.array([0.8, -0.5, 0.3, 0.9])
        u = np.zeros(2)

        def one_step_error(h):
            ref = x0.copy()
            for _ in range(10):
                ref = integrate_step(arm2, ref, u, h=h / 10)
            return np.linalg.norm(integrate_step(arm2, x0, u, h=h) - ref)

        ratio = one_step_error(0.02) / one_step_error(0.01)
        # local error is O(h^5), i.e. ~32x; halving must give at least ~16x
        assert ratio > 16

    def test_global_convergence_order(self, arm2):
        x0 = np.array([1.0, -0.7, 0.0, 0.5])
        T = 1.0

        def endpoint(h):
            _, X = simulate(arm2, x0, lambda t, x: np.zeros(2), T, h)
            return X[-1]

        hs = [1e-2, 5e-3, 2.5e-3]
        ref = endpoint(2.5e-4)
        errs = [np.linalg.norm(endpoint(h) - ref) for h in hs]
        orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
        assert min(orders) >= 3.7, orders

    def test_energy_conservation(self, arm2):
        x0 = np.array([1.2, -0.4, 0.0, 0.0])
        T = 2.0
        _, X = simulate(arm2, x0, lambda t, x: np.zeros(2), T, 1e-3)
        E0 = arm2.energy(x0)
        drift = max(abs(arm2.energy(x) - E0) for x in X[::100]) / abs(E0)
        assert drift / T < 1e-6


@given(st.lists(st.floats(-3, 3), min_size=6, max_size=6), st.lists(st.floats(-5, 5), min_size=3, max_size=3),
       st.floats(-20, 20), st.floats(-20, 20))
def test_disturbance_lies_in_range_of_B(xs, us, fx, fy):
    arm = PlanarArm([1.0, 1.0, 1.0], [1.0, 1.0, 1.0])
    scen = DisturbanceScenario(1, [Push(2, (fx, fy, 0.0), 0.0, 1.0), Push(3, (fy, -fx, 1.0), 0.0, 1.0)])
    x, u = np.array(xs), np.array(us)
    r = eval_true_dynamics(arm, x, u, scen, 0.5) - eval_known_dynamics(arm, x) - arm.B @ u
    coef, *_ = np.linalg.lstsq(arm.B, r, rcond=None)
    assert np.linalg.norm(arm.B @ coef - r) < 1e-10


class TestScenarios:
    def test_six_canonical_scenarios(self):
        paths = canonical_scenario_paths()
        assert [p.name for p in paths] == [f"scenario_{i}.json" for i in range(1, 7)]
        for i, p in enumerate(paths, start=1):
            scen, model, raw = load_scenario(p)
            assert scen.scenario_id == i
            assert isinstance(model, PlanarArm) and model.n_links == 3
            for push in scen.pushes:
                assert push.t_start < push.t_end and 1 <= push.link <= 3

    def test_scenario_one_is_undisturbed_and_others_are_not(self):
        paths = canonical_scenario_paths()
        assert load_scenario(paths[0])[0].pushes == ()
        assert all(load_scenario(p)[0].pushes for p in paths[1:])

    def test_roundtrip_and_link_validation(self, tmp_path):
        scen = DisturbanceScenario(4, [Push(3, (1.0, 2.0, 3.0), 0.5, 1.5)], name="x")
        doc = {**scen.to_dict(), "model": model_to_dict(PlanarArm([1, 1, 1], [1, 1, 1]))}
        p = tmp_path / "s.json"
        p.write_text(json.dumps(doc))
        loaded, model, _ = load_scenario(p)
        assert loaded == scen and model.n_links == 3
        doc["model"] = {"type": "planar_arm", "n_links": 2}
        p.write_text(json.dumps(doc))
        with pytest.raises(ContractViolation):
            load_scenario(p)

    def test_model_dict_roundtrip(self):
        for m in (DoubleIntegrator(mass=2.0, bias=0.5), ScalarPlant(a=-2.0, bias=1.0), PlanarArm([1, 2], [0.5, 1])):
            back = model_from_dict(model_to_dict(m))
            assert type(back) is type(m)
            np.testing.assert_array_equal(back.B, m.B)
            np.testing.assert_array_equal(back.bias, m.bias)

    def test_full_column_rank_required(self):
        with pytest.raises(ContractViolation):
            PlantModel([[1.0, 2.0], [2.0, 4.0]])

    def test_plants_are_immutable(self, arm2):
        with pytest.raises(ValueError):
            arm2.B[0, 0] = 1.0

    def test_no_disturbance_constant(self):
        assert NO_DISTURBANCE.pushes == ()
