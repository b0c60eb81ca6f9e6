import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepmpc.exceptions import ContractViolation
from deepmpc.qp import QPInfeasible, solve_qp

cp = pytest.importorskip("cvxpy")


def random_qp(seed, n=6, m_eq=2, m_in=8):
    rng = np.random.default_rng(seed)
    L = rng.normal(size=(n, n))
    H = L @ L.T + 0.5 * np.eye(n)
    g = rng.normal(size=n)
    x_feas = rng.normal(size=n)
    A_eq = rng.normal(size=(m_eq, n))
    b_eq = A_eq @ x_feas
    A_in = rng.normal(size=(m_in, n))
    b_in = A_in @ x_feas + rng.uniform(0, 1, size=m_in)
    return H, g, A_eq, b_eq, A_in, b_in


def reference_solution(H, g, A_eq, b_eq, A_in, b_in):
    z = cp.Variable(g.size)
    cons = [A_eq @ z == b_eq, A_in @ z <= b_in] if A_eq.size else [A_in @ z <= b_in]
    prob = cp.Problem(cp.Minimize(0.5 * cp.quad_form(z, cp.psd_wrap(H)) + g @ z), cons)
    prob.solve(solver=cp.CLARABEL)
    return z.value, prob.value


@settings(max_examples=40)
@given(st.integers(0, 100_000), st.integers(0, 3), st.integers(1, 12))
def test_matches_reference_solver(seed, m_eq, m_in):
    H, g, A_eq, b_eq, A_in, b_in = random_qp(seed, m_eq=m_eq, m_in=m_in)
    res = solve_qp(H, g, A_eq, b_eq, A_in, b_in)
    z_ref, f_ref = reference_solution(H, g, A_eq, b_eq, A_in, b_in)
    f = 0.5 * res.x @ H @ res.x + g @ res.x
    assert f == pytest.approx(f_ref, rel=1e-6, abs=1e-6)
    np.testing.assert_allclose(res.x, z_ref, atol=1e-5)


@settings(max_examples=40)
@given(st.integers(0, 100_000))
def test_kkt_conditions(seed):
    H, g, A_eq, b_eq, A_in, b_in = random_qp(seed)
    res = solve_qp(H, g, A_eq, b_eq, A_in, b_in)
    stat = H @ res.x + g + A_eq.T @ res.lam_eq + A_in.T @ res.lam_in
    assert np.abs(stat).max() < 1e-8
    assert np.abs(A_eq @ res.x - b_eq).max() < 1e-8
    assert (A_in @ res.x - b_in).max() < 1e-8
    assert res.lam_in.min() >= -1e-10
    assert np.abs(res.lam_in * (A_in @ res.x - b_in)).max() < 1e-8


def test_unconstrained_minimiser():
    H = np.diag([2.0, 4.0])
    res = solve_qp(H, [2.0, -4.0])
    np.testing.assert_allclose(res.x, [-1.0, 1.0])
    assert res.active == []


def test_single_active_bound():
    # min (x-2)^2 s.t. x <= 1
    res = solve_qp([[2.0]], [-4.0], A_in=[[1.0]], b_in=[1.0])
    assert res.x == pytest.approx([1.0])
    assert res.lam_in == pytest.approx([2.0])


def test_redundant_equalities():
    A = np.array([[1.0, 1.0], [2.0, 2.0]])
    res = solve_qp(np.eye(2), np.zeros(2), A, [1.0, 2.0])
    np.testing.assert_allclose(res.x, [0.5, 0.5])


def test_infeasible_bounds_detected():
    with pytest.raises(QPInfeasible):
        solve_qp(np.eye(1), [0.0], A_in=[[1.0], [-1.0]], b_in=[-1.0, -1.0])


def test_infeasible_equality_and_inequality():
    with pytest.raises(QPInfeasible):
        solve_qp(np.eye(2), np.zeros(2), [[1.0, 0.0]], [2.0], [[1.0, 0.0]], [1.0])


def test_indefinite_hessian_rejected():
    with pytest.raises(ContractViolation):
        solve_qp(np.diag([1.0, -1.0]), np.zeros(2))
    with pytest.raises(ContractViolation):
        solve_qp(np.eye(3), np.zeros(2))
