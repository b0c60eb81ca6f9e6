"""Dense dual active-set QP solver (Goldfarb-Idnani).

Solves::

    min  1/2 z' H z + g' z
    s.t. A_eq z  = b_eq
         A_in z <= b_in

for symmetric positive-definite ``H``. The dual method starts from the
unconstrained minimiser and adds violated constraints one at a time, so no
feasible starting point is needed and infeasibility is detected directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .exceptions import ContractViolation, NonConvergence


class QPInfeasible(Exception):
    """No point satisfies the constraints of the QP."""


@dataclass
class QPResult:
    x: np.ndarray
    lam_eq: np.ndarray
    lam_in: np.ndarray
    active: list
    iterations: int


def _empty(n):
    return np.zeros((0, n)), np.zeros(0)


def solve_qp(H, g, A_eq=None, b_eq=None, A_in=None, b_in=None, tol=1e-10, max_iter=None):
    """Return a :class:`QPResult`; raises :class:`QPInfeasible` when no feasible point exists.

    Multipliers follow ``H x + g + A_eq' lam_eq + A_in' lam_in = 0`` with ``lam_in >= 0``.
    """
    H = np.asarray(H, dtype=float)
    g = np.asarray(g, dtype=float)
    n = g.shape[0]
    if H.shape != (n, n):
        raise ContractViolation(f"H must be {n}x{n}")
    A_eq, b_eq = _empty(n) if A_eq is None else (np.atleast_2d(np.asarray(A_eq, float)), np.asarray(b_eq, float))
    A_in, b_in = _empty(n) if A_in is None else (np.atleast_2d(np.asarray(A_in, float)), np.asarray(b_in, float))
    if A_eq.size == 0:
        A_eq, b_eq = _empty(n)
    if A_in.size == 0:
        A_in, b_in = _empty(n)
    m_eq, m_in = A_eq.shape[0], A_in.shape[0]
    try:
        chol = cho_factor(H)
    except np.linalg.LinAlgError as exc:
        raise ContractViolation("H must be positive-definite") from exc
    if max_iter is None:
        max_iter = 20 * (m_eq + m_in) + 100

    # all constraints in ">=" form: normals[:, j]' x >= rhs[j]
    normals = np.vstack([A_eq, -A_in]).T
    rhs = np.concatenate([b_eq, -b_in])
    sign = np.ones(m_eq + m_in)
    is_eq = np.arange(m_eq + m_in) < m_eq

    x = -cho_solve(chol, g)
    active = []            # constraint indices
    u = np.zeros(0)        # their multipliers (">=" convention, >= 0 for inequalities)
    Hinv_N = np.zeros((n, 0))
    iterations = 0

    def directions(p_normal):
        if not active:
            return np.zeros(0), cho_solve(chol, p_normal)
        if len(active) >= n:
            # full active set: any further normal is in its span
            N = normals[:, active] * sign[active]
            return np.linalg.solve(N, p_normal), np.zeros(n)
        N = normals[:, active] * sign[active]
        M = N.T @ Hinv_N
        Hinv_np = cho_solve(chol, p_normal)
        r = np.linalg.solve(M, N.T @ Hinv_np)
        d = Hinv_np - Hinv_N @ r
        return r, d

    def add(p):
        nonlocal Hinv_N
        active.append(p)
        Hinv_N = np.column_stack([Hinv_N, cho_solve(chol, normals[:, p] * sign[p])])

    def drop(k):
        nonlocal Hinv_N, u
        del active[k]
        Hinv_N = np.delete(Hinv_N, k, axis=1)
        u = np.delete(u, k)

    scale = 1.0 + np.abs(rhs)

    def violation(j):
        return (sign[j] * normals[:, j]) @ x - sign[j] * rhs[j]

    pending_eq = list(range(m_eq))
    while True:
        # pick the next constraint to add
        if pending_eq:
            p = pending_eq.pop(0)
            if normals[:, p] @ x - rhs[p] > 0:
                sign[p] = -1.0
            s_p = violation(p)
            if abs(s_p) <= tol * scale[p]:
                s_p = 0.0
        else:
            inactive = np.setdiff1d(np.arange(m_eq, m_eq + m_in), active, assume_unique=False)
            if inactive.size == 0:
                break
            s = (normals[:, inactive].T @ x - rhs[inactive]) / scale[inactive]
            j = int(np.argmin(s))
            if s[j] >= -tol:
                break
            p = int(inactive[j])
            s_p = violation(p)

        u_p = 0.0
        while True:
            iterations += 1
            if iterations > max_iter:
                raise NonConvergence("active-set iteration limit reached", best=x.copy())
            n_p = normals[:, p] * sign[p]
            r, d = directions(n_p)
            # partial step: largest dual step keeping active inequality multipliers >= 0
            t1, k_block = np.inf, -1
            for k, (j, rk) in enumerate(zip(active, r)):
                if not is_eq[j] and rk > tol:
                    ratio = u[k] / rk
                    if ratio < t1:
                        t1, k_block = ratio, k
            dn = d @ n_p
            ref = n_p @ cho_solve(chol, n_p)
            if len(active) >= n or dn <= 1e-10 * max(ref, 1e-300):
                t2 = np.inf
            else:
                t2 = -s_p / dn
            if is_eq[p] and s_p == 0.0 and t2 in (0.0, np.inf):
                if t2 == np.inf:
                    break  # linearly dependent, already satisfied
                add(p)
                u = np.append(u, u_p)
                break
            if not np.isfinite(t1) and not np.isfinite(t2):
                raise QPInfeasible(f"constraint {p} cannot be satisfied together with the active set")
            if not np.isfinite(t2):
                # dual step only, then drop the blocking constraint
                u = u - t1 * r
                u_p += t1
                drop(k_block)
                continue
            t = min(t1, t2)
            x = x + t * d
            u = u - t * r
            u_p += t
            if t2 <= t1:
                add(p)
                u = np.append(u, u_p)
                break
            drop(k_block)
            s_p = violation(p)
            if is_eq[p] and abs(s_p) <= tol * scale[p]:
                add(p)
                u = np.append(u, u_p)
                break

    lam = np.zeros(m_eq + m_in)
    for j, uj in zip(active, u):
        lam[j] = uj * sign[j]
    # ">=" multipliers on -A_in map directly; equality multipliers flip sign
    lam_eq = -lam[:m_eq]
    lam_in = lam[m_eq:]
    return QPResult(x=x, lam_eq=lam_eq, lam_in=lam_in, active=sorted(active), iterations=iterations)
