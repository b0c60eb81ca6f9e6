"""Robust setpoint-tracking MPC with constraint tightening.

Predictions run on a nominal discrete-time model. Constraints along the
horizon are shrunk by the accumulated disturbance tube
``c_eta (1 - rho^k) / (1 - rho) w_bar``, the optimiser picks an artificial
equilibrium ``(x_zeta, v_zeta)`` together with the input sequence, and the
terminal state must lie in a sublevel set of the incremental Lyapunov
function ``V_delta(x, z) = (x - z)' P (x - z)`` around that equilibrium.

The nonlinear program is solved by sequential quadratic programming in
condensed (single-shooting) form with the dense active-set QP of
:mod:`deepmpc.qp`.

``w_bar`` is measured in the metric ``sqrt(V_delta)``;
:func:`metric_disturbance_bound` converts a componentwise bound.
"""

from __future__ import annotations

import csv
import itertools
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_discrete_are, solve_discrete_lyapunov

from ._linalg import as_spd, diag_or_matrix
from .exceptions import ConfigurationError, ContractViolation, InfeasibleProblem, NonConvergence
from .qp import QPInfeasible, solve_qp

# ---------------------------------------------------------------------------
# Nominal model
# ---------------------------------------------------------------------------


def rk4_matrices(A, B, h):
    """Exact one-step matrices of classical RK4 applied to ``x_dot = A x + B v`` (``v`` held)."""
    n = A.shape[0]
    hA = h * A
    I = np.eye(n)
    hA2 = hA @ hA
    hA3 = hA2 @ hA
    Ad = I + hA + hA2 / 2.0 + hA3 / 6.0 + hA3 @ hA / 24.0
    Bd = h * (I + hA / 2.0 + hA2 / 6.0 + hA3 / 24.0) @ B
    return Ad, Bd


class NominalModel:
    """Discrete nominal prediction model ``x+ = F(x, v)`` with output ``y = C x + D v``.

    Built from continuous dynamics by one RK4 step of length ``dt`` with the
    input held. ``jacobian(x, v)`` must return ``(df/dx, df/dv)`` of the
    continuous dynamics.
    """

    def __init__(self, dynamics, jacobian, n_x, n_u, dt, C=None, D=None):
        self.dynamics = dynamics
        self.jacobian = jacobian
        self.n_x, self.n_u = int(n_x), int(n_u)
        if not dt > 0:
            raise ConfigurationError("prediction step must be positive")
        self.dt = float(dt)
        self.C = np.eye(self.n_x) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
        self.D = np.zeros((self.C.shape[0], self.n_u)) if D is None else np.atleast_2d(np.asarray(D, dtype=float))
        if self.C.shape[1] != self.n_x or self.D.shape != (self.C.shape[0], self.n_u):
            raise ContractViolation("output map has inconsistent shape")

    @property
    def n_y(self):
        return self.C.shape[0]

    def output(self, x, v):
        return self.C @ x + self.D @ v

    def step(self, x, v):
        h, f = self.dt, self.dynamics
        k1 = f(x, v)
        k2 = f(x + 0.5 * h * k1, v)
        k3 = f(x + 0.5 * h * k2, v)
        k4 = f(x + h * k3, v)
        return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def step_jacobians(self, x, v):
        """``(dF/dx, dF/dv)`` propagated through the RK4 stages."""
        h, f, jac = self.dt, self.dynamics, self.jacobian
        n = self.n_x
        I = np.eye(n)
        x1 = x
        k1 = f(x1, v)
        A1, B1 = jac(x1, v)
        dk1x, dk1v = A1, B1
        x2 = x + 0.5 * h * k1
        k2 = f(x2, v)
        A2, B2 = jac(x2, v)
        dk2x = A2 @ (I + 0.5 * h * dk1x)
        dk2v = A2 @ (0.5 * h * dk1v) + B2
        x3 = x + 0.5 * h * k2
        k3 = f(x3, v)
        A3, B3 = jac(x3, v)
        dk3x = A3 @ (I + 0.5 * h * dk2x)
        dk3v = A3 @ (0.5 * h * dk2v) + B3
        x4 = x + h * k3
        A4, B4 = jac(x4, v)
        dk4x = A4 @ (I + h * dk3x)
        dk4v = A4 @ (h * dk3v) + B4
        Ad = I + (h / 6.0) * (dk1x + 2 * dk2x + 2 * dk3x + dk4x)
        Bd = (h / 6.0) * (dk1v + 2 * dk2v + 2 * dk3v + dk4v)
        return Ad, Bd

    def linearization(self, x=None, v=None):
        x = np.zeros(self.n_x) if x is None else x
        v = np.zeros(self.n_u) if v is None else v
        return self.step_jacobians(x, v)


class LinearNominalModel(NominalModel):
    """``x_dot = A x + B v`` discretised exactly as one RK4 step."""

    def __init__(self, A, B, dt, C=None, D=None):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        super().__init__(lambda x, v: A @ x + B @ v, lambda x, v: (A, B), A.shape[0], B.shape[1], dt, C, D)
        self.A_c, self.B_c = A, B
        self.A_d, self.B_d = rk4_matrices(A, B, self.dt)

    def step(self, x, v):
        return self.A_d @ x + self.B_d @ v

    def step_jacobians(self, x, v):
        return self.A_d, self.B_d

    @classmethod
    def integrator(cls, dt=1.0):
        """Scalar ``x+ = x + dt v`` with output ``y = x``."""
        return cls([[0.0]], [[1.0]], dt)

    @classmethod
    def from_reference(cls, reference, dt, n_outputs=None):
        """Prediction model of a :class:`~deepmpc.inversion.ReferenceModel`; outputs are the first ``n_outputs`` states."""
        n_x = reference.n_x
        n_y = n_x if n_outputs is None else int(n_outputs)
        C = np.eye(n_x)[:n_y]
        return cls(reference.A_m, reference.B_m, dt, C=C)


# ---------------------------------------------------------------------------
# Constraints and configuration
# ---------------------------------------------------------------------------


@dataclass
class LinearConstraints:
    """Rows ``G_x x + G_v v <= h`` (one row per constraint index ``eta``)."""

    G_x: np.ndarray
    G_v: np.ndarray
    h: np.ndarray
    labels: list = field(default_factory=list)

    def __post_init__(self):
        self.G_x = np.atleast_2d(np.asarray(self.G_x, dtype=float))
        self.G_v = np.atleast_2d(np.asarray(self.G_v, dtype=float))
        self.h = np.asarray(self.h, dtype=float).reshape(-1)
        if not (self.G_x.shape[0] == self.G_v.shape[0] == self.h.shape[0]):
            raise ContractViolation("constraint blocks must have the same number of rows")
        if not self.labels:
            self.labels = ["state" if not self.G_v[i].any() else "input" for i in range(len(self.h))]

    def __len__(self):
        return self.h.shape[0]

    def values(self, x, v):
        return self.G_x @ x + self.G_v @ v - self.h

    @property
    def state_only(self):
        return ~self.G_v.any(axis=1)

    @classmethod
    def empty(cls, n_x, n_u):
        return cls(np.zeros((0, n_x)), np.zeros((0, n_u)), np.zeros(0), [])

    @classmethod
    def box(cls, n_x, n_u, on, lo, hi):
        n = n_x if on == "state" else n_u
        if on not in ("state", "input"):
            raise ConfigurationError(f"box constraint must be on 'state' or 'input', got {on!r}")
        lo = np.broadcast_to(np.asarray(lo, dtype=float), (n,))
        hi = np.broadcast_to(np.asarray(hi, dtype=float), (n,))
        if np.any(lo > hi):
            raise ConfigurationError("box constraint has lo > hi")
        rows_x, rows_v, h, labels = [], [], [], []
        I = np.eye(n)
        for i in range(n):
            for sgn, bound in ((1.0, hi[i]), (-1.0, -lo[i])):
                if not np.isfinite(bound):
                    continue
                gx = sgn * I[i] if on == "state" else np.zeros(n_x)
                gv = sgn * I[i] if on == "input" else np.zeros(n_u)
                rows_x.append(gx)
                rows_v.append(gv)
                h.append(bound)
                labels.append(on)
        if not h:
            return cls.empty(n_x, n_u)
        return cls(np.array(rows_x), np.array(rows_v), np.array(h), labels)

    def __add__(self, other):
        return LinearConstraints(
            np.vstack([self.G_x, other.G_x]), np.vstack([self.G_v, other.G_v]),
            np.concatenate([self.h, other.h]), self.labels + other.labels,
        )


@dataclass
class MpcConfig:
    """Robust MPC parameters.

    ``c`` holds one tightening constant per constraint row; ``None`` means
    "compute from the terminal metric" (see :func:`lipschitz_constants`).
    """

    N: int
    Q: np.ndarray
    R: np.ndarray
    T: np.ndarray
    alpha: float
    constraints: LinearConstraints
    rho_d: float = 0.8
    wbar_d: float = 0.0
    c: np.ndarray = None
    max_iter: int = 50
    tol: float = 1e-9
    regularization: float = 1e-9

    def __post_init__(self):
        if int(self.N) < 1:
            raise ConfigurationError("horizon N must be a positive integer")
        self.N = int(self.N)
        if not 0.0 <= self.rho_d < 1.0:
            raise ConfigurationError(f"rho_d must lie in [0, 1), got {self.rho_d}")
        if self.wbar_d < 0:
            raise ConfigurationError("wbar_d must be nonnegative")
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be positive")
        self.Q = as_spd(self.Q, "Q")
        self.R = as_spd(self.R, "R")
        self.T = as_spd(self.T, "T")
        if self.c is not None:
            self.c = np.asarray(self.c, dtype=float).reshape(-1)
            if self.c.shape != (len(self.constraints),) or np.any(self.c < 0):
                raise ConfigurationError("need one nonnegative tightening constant per constraint")
        if self.alpha <= tube_radius(self.N, self):
            warnings.warn("alpha does not exceed the accumulated tube radius; the terminal set is empty",
                          RuntimeWarning, stacklevel=2)

    @classmethod
    def from_dict(cls, d, n_x, n_u, n_y):
        constraints = LinearConstraints.empty(n_x, n_u)
        for item in d.get("constraints", []):
            if item.get("type", "box") != "box":
                raise ConfigurationError(f"unsupported constraint type {item.get('type')!r}")
            constraints = constraints + LinearConstraints.box(n_x, n_u, item["on"], item["lo"], item["hi"])
        return cls(
            N=int(d.get("N", 10)),
            Q=diag_or_matrix(d.get("Q_diag", 1.0), n_x, "Q"),
            R=diag_or_matrix(d.get("R_diag", 1.0), n_u, "R"),
            T=diag_or_matrix(d.get("T_diag", 100.0), n_y, "T"),
            alpha=float(d.get("alpha", 10.0)),
            constraints=constraints,
            rho_d=float(d.get("rho_d", 0.8)),
            wbar_d=float(d.get("wbar_d", 0.0)),
            c=d.get("c"),
        )


def _check_rho(cfg):
    if not cfg.rho_d < 1.0:
        raise ConfigurationError(f"rho_d must be < 1, got {cfg.rho_d}")


def tube_radius(k, cfg):
    """Accumulated disturbance ``(1 - rho^k) / (1 - rho) * w_bar`` after ``k`` steps."""
    _check_rho(cfg)
    rho = cfg.rho_d
    if k < 0:
        raise ContractViolation("step index must be nonnegative")
    return (1.0 - rho**k) / (1.0 - rho) * cfg.wbar_d


def tightening_margin(k, eta, cfg):
    """``c_eta (1 - rho^k) / (1 - rho) w_bar`` for constraint row ``eta`` at prediction step ``k``."""
    _check_rho(cfg)
    if cfg.c is None:
        raise ConfigurationError("tightening constants not set; call resolve_tightening first")
    if not 0 <= eta < len(cfg.c):
        raise ContractViolation(f"invalid constraint index {eta}")
    return cfg.c[eta] * tube_radius(k, cfg)


def incremental_lyapunov(x, z, P):
    x, z = np.asarray(x, dtype=float), np.asarray(z, dtype=float)
    P = np.atleast_2d(P)
    if x.shape != z.shape or x.shape != (P.shape[0],):
        raise ContractViolation("x, z and P have inconsistent dimensions")
    d = x - z
    return float(d @ P @ d)


@dataclass(frozen=True)
class ArtificialEquilibrium:
    x_zeta: np.ndarray
    v_zeta: np.ndarray
    y_zeta: np.ndarray


@dataclass(frozen=True)
class TerminalSetParams:
    P: np.ndarray
    alpha: float


def terminal_set_contains(x, eq, P, alpha, N, cfg):
    """``sqrt(V_delta(x, x_zeta)) + tube_radius(N) <= alpha``."""
    x_zeta = eq.x_zeta if isinstance(eq, ArtificialEquilibrium) else np.asarray(eq, dtype=float)
    return bool(np.sqrt(incremental_lyapunov(x, x_zeta, P)) + tube_radius(N, cfg) <= alpha)


@dataclass(frozen=True)
class PredictedTrajectory:
    inputs: np.ndarray  # (N, n_u)
    states: np.ndarray  # (N + 1, n_x), states[0] = x_k


def lqr_terminal(model, Q, R, x=None, v=None):
    """LQR gain of the nominal linearisation and the Lyapunov matrix of its closed loop.

    Returns ``(P, K)`` with ``u = -K x`` and ``A_cl' P A_cl - P = -(Q + K' R K)``.
    """
    A, B = model.linearization(x, v)
    S = solve_discrete_are(A, B, Q, R)
    K = np.linalg.solve(R + B.T @ S @ B, B.T @ S @ A)
    A_cl = A - B @ K
    P = solve_discrete_lyapunov(A_cl.T, Q + K.T @ R @ K)
    P = 0.5 * (P + P.T)
    return P, K


def contraction_rate(P, A_cl):
    """Smallest ``rho`` with ``V_delta(A_cl d) <= rho^2 V_delta(d)`` for all ``d``."""
    L = np.linalg.cholesky(P)
    Li = np.linalg.inv(L)
    M = L.T @ A_cl @ Li.T
    return float(np.linalg.norm(M, 2))


def lipschitz_constants(constraints, P, K=None, samples=0, rng=None):
    """Lipschitz bound of each constraint row w.r.t. the metric ``sqrt(V_delta)``.

    Input rows are evaluated along the local feedback ``v = -K x``. For affine
    rows the supremum is ``|| P^{-1/2} (G_x - G_v K)' ||``; with ``samples > 0``
    the same quantity is instead estimated from random directions (a lower
    bound converging to the closed form).
    """
    n = P.shape[0]
    G = constraints.G_x.copy()
    if K is not None:
        G = G - constraints.G_v @ K
    if samples <= 0:
        Pinv = np.linalg.inv(P)
        return np.sqrt(np.einsum("ij,jk,ik->i", G, Pinv, G))
    rng = np.random.default_rng(rng)
    d = rng.normal(size=(samples, n))
    norms = np.sqrt(np.einsum("si,ij,sj->s", d, P, d))
    return np.max(np.abs(d @ G.T) / norms[:, None], axis=0)


def metric_disturbance_bound(P, w_max):
    """``max sqrt(w' P w)`` over the box ``|w_i| <= w_max_i`` (attained at a vertex)."""
    w_max = np.broadcast_to(np.asarray(w_max, dtype=float), (P.shape[0],))
    best = 0.0
    for signs in itertools.product((-1.0, 1.0), repeat=P.shape[0]):
        w = np.asarray(signs) * w_max
        best = max(best, float(w @ P @ w))
    return float(np.sqrt(best))


def resolve_tightening(cfg, P, K=None):
    """Fill ``cfg.c`` from the Lipschitz bounds if it was left unset."""
    if cfg.c is None:
        cfg.c = lipschitz_constants(cfg.constraints, P, K)
    return cfg


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def objective(traj, eq, y_d, cfg, value_fn=None):
    """Stage costs of the horizon plus the offset term and an optional terminal value.

    ``sum_i ||x_{i+1} - x_zeta||_Q^2 + ||v_i - v_zeta||_R^2 + ||y_zeta - y_d||_T^2 + V(x_N - x_zeta)``.
    """
    X = np.atleast_2d(traj.states)
    V = np.atleast_2d(traj.inputs)
    if X.shape[0] != V.shape[0] + 1:
        raise ContractViolation("trajectory needs one more state than inputs")
    dx = X[1:] - eq.x_zeta
    dv = V - eq.v_zeta
    dy = np.asarray(eq.y_zeta, dtype=float) - np.asarray(y_d, dtype=float)
    J = float(np.einsum("ij,jk,ik->", dx, cfg.Q, dx) + np.einsum("ij,jk,ik->", dv, cfg.R, dv) + dy @ cfg.T @ dy)
    if value_fn is not None:
        J += float(value_fn(X[-1] - eq.x_zeta))
    return J


# ---------------------------------------------------------------------------
# SQP solver
# ---------------------------------------------------------------------------


@dataclass
class RmpcSolution:
    trajectory: PredictedTrajectory
    equilibrium: ArtificialEquilibrium
    value: float
    kkt_residual: float
    iterations: int
    trace: list
    z: np.ndarray
    lam_eq: np.ndarray
    lam_in: np.ndarray
    primal_residual: float = 0.0
    converged: bool = True

    @property
    def first_input(self):
        return self.trajectory.inputs[0]


class _Problem:
    """Condensed NLP in ``z = [v_0 .. v_{N-1}, x_zeta, v_zeta]``."""

    def __init__(self, model, cfg, P, x0, y_d, value_fn):
        self.model, self.cfg, self.P = model, cfg, P
        self.x0 = np.asarray(x0, dtype=float)
        self.y_d = np.asarray(y_d, dtype=float)
        self.value_fn = value_fn
        n_x, n_u, N = model.n_x, model.n_u, cfg.N
        self.n_x, self.n_u, self.N = n_x, n_u, N
        self.nv = N * n_u
        self.nz = self.nv + n_x + n_u
        self.iz = slice(self.nv, self.nv + n_x)
        self.iv = slice(self.nv + n_x, self.nz)
        cons = cfg.constraints
        self.cons = cons
        # constant rows at stage 0 (state-only) are checked, not optimised
        self.margins = np.array([[tightening_margin(k, e, cfg) for e in range(len(cons))] for k in range(N + 1)]) \
            if len(cons) else np.zeros((N + 1, 0))
        self.tube_N = tube_radius(N, cfg)
        self.term_radius = cfg.alpha - self.tube_N

    def split(self, z):
        return z[: self.nv].reshape(self.N, self.n_u), z[self.iz], z[self.iv]

    def rollout(self, z):
        V, _, _ = self.split(z)
        X = np.empty((self.N + 1, self.n_x))
        X[0] = self.x0
        S = np.zeros((self.N + 1, self.n_x, self.nv))
        for i in range(self.N):
            A, B = self.model.step_jacobians(X[i], V[i])
            X[i + 1] = self.model.step(X[i], V[i])
            S[i + 1] = A @ S[i]
            S[i + 1][:, i * self.n_u : (i + 1) * self.n_u] += B
        return X, S

    def evaluate(self, z, with_derivatives=True):
        cfg, model = self.cfg, self.model
        n_x, n_u, N, nz = self.n_x, self.n_u, self.N, self.nz
        V, xz, vz = self.split(z)
        X, S = self.rollout(z)
        out = {"X": X}

        # cost
        dx = X[1:] - xz
        dv = V - vz
        yz = model.output(xz, vz)
        dy = yz - self.y_d
        J = float(np.einsum("ij,jk,ik->", dx, cfg.Q, dx) + np.einsum("ij,jk,ik->", dv, cfg.R, dv) + dy @ cfg.T @ dy)
        dN = X[N] - xz
        if self.value_fn is not None:
            J += float(self.value_fn(dN))
        out["J"] = J

        # equality: equilibrium of the nominal step
        c_eq = model.step(xz, vz) - xz
        out["c_eq"] = c_eq

        # inequalities
        rows, jac_rows, labels = [], [], []
        cons = self.cons
        for i in range(N + 1):
            if len(cons) == 0:
                break
            xi = X[i]
            if i < N:
                vi = V[i]
                mask = np.ones(len(cons), bool) if i > 0 else ~cons.state_only
            else:
                vi = np.zeros(n_u)
                mask = cons.state_only
            if not mask.any():
                continue
            vals = cons.values(xi, vi) + self.margins[i]
            rows.append(vals[mask])
            labels += [cons.labels[j] for j in np.flatnonzero(mask)]
            if with_derivatives:
                Jr = cons.G_x[mask] @ S[i]
                if i < N:
                    Jr[:, i * n_u : (i + 1) * n_u] += cons.G_v[mask]
                jac_rows.append(np.hstack([Jr, np.zeros((mask.sum(), n_x + n_u))]))
        if len(cons):
            vals = cons.values(xz, vz) + self.margins[N]
            rows.append(vals)
            labels += ["equilibrium"] * len(cons)
            if with_derivatives:
                jac_rows.append(np.hstack([np.zeros((len(cons), self.nv)), cons.G_x, cons.G_v]))
        # terminal set, squared form
        rows.append(np.array([dN @ self.P @ dN - self.term_radius**2]))
        labels.append("terminal")
        out["c_in"] = np.concatenate(rows)
        out["labels"] = labels

        if not with_derivatives:
            return out

        E = np.zeros((n_x, nz))  # d(x_N - x_zeta)/dz
        E[:, : self.nv] = S[N]
        E[:, self.iz] = -np.eye(n_x)
        PdN = self.P @ dN
        jac_rows.append((2.0 * PdN @ E)[None, :])
        out["A_in"] = np.vstack(jac_rows)
        out["E"] = E

        A_eq_x, B_eq_v = model.step_jacobians(xz, vz)
        A_eq = np.zeros((n_x, nz))
        A_eq[:, self.iz] = A_eq_x - np.eye(n_x)
        A_eq[:, self.iv] = B_eq_v
        out["A_eq"] = A_eq

        # gradient and Gauss-Newton Hessian of the cost
        g = np.zeros(nz)
        H = np.zeros((nz, nz))
        for i in range(N):
            Dx = np.zeros((n_x, nz))
            Dx[:, : self.nv] = S[i + 1]
            Dx[:, self.iz] = -np.eye(n_x)
            QD = cfg.Q @ Dx
            g += 2.0 * dx[i] @ QD
            H += 2.0 * Dx.T @ QD
            sl = slice(i * n_u, (i + 1) * n_u)
            g[sl] += 2.0 * cfg.R @ dv[i]
            g[self.iv] -= 2.0 * cfg.R @ dv[i]
            H[sl, sl] += 2.0 * cfg.R
            H[sl, self.iv] -= 2.0 * cfg.R
            H[self.iv, sl] -= 2.0 * cfg.R
            H[self.iv, self.iv] += 2.0 * cfg.R
        Dy = np.zeros((model.n_y, nz))
        Dy[:, self.iz] = model.C
        Dy[:, self.iv] = model.D
        g += 2.0 * dy @ cfg.T @ Dy
        H += 2.0 * Dy.T @ cfg.T @ Dy
        if self.value_fn is not None:
            g += self.value_fn.gradient(dN) @ E
            H += E.T @ self.value_fn.hessian_psd(dN) @ E
        out["g"] = g
        out["H"] = H
        return out


def _kkt_residual(ev, lam_eq, lam_in):
    stat = ev["g"] + ev["A_eq"].T @ lam_eq + ev["A_in"].T @ lam_in
    prim = max(np.abs(ev["c_eq"]).max(initial=0.0), np.maximum(ev["c_in"], 0.0).max(initial=0.0))
    comp = np.abs(lam_in * ev["c_in"]).max(initial=0.0)
    dual = np.maximum(-lam_in, 0.0).max(initial=0.0)
    return float(max(np.abs(stat).max(), prim, comp, dual))


def _merit(ev, mu):
    return ev["J"] + mu * (np.abs(ev["c_eq"]).sum() + np.maximum(ev["c_in"], 0.0).sum())


def _diagnose(ev, H, g):
    """Name the constraint class whose removal makes the linearised problem feasible."""
    labels = np.array(ev["labels"])
    for drop in ("terminal", "state", "equilibrium", "input"):
        keep = labels != drop
        try:
            solve_qp(H, g, ev["A_eq"], -ev["c_eq"], ev["A_in"][keep], -ev["c_in"][keep])
            return drop
        except QPInfeasible:
            labels = labels[keep]
            ev = {**ev, "A_in": ev["A_in"][keep], "c_in": ev["c_in"][keep]}
    return "unknown"


def default_initial_guess(model, cfg, x_k):
    z = np.zeros(cfg.N * model.n_u + model.n_x + model.n_u)
    z[cfg.N * model.n_u : cfg.N * model.n_u + model.n_x] = x_k
    return z


def solve_rmpc(x_k, y_d, cfg, P, model, value_fn=None, z0=None, trace=False):
    """Solve the robust tracking NLP from ``x_k`` toward output ``y_d``.

    Raises :class:`InfeasibleProblem` (with the offending constraint class)
    or :class:`NonConvergence` (with the best iterate attached).
    """
    x_k = np.asarray(x_k, dtype=float)
    if x_k.shape != (model.n_x,):
        raise ContractViolation(f"x_k must have shape ({model.n_x},)")
    if cfg.c is None:
        raise ConfigurationError("tightening constants not set; call resolve_tightening first")
    P = as_spd(P, "P", model.n_x)
    prob = _Problem(model, cfg, P, x_k, y_d, value_fn)
    if prob.term_radius <= 0:
        raise InfeasibleProblem("terminal", "alpha does not exceed the tube radius at the horizon")
    cons = cfg.constraints
    if len(cons):
        g0 = cons.values(x_k, np.zeros(model.n_u))[cons.state_only]
        if np.any(g0 > 1e-9):
            raise InfeasibleProblem("state", "current state violates the untightened state constraints")

    z = default_initial_guess(model, cfg, x_k) if z0 is None else np.array(z0, dtype=float)
    mu = 1.0
    lam_eq = np.zeros(model.n_x)
    lam_in = None
    hist = []
    reg = cfg.regularization
    best = None
    for it in range(1, cfg.max_iter + 1):
        ev = prob.evaluate(z)
        H = ev["H"] + reg * (1.0 + np.abs(np.diag(ev["H"])).max()) * np.eye(prob.nz)
        try:
            qp = solve_qp(H, ev["g"], ev["A_eq"], -ev["c_eq"], ev["A_in"], -ev["c_in"])
        except QPInfeasible:
            raise InfeasibleProblem(_diagnose(ev, H, ev["g"])) from None
        d = qp.x
        if lam_in is None:
            lam_in = np.zeros_like(qp.lam_in)
        mu = max(mu, 1.1 * np.abs(np.concatenate([qp.lam_eq, qp.lam_in])).max(initial=0.0) + 1e-6)
        phi0 = _merit(ev, mu)
        infeas = np.abs(ev["c_eq"]).sum() + np.maximum(ev["c_in"], 0.0).sum()
        dphi = ev["g"] @ d - mu * infeas
        step = 1.0
        while True:
            ev_t = prob.evaluate(z + step * d, with_derivatives=False)
            if _merit(ev_t, mu) <= phi0 + 1e-4 * step * min(dphi, 0.0) + 1e-12 * (1.0 + abs(phi0)) or step < 1e-10:
                break
            step *= 0.5
        z = z + step * d
        lam_eq = (1 - step) * lam_eq + step * qp.lam_eq
        lam_in = (1 - step) * lam_in + step * qp.lam_in
        ev_new = prob.evaluate(z)
        kkt = _kkt_residual(ev_new, lam_eq, lam_in)
        hist.append({"iteration": it, "objective": ev_new["J"], "kkt_residual": kkt, "step": step})
        if best is None or kkt < best[1]:
            best = (z.copy(), kkt, lam_eq.copy(), lam_in.copy(), ev_new, it)
        if kkt < cfg.tol or (np.abs(step * d).max() < 1e-12 and kkt < 1e-6):
            break
    else:
        if best[1] > 1e-6:
            sol = _package(prob, *best, hist if trace else [], converged=False)
            raise NonConvergence(f"SQP did not converge in {cfg.max_iter} iterations (KKT {best[1]:.3g})",
                                 best=sol)
    return _package(prob, z, kkt, lam_eq, lam_in, ev_new, it, hist if trace else [])


def _package(prob, z, kkt, lam_eq, lam_in, ev, it, trace, converged=True):
    V, xz, vz = prob.split(z)
    X, _ = prob.rollout(z)
    eq = ArtificialEquilibrium(xz.copy(), vz.copy(), prob.model.output(xz, vz))
    primal = max(np.abs(ev["c_eq"]).max(initial=0.0), np.maximum(ev["c_in"], 0.0).max(initial=0.0))
    return RmpcSolution(
        trajectory=PredictedTrajectory(V.copy(), X),
        equilibrium=eq,
        value=ev["J"],
        kkt_residual=kkt,
        iterations=it,
        trace=trace,
        z=z,
        lam_eq=lam_eq,
        lam_in=lam_in,
        primal_residual=float(primal),
        converged=converged,
    )


def shift_guess(sol, model, cfg):
    """Warm start: drop the first input, repeat ``v_zeta`` at the end, keep the equilibrium."""
    V = sol.trajectory.inputs
    V_new = np.vstack([V[1:], sol.equilibrium.v_zeta[None, :]])
    return np.concatenate([V_new.ravel(), sol.equilibrium.x_zeta, sol.equilibrium.v_zeta])


def control_law(x_k, y_d, cfg, P, model, value_fn=None, z0=None):
    """First optimal input ``v*(0|k)``."""
    return solve_rmpc(x_k, y_d, cfg, P, model, value_fn=value_fn, z0=z0).first_input


class RobustMPC:
    """Receding-horizon controller wrapping :func:`solve_rmpc` with warm starts.

    ``P`` defaults to the LQR Lyapunov matrix of the nominal model and the
    tightening constants to the Lipschitz bounds in that metric, with input
    rows evaluated along the feedback ``K`` (the LQR gain unless given). With
    ``accept_unconverged`` an iteration-limit stop still returns the best
    iterate when it is primal feasible (its ``converged`` flag is false).
    """

    def __init__(self, model, cfg, P=None, value_fn=None, warm_start=True, accept_unconverged=False,
                 feasibility_tol=1e-8, K=None):
        self.model = model
        self.cfg = cfg
        if P is None or K is None:
            P_lqr, K_lqr = lqr_terminal(model, cfg.Q, cfg.R)
            P = P_lqr if P is None else P
            K = K_lqr if K is None else np.atleast_2d(np.asarray(K, dtype=float))
        self.P = as_spd(P, "P", model.n_x)
        self.K = K
        resolve_tightening(cfg, self.P, K)
        self.value_fn = value_fn
        self.warm_start = warm_start
        self.accept_unconverged = accept_unconverged
        self.feasibility_tol = feasibility_tol
        self.last = None
        self.unconverged_count = 0
        self.solve_count = 0

    def reset(self):
        self.last = None

    def solve(self, x_k, y_d):
        z0 = shift_guess(self.last, self.model, self.cfg) if (self.warm_start and self.last is not None) else None
        try:
            sol = solve_rmpc(x_k, y_d, self.cfg, self.P, self.model, value_fn=self.value_fn, z0=z0)
        except NonConvergence as exc:
            # a feasible but not fully stationary iterate is still a safe input
            if not (self.accept_unconverged and exc.best.primal_residual <= self.feasibility_tol):
                raise
            sol = exc.best
            self.unconverged_count += 1
        self.last = sol
        self.solve_count += 1
        return sol

    def __call__(self, x_k, y_d):
        return self.solve(x_k, y_d).first_input


def write_trace_csv(trace, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["iteration", "objective", "kkt_residual", "step"])
        w.writeheader()
        w.writerows(trace)
