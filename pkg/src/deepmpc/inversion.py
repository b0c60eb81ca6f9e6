"""Dynamic inversion: replace the plant dynamics by a reference model.

The control law solves ``B u = f*(x_d, u_L) - f_hat(x) - Gamma (x - x_d)``.
When ``B`` is tall the system is completed with orthogonal slack columns
``B_s``; only the physical part of the solution is actuated and the slack
part is reported alongside it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._linalg import as_spd
from .exceptions import ContractViolation, SingularControlMatrix


@dataclass(frozen=True)
class ReferenceModel:
    """Linear desired dynamics ``x_d_dot = A_m x_d + B_m u_L``."""

    A_m: np.ndarray
    B_m: np.ndarray
    u_L: np.ndarray = None

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A_m, dtype=float))
        B = np.atleast_2d(np.asarray(self.B_m, dtype=float))
        if A.shape[0] != A.shape[1] or B.shape[0] != A.shape[0]:
            raise ContractViolation("reference model matrices have incompatible shapes")
        if np.linalg.eigvals(A).real.max() >= 0:
            raise ContractViolation("reference model must be Hurwitz")
        u_L = np.zeros(B.shape[1]) if self.u_L is None else np.asarray(self.u_L, dtype=float).reshape(B.shape[1])
        object.__setattr__(self, "A_m", A)
        object.__setattr__(self, "B_m", B)
        object.__setattr__(self, "u_L", u_L)

    @property
    def n_x(self):
        return self.A_m.shape[0]

    @property
    def n_u(self):
        return self.B_m.shape[1]

    def derivative(self, x_d, u_L=None):
        u_L = self.u_L if u_L is None else u_L
        return self.A_m @ x_d + self.B_m @ u_L

    @classmethod
    def second_order(cls, n_joints, omega=2.0, u_L=None):
        """Critically damped per joint: ``q_dd = omega^2 (u_L - q) - 2 omega q_d``.

        ``u_L`` acts as the commanded joint position; equilibria are ``(u_L, 0)``.
        """
        n = int(n_joints)
        I, Z = np.eye(n), np.zeros((n, n))
        A = np.block([[Z, I], [-(omega**2) * I, -2.0 * omega * I]])
        B = np.vstack([Z, omega**2 * I])
        return cls(A, B, u_L)

    @classmethod
    def first_order(cls, n, rate=2.0, u_L=None):
        """``x_d_dot = rate (u_L - x_d)``."""
        return cls(-rate * np.eye(n), rate * np.eye(n), u_L)

    def feedforward(self, q, qd, qdd):
        """Nominal input making a second-order model follow ``(q, qd, qdd)`` exactly."""
        n = len(q)
        w2 = self.B_m[n:, :].diagonal()
        two_w = -self.A_m[n:, n:].diagonal()
        return q + (qdd + two_w * qd) / w2


def second_order_gain(n_joints, omega):
    """Symmetric positive-definite ``Gamma`` for second-order joint blocks.

    The velocity rows are ``[omega^2 I, 2 omega I]`` so the actuated error
    channel is critically damped at ``omega``; the position rows are padded to
    keep the matrix positive-definite (they act only through the slack part).
    """
    n = int(n_joints)
    I = np.eye(n)
    w = float(omega)
    if w <= 0:
        raise ContractViolation("omega must be positive")
    return np.block([[w**3 * I, w**2 * I], [w**2 * I, 2.0 * w * I]])


@dataclass(frozen=True)
class SlackAugmentation:
    """Square completion ``[B | B_s]`` of a full-column-rank ``B``."""

    B: np.ndarray
    B_s: np.ndarray

    @property
    def augmented(self):
        return np.hstack([self.B, self.B_s])

    @property
    def selector(self):
        """Projection picking the physical controls out of ``[u; u_s]``."""
        n_u = self.B.shape[1]
        return np.eye(self.B.shape[0])[:n_u]

    def solve(self, rhs):
        """Solve ``[B | B_s] [u; u_s] = rhs``; returns ``(u, u_s)``."""
        sol = np.linalg.solve(self.augmented, rhs)
        n_u = self.B.shape[1]
        return sol[:n_u], sol[n_u:]


def augment_slack(B):
    """Complete ``B`` with an orthonormal basis of ``range(B)^perp``."""
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n_x, n_u = B.shape
    if n_u > n_x or np.linalg.matrix_rank(B) < n_u:
        raise ContractViolation("B must have full column rank to be augmented")
    if n_u == n_x:
        return SlackAugmentation(B, np.zeros((n_x, 0)))
    Q, _ = np.linalg.qr(B, mode="complete")
    return SlackAugmentation(B, Q[:, n_u:])


def inversion_rhs(x, x_d, f_star, f_hat_total, gamma):
    return f_star - f_hat_total - gamma @ (x - x_d)


def inversion_control(x, x_d, u_L, f_hat_total, gamma, B, reference, slack=None, return_slack=False):
    """Dynamic inversion law ``u = B^-1 (f*(x_d, u_L) - f_hat(x) - Gamma (x - x_d))``.

    Parameters
    ----------
    f_hat_total : array
        Estimate of the full drift ``f(x) + B xi(x)``.
    gamma : array
        Symmetric positive-definite error gain.
    reference : ReferenceModel or callable
        Evaluates ``f*(x_d, u_L)``.
    slack : SlackAugmentation, optional
        Required when ``B`` is not square and invertible.
    """
    x = np.asarray(x, dtype=float)
    x_d = np.asarray(x_d, dtype=float)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    if x.shape != x_d.shape or x.shape != (B.shape[0],) or gamma.shape != (B.shape[0], B.shape[0]):
        raise ContractViolation("inconsistent dimensions in inversion_control")
    f_star = reference.derivative(x_d, u_L) if hasattr(reference, "derivative") else reference(x_d, u_L)
    rhs = inversion_rhs(x, x_d, f_star, np.asarray(f_hat_total, dtype=float), gamma)
    if slack is not None:
        u, u_s = slack.solve(rhs)
    else:
        if B.shape[0] != B.shape[1] or np.linalg.matrix_rank(B) < B.shape[0]:
            raise SingularControlMatrix("B is not invertible; supply a slack augmentation")
        u, u_s = np.linalg.solve(B, rhs), np.zeros(0)
    return (u, u_s) if return_slack else u


def check_gain(gamma, n):
    return as_spd(gamma, "Gamma", n)
