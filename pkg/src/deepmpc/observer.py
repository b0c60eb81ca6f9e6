"""Modified state observer and the online uncertainty-learning circuit."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._linalg import as_spd, diag_or_matrix
from .exceptions import ContractViolation, IntegrationBlowUp
from .plant import rk4_step


@dataclass(frozen=True)
class ErrorTriple:
    e_r: np.ndarray      # tracking error       x - x_d
    e_a: np.ndarray      # estimation error     x - x_hat
    e_r_hat: np.ndarray  # estimate tracking    x_hat - x_d


def error_triple(x, x_hat, x_d):
    x, x_hat, x_d = (np.asarray(v, dtype=float) for v in (x, x_hat, x_d))
    if not x.shape == x_hat.shape == x_d.shape or x.ndim != 1:
        raise ContractViolation("x, x_hat and x_d must be 1-D vectors of equal length")
    return ErrorTriple(e_r=x - x_d, e_a=x - x_hat, e_r_hat=x_hat - x_d)


@dataclass
class ObserverState:
    x_hat: np.ndarray
    gain: np.ndarray

    def __post_init__(self):
        self.x_hat = np.asarray(self.x_hat, dtype=float)
        self.gain = as_spd(self.gain, "observer gain", self.x_hat.shape[0])


def observer_derivative(model, x, x_hat, u, f_hat, gain):
    """``f(x) + B (xi_hat + u) + Lambda (x - x_hat)``.

    ``f_hat`` is the approximator output ``xi_hat`` (one entry per actuated channel).
    """
    B = model.control_matrix
    if np.shape(f_hat) != (model.n_u,) or np.shape(u) != (model.n_u,):
        raise ContractViolation("f_hat and u must have one entry per control channel")
    if np.shape(x) != (model.n_x,) or np.shape(x_hat) != (model.n_x,):
        raise ContractViolation("x and x_hat must match the model state dimension")
    return model.known_dynamics(x) + B @ (f_hat + u) + gain @ (x - x_hat)


def residual_target(approx_out, e_a, B, gain):
    """Regression target ``xi_hat + B^+ Lambda e_a`` implied by the observer innovation."""
    return approx_out + np.linalg.pinv(B) @ (gain @ e_a)


def train_uncertainty_step(approx, x, e_a, B, gain, eta=None):
    """One sign step pulling ``approx(x)`` toward :func:`residual_target`.

    ``eta`` overrides the approximator's own step size for this call.
    """
    e_a = np.asarray(e_a, dtype=float)
    if not e_a.any():
        return approx
    out = approx.forward(x)
    grad = approx.gradient_of_loss(x, residual_target(out, e_a, B, gain))
    if eta is None:
        return approx.sign_update(grad)
    saved = approx.step_size
    approx.step_size = eta
    try:
        approx.sign_update(grad)
    finally:
        approx.step_size = saved
    return approx


class ModifiedStateObserver:
    """Observer ``x_hat`` with an optional approximator learning ``xi``.

    With ``approximator=None`` the estimate is identically zero (learning
    disabled); with ``learning=False`` the approximator is evaluated but never
    trained.
    """

    def __init__(self, model, gain, approximator=None, learning=True, x_hat0=None):
        self.model = model
        self.gain = diag_or_matrix(gain, model.n_x, "observer gain")
        self.approximator = approximator
        self.learning = learning and approximator is not None
        self.x_hat = np.zeros(model.n_x) if x_hat0 is None else np.array(x_hat0, dtype=float)
        self._pinv_B = np.linalg.pinv(model.control_matrix)

    @property
    def state(self):
        return ObserverState(self.x_hat.copy(), self.gain)

    def xi_hat(self, x):
        if self.approximator is None:
            return np.zeros(self.model.n_u)
        return self.approximator.forward(x)

    def f_hat_total(self, x, xi_hat=None):
        xi_hat = self.xi_hat(x) if xi_hat is None else xi_hat
        return self.model.known_dynamics(x) + self.model.control_matrix @ xi_hat

    def train(self, x, e_a):
        if not self.learning or not np.any(e_a):
            return
        out = self.approximator.forward(x)
        target = out + self._pinv_B @ (self.gain @ e_a)
        self.approximator.sign_update(self.approximator.gradient_of_loss(x, target))

    def coupled_step(self, x, u, scenario, t, h, xi_hat=None):
        """Integrate plant and observer together over one RK4 step.

        ``xi_hat`` and ``u`` are held over the step. Returns ``(x_next, x_hat_next, xi_hat)``;
        the observer state is updated in place.
        """
        model = self.model
        n = model.n_x
        B = model.control_matrix
        xi_hat = self.xi_hat(x) if xi_hat is None else xi_hat
        bu_hat = B @ (xi_hat + u)

        def joint(s, z):
            xs, xh = z[:n], z[n:]
            fx = model.known_dynamics(xs)
            dx = fx + B @ (model.uncertainty(xs, t + s, scenario) + u)
            dxh = fx + bu_hat + self.gain @ (xs - xh)
            return np.concatenate([dx, dxh])

        z = rk4_step(joint, np.concatenate([x, self.x_hat]), h)
        if not np.all(np.isfinite(z)):
            raise IntegrationBlowUp(t, x)
        self.x_hat = z[n:]
        return z[:n], self.x_hat, xi_hat

    def step(self, x, u, scenario, t, h):
        """Coupled step followed by one training update on the new estimation error."""
        x_next, x_hat_next, xi_hat = self.coupled_step(x, u, scenario, t, h)
        self.train(x_next, x_next - x_hat_next)
        return x_next


def uncertainty_residual(model, x, xi_hat, scenario=None, t=0.0):
    """``f_tilde = (f + B xi) - (f + B xi_hat) = B (xi - xi_hat)``."""
    return model.control_matrix @ (model.uncertainty(x, t, scenario) - xi_hat)
