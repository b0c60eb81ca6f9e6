"""Shared simulation fixtures for the observer and inversion tests."""

import numpy as np

from deepmpc.approximator import SignGradientRegressor
from deepmpc.observer import ModifiedStateObserver
from deepmpc.plant import ScalarPlant


def constant_net(value, n_in=1):
    """Approximator whose output is the constant ``value`` (exact estimate of a constant bias)."""
    value = np.atleast_1d(np.asarray(value, dtype=float))
    return SignGradientRegressor.from_weights([np.zeros((n_in, value.size))], [value])


def scalar_learning_run(learning=True, bias=2.0, steps=2000, h=1e-3, eta=1e-4, gain=100.0, seed=0):
    """Constant-uncertainty scalar plant with ``u = 0``; returns per-step ``(xi_hat, e_a)`` arrays."""
    plant = ScalarPlant(a=-1.0, b=1.0, bias=bias)
    net = SignGradientRegressor(step_size=eta, random_state=seed).initialize(1, 1)
    obs = ModifiedStateObserver(plant, gain, approximator=net, learning=learning)
    x = np.zeros(1)
    xi_hat, e_a = [], []
    for k in range(steps):
        x = obs.step(x, np.zeros(1), None, k * h, h)
        xi_hat.append(obs.xi_hat(x)[0])
        e_a.append(abs(x[0] - obs.x_hat[0]))
    return np.array(xi_hat), np.array(e_a)
