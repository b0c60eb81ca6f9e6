"""Small validation helpers for matrices."""

import numpy as np

from .exceptions import ContractViolation


def as_spd(M, name="matrix", n=None):
    """Return ``M`` as a float array after checking it is symmetric positive-definite."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ContractViolation(f"{name} must be square, got shape {M.shape}")
    if n is not None and M.shape[0] != n:
        raise ContractViolation(f"{name} must be {n}x{n}, got {M.shape}")
    if not np.allclose(M, M.T, rtol=1e-12, atol=1e-12):
        raise ContractViolation(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M).min() <= 0:
        raise ContractViolation(f"{name} must be positive-definite")
    return M


def diag_or_matrix(value, n, name="matrix"):
    """Scalar -> ``value * I``, vector -> ``diag(value)``, matrix -> itself; then SPD-checked."""
    v = np.asarray(value, dtype=float)
    if v.ndim == 0:
        M = float(v) * np.eye(n)
    elif v.ndim == 1:
        if v.shape[0] != n:
            raise ContractViolation(f"{name} diagonal must have {n} entries, got {v.shape[0]}")
        M = np.diag(v)
    else:
        M = v
    return as_spd(M, name, n)
