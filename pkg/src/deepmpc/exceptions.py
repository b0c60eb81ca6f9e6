"""Exception hierarchy shared by the control stack."""


class DeepMPCError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolation(DeepMPCError, ValueError):
    """An argument violates an operation's preconditions (shape, sign, range)."""


class ConfigurationError(DeepMPCError, ValueError):
    """A configuration value is invalid or inconsistent."""


class IntegrationBlowUp(DeepMPCError, FloatingPointError):
    """The integrator produced a non-finite state."""

    def __init__(self, t, x):
        self.t = float(t)
        self.x = x
        super().__init__(f"non-finite state after integration step at t={self.t:.6g}: {x!r}")


class SingularControlMatrix(DeepMPCError, ValueError):
    """Control matrix is not invertible and no slack augmentation was supplied."""


class InfeasibleProblem(DeepMPCError):
    """The MPC problem has no feasible point.

    ``constraint_class`` names the group of constraints found responsible
    (``"terminal"``, ``"state"``, ``"input"``, ``"equilibrium"`` or ``"unknown"``).
    """

    def __init__(self, constraint_class, message=""):
        self.constraint_class = constraint_class
        super().__init__(f"infeasible ({constraint_class} constraints){': ' + message if message else ''}")


class NonConvergence(DeepMPCError):
    """Iteration limit reached; ``best`` carries the best iterate found."""

    def __init__(self, message, best=None):
        self.best = best
        super().__init__(message)
