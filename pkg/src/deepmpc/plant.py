"""Uncertain plant models, external-force scenarios and the RK4 integrator.

Every model has the control-affine form

    x_dot = f(x) + B xi(x, t) + B u

with a constant control matrix ``B``. ``f`` is the part known to the
controller; ``xi`` collects whatever the controller does not know (a constant
bias and/or external pushes mapped into the actuated channels).

Manipulators are written in computed-torque coordinates: the state is
``[q, q_dot]`` and the input ``u`` is the inertia-normalised joint torque
``M(q)^-1 tau``, so ``B = [0; I]`` is constant. The physical torque is
recovered with :meth:`PlanarArm.joint_torque`.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ContractViolation, IntegrationBlowUp

GRAVITY = 9.81


def _as_vector(x, n, name):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != n:
        raise ContractViolation(f"{name} must have shape ({n},), got {x.shape}")
    return x


# ---------------------------------------------------------------------------
# Disturbance scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Push:
    """External force on the end point of ``link`` (1-based) over ``[t_start, t_end)``.

    ``profile="sine"`` modulates the force by ``sin(2 pi frequency (t - t_start) + phase)``.
    """

    link: int
    force: tuple
    t_start: float
    t_end: float
    profile: str = "constant"
    frequency: float = 0.0
    phase: float = 0.0

    def __post_init__(self):
        force = tuple(float(f) for f in self.force)
        if len(force) == 2:
            force = force + (0.0,)
        if len(force) != 3:
            raise ContractViolation(f"push force must have 2 or 3 components, got {len(force)}")
        object.__setattr__(self, "force", force)
        if not self.t_start < self.t_end:
            raise ContractViolation(f"push window must satisfy start < end, got [{self.t_start}, {self.t_end})")
        if self.link < 1:
            raise ContractViolation(f"link index is 1-based, got {self.link}")
        if self.profile not in ("constant", "sine"):
            raise ContractViolation(f"unknown push profile {self.profile!r}")

    def value(self, t):
        if not self.t_start <= t < self.t_end:
            return np.zeros(3)
        f = np.array(self.force)
        if self.profile == "sine":
            f = f * math.sin(2.0 * math.pi * self.frequency * (t - self.t_start) + self.phase)
        return f

    @classmethod
    def from_dict(cls, d):
        return cls(
            link=int(d["link"]),
            force=tuple(d["force"]),
            t_start=float(d["t_start"]),
            t_end=float(d["t_end"]),
            profile=d.get("profile", "constant"),
            frequency=float(d.get("frequency", 0.0)),
            phase=float(d.get("phase", 0.0)),
        )

    def to_dict(self):
        d = {"link": self.link, "force": list(self.force), "t_start": self.t_start, "t_end": self.t_end}
        if self.profile != "constant":
            d.update(profile=self.profile, frequency=self.frequency, phase=self.phase)
        return d


@dataclass(frozen=True)
class DisturbanceScenario:
    scenario_id: int
    pushes: tuple = ()
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "pushes", tuple(self.pushes))

    @property
    def max_link(self):
        return max((p.link for p in self.pushes), default=0)

    @classmethod
    def from_dict(cls, d):
        return cls(
            scenario_id=int(d.get("scenario_id", 0)),
            pushes=tuple(Push.from_dict(p) for p in d.get("pushes", [])),
            name=d.get("name", ""),
        )

    def to_dict(self):
        return {"scenario_id": self.scenario_id, "name": self.name, "pushes": [p.to_dict() for p in self.pushes]}


NO_DISTURBANCE = DisturbanceScenario(scenario_id=0, name="none")


def external_wrench(scenario, t, link, n_links=None):
    """Sum of all pushes acting on ``link`` at time ``t`` as a 3-vector [N]."""
    if link < 1 or (n_links is not None and link > n_links):
        raise ContractViolation(f"invalid link index {link}" + (f" for {n_links}-link model" if n_links else ""))
    total = np.zeros(3)
    if scenario is None:
        return total
    for push in scenario.pushes:
        if push.link == link:
            total += push.value(t)
    return total


# ---------------------------------------------------------------------------
# Plant models
# ---------------------------------------------------------------------------


class PlantModel:
    """Base class for control-affine plants with constant ``B``.

    Subclasses implement :meth:`known_dynamics` and, when external pushes
    apply, :meth:`push_uncertainty`. ``bias`` is a constant intrinsic
    uncertainty added to ``xi``.
    """

    n_x: int
    n_u: int
    n_links: int = 1

    def __init__(self, control_matrix, bias=None, disturbance_bound=0.0):
        B = np.array(control_matrix, dtype=float)
        if B.ndim != 2:
            raise ContractViolation("control matrix must be 2-D")
        if np.linalg.matrix_rank(B) < B.shape[1]:
            raise ContractViolation("control matrix must have full column rank")
        B.setflags(write=False)
        self.control_matrix = B
        self.n_x, self.n_u = B.shape
        bias = np.zeros(self.n_u) if bias is None else _as_vector(bias, self.n_u, "bias")
        bias.setflags(write=False)
        self.bias = bias
        if disturbance_bound < 0:
            raise ContractViolation("disturbance bound must be nonnegative")
        self.disturbance_bound = float(disturbance_bound)

    @property
    def B(self):
        return self.control_matrix

    def known_dynamics(self, x):
        raise NotImplementedError

    def push_uncertainty(self, x, scenario, t):
        return np.zeros(self.n_u)

    def uncertainty(self, x, t=0.0, scenario=None):
        """``xi(x, t)``: everything in the actuated channels the controller does not model."""
        xi = self.bias.copy()
        if scenario is not None and scenario.pushes:
            xi = xi + self.push_uncertainty(x, scenario, t)
        return xi

    def true_dynamics(self, x, u, scenario=None, t=0.0):
        return self.known_dynamics(x) + self.control_matrix @ (self.uncertainty(x, t, scenario) + u)

    def check_state(self, x):
        return _as_vector(x, self.n_x, "state")

    def check_input(self, u):
        return _as_vector(u, self.n_u, "control input")


class ScalarPlant(PlantModel):
    """``x_dot = a x + b (u + xi)`` with constant ``xi = bias``."""

    def __init__(self, a=-1.0, b=1.0, bias=0.0, disturbance_bound=0.0):
        super().__init__([[b]], bias=[bias], disturbance_bound=disturbance_bound)
        self.a = float(a)

    def known_dynamics(self, x):
        return np.array([self.a * x[0]])


class DoubleIntegrator(PlantModel):
    """Unit point mass on a line: ``x = (p, v)``, ``v_dot = u + xi``.

    A push on link 1 contributes its x-component divided by ``mass``.
    """

    n_links = 1

    def __init__(self, mass=1.0, bias=0.0, disturbance_bound=0.0):
        super().__init__([[0.0], [1.0]], bias=[bias], disturbance_bound=disturbance_bound)
        self.mass = float(mass)

    def known_dynamics(self, x):
        return np.array([x[1], 0.0])

    def push_uncertainty(self, x, scenario, t):
        return np.array([external_wrench(scenario, t, 1, 1)[0] / self.mass])


class PlanarArm(PlantModel):
    """Planar serial arm with point masses at the link ends and revolute joints.

    Joint angles are relative; the absolute angle of link ``k`` is
    ``theta_k = q_1 + ... + q_k`` measured from straight down, so ``q = 0``
    is the hanging equilibrium. Gravity acts along ``-y``.
    """

    def __init__(self, masses=(1.0, 1.0), lengths=(1.0, 1.0), gravity=GRAVITY, bias=None, disturbance_bound=0.0):
        masses = np.asarray(masses, dtype=float)
        lengths = np.asarray(lengths, dtype=float)
        if masses.shape != lengths.shape or masses.ndim != 1 or masses.size < 1:
            raise ContractViolation("masses and lengths must be equal-length 1-D sequences")
        if np.any(masses <= 0) or np.any(lengths <= 0):
            raise ContractViolation("masses and lengths must be positive")
        n = masses.size
        B = np.vstack([np.zeros((n, n)), np.eye(n)])
        super().__init__(B, bias=bias, disturbance_bound=disturbance_bound)
        self.n_links = n
        self.masses = masses
        self.lengths = lengths
        self.gravity = float(gravity)

    def _angles(self, q):
        return np.cumsum(q)

    def point_positions(self, q):
        """End-point positions of every link, shape ``(n, 2)``."""
        th = self._angles(q)
        seg = self.lengths[:, None] * np.column_stack([np.sin(th), -np.cos(th)])
        return np.cumsum(seg, axis=0)

    def point_jacobians(self, q):
        """Planar Jacobians of every link end point, shape ``(n, 2, n)``."""
        n = self.n_links
        th = self._angles(q)
        dseg = self.lengths[:, None] * np.column_stack([np.cos(th), np.sin(th)])  # d p / d theta_k
        J = np.zeros((n, 2, n))
        for i in range(n):
            for j in range(i + 1):
                # theta_k depends on q_j for every k >= j
                J[i, :, j] = dseg[j : i + 1].sum(axis=0)
        return J

    def mass_matrix(self, q):
        J = self.point_jacobians(q)
        return np.einsum("i,iaj,iak->jk", self.masses, J, J)

    def bias_forces(self, q, qd):
        """``h(q, qd) = C(q, qd) qd + G(q)``."""
        th = self._angles(q)
        thd = np.cumsum(qd)
        J = self.point_jacobians(q)
        # Jdot_i qd = sum_{k<=i} l_k thd_k^2 (-sin th_k, cos th_k)
        cent = np.cumsum(self.lengths[:, None] * thd[:, None] ** 2 * np.column_stack([-np.sin(th), np.cos(th)]), axis=0)
        accel = cent + np.array([0.0, self.gravity])
        return np.einsum("i,iaj,ia->j", self.masses, J, accel)

    def known_dynamics(self, x):
        n = self.n_links
        q, qd = x[:n], x[n:]
        qdd = np.linalg.solve(self.mass_matrix(q), -self.bias_forces(q, qd))
        return np.concatenate([qd, qdd])

    def push_uncertainty(self, x, scenario, t):
        n = self.n_links
        q = x[:n]
        J = None
        tau = np.zeros(n)
        for link in range(1, n + 1):
            F = external_wrench(scenario, t, link, n)
            if not F.any():
                continue
            if J is None:
                J = self.point_jacobians(q)
            # planar arm: the z-component of a push does no work
            tau += J[link - 1].T @ F[:2]
        if J is None:
            return tau
        return np.linalg.solve(self.mass_matrix(q), tau)

    def joint_torque(self, x, u):
        """Physical torque realising the normalised input ``u``."""
        return self.mass_matrix(x[: self.n_links]) @ u

    def energy(self, x):
        n = self.n_links
        q, qd = x[:n], x[n:]
        kinetic = 0.5 * qd @ self.mass_matrix(q) @ qd
        potential = self.gravity * self.masses @ self.point_positions(q)[:, 1]
        return kinetic + potential

    def end_effector(self, q):
        return self.point_positions(q)[-1]


def model_from_dict(d):
    """Build a plant from the ``model`` block of a scenario file."""
    kind = d.get("type", "planar_arm")
    bound = float(d.get("disturbance_bound", 0.0))
    if kind in ("planar_arm", "arm"):
        n = int(d.get("n_links", len(d.get("masses", [1.0, 1.0]))))
        masses = d.get("masses", [1.0] * n)
        lengths = d.get("lengths", [1.0] * n)
        if len(masses) != n or len(lengths) != n:
            raise ContractViolation("masses/lengths must have n_links entries")
        return PlanarArm(masses, lengths, gravity=float(d.get("gravity", GRAVITY)), disturbance_bound=bound)
    if kind == "double_integrator":
        return DoubleIntegrator(mass=float(d.get("mass", 1.0)), bias=float(d.get("bias", 0.0)), disturbance_bound=bound)
    if kind == "scalar":
        return ScalarPlant(a=float(d.get("a", -1.0)), b=float(d.get("b", 1.0)), bias=float(d.get("bias", 0.0)), disturbance_bound=bound)
    raise ContractViolation(f"unknown model type {kind!r}")


def model_to_dict(model):
    if isinstance(model, PlanarArm):
        return {
            "type": "planar_arm",
            "n_links": model.n_links,
            "masses": model.masses.tolist(),
            "lengths": model.lengths.tolist(),
            "gravity": model.gravity,
        }
    if isinstance(model, DoubleIntegrator):
        return {"type": "double_integrator", "mass": model.mass, "bias": float(model.bias[0])}
    if isinstance(model, ScalarPlant):
        return {"type": "scalar", "a": model.a, "b": float(model.B[0, 0]), "bias": float(model.bias[0])}
    raise ContractViolation(f"cannot serialise {type(model).__name__}")


def load_scenario(path):
    """Read a scenario JSON file; returns ``(scenario, model, raw_dict)``."""
    with open(path) as fh:
        raw = json.load(fh)
    scenario = DisturbanceScenario.from_dict(raw)
    model = model_from_dict(raw.get("model", {}))
    if scenario.max_link > model.n_links:
        raise ContractViolation(f"scenario pushes link {scenario.max_link} but model has {model.n_links} links")
    return scenario, model, raw


SCENARIO_DIR = Path(__file__).parent / "scenarios"


def canonical_scenario_paths():
    return sorted(SCENARIO_DIR.glob("scenario_*.json"))


# ---------------------------------------------------------------------------
# Functional API
# ---------------------------------------------------------------------------


def eval_true_dynamics(model, x, u, scenario=None, t=0.0):
    """``f(x) + B xi(x, t) + B u``."""
    x = model.check_state(x)
    u = model.check_input(u)
    return model.true_dynamics(x, u, scenario, t)


def eval_known_dynamics(model, x):
    """Drift ``f(x)`` alone, without control or uncertainty."""
    return model.known_dynamics(model.check_state(x))


def rk4_step(fun, x, h):
    """One classical Runge-Kutta step of the autonomous-in-``h`` map ``fun(s, x)``."""
    k1 = fun(0.0, x)
    k2 = fun(0.5 * h, x + 0.5 * h * k1)
    k3 = fun(0.5 * h, x + 0.5 * h * k2)
    k4 = fun(h, x + h * k3)
    return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_step(model, x, u, scenario=None, t=0.0, h=1e-3):
    """Advance the true plant by one RK4 step of length ``h`` with ``u`` held constant."""
    if not h > 0:
        raise ContractViolation(f"step must be positive, got {h}")
    x = model.check_state(x)
    u = model.check_input(u)
    x_next = rk4_step(lambda s, y: model.true_dynamics(y, u, scenario, t + s), x, h)
    if not np.all(np.isfinite(x_next)):
        raise IntegrationBlowUp(t, x)
    return x_next


def simulate(model, x0, u_fn, t_final, h, scenario=None):
    """Integrate from ``x0`` with ``u_fn(t, x)`` sampled every step; returns ``(t, X)``."""
    n = int(round(t_final / h))
    X = np.empty((n + 1, model.n_x))
    X[0] = model.check_state(x0)
    for k in range(n):
        t = k * h
        X[k + 1] = integrate_step(model, X[k], u_fn(t, X[k]), scenario, t, h)
    return np.arange(n + 1) * h, X
