"""Scenario runner: closed-loop simulation, trajectory logs, metrics and exports.

A run couples four pieces at two rates. Every integration step the plant and
the observer advance together and the uncertainty approximator takes one
sign step. Every control period the inversion law is re-evaluated (and held),
and in the MPC modes the robust MPC refreshes the nominal input ``u_L`` that
drives the reference model producing ``x_d``.

Controller modes
----------------
``inversion``
    ``x_d`` follows the quintic path exactly, ``u_L`` is its reference-model
    feedforward; uncertainty learning on.
``rmpc``
    Robust MPC on the reference model chooses ``u_L``; the inversion law uses
    the known dynamics only (no learning).
``adaptive``
    As ``rmpc`` plus uncertainty learning and a value estimate trained online
    from the run's own transitions and used as the MPC terminal cost.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .adaptive_loop import Buffer, TransitionTuple, ValueEstimate, update_value
from .approximator import SignGradientRegressor
from .exceptions import ConfigurationError, ContractViolation, DeepMPCError
from .inversion import ReferenceModel, augment_slack, inversion_control, second_order_gain
from .observer import ModifiedStateObserver, error_triple
from .plant import PlanarArm, canonical_scenario_paths, load_scenario, rk4_step
from .rmpc import LinearNominalModel, MpcConfig, RobustMPC

log = logging.getLogger(__name__)

CONTROLLERS = ("inversion", "rmpc", "adaptive")


# ---------------------------------------------------------------------------
# Reference paths
# ---------------------------------------------------------------------------


class QuinticPath:
    """Piecewise quintic joint path through ``waypoints`` at ``times``.

    Each segment uses the rest-to-rest blend ``10 s^3 - 15 s^4 + 6 s^5``, so
    velocity and acceleration vanish at every waypoint. The path holds the
    first waypoint before ``times[0]`` and the last one after ``times[-1]``.
    """

    def __init__(self, times, waypoints):
        self.times = np.asarray(times, dtype=float)
        self.waypoints = np.atleast_2d(np.asarray(waypoints, dtype=float))
        if self.times.ndim != 1 or self.times.size != self.waypoints.shape[0] or self.times.size < 1:
            raise ConfigurationError("path needs one time per waypoint")
        if np.any(np.diff(self.times) <= 0):
            raise ConfigurationError("path times must be strictly increasing")

    @property
    def n(self):
        return self.waypoints.shape[1]

    def __call__(self, t):
        """``(q, qd, qdd)`` at time ``t``."""
        T, W = self.times, self.waypoints
        zero = np.zeros(self.n)
        if t <= T[0]:
            return W[0].copy(), zero, zero.copy()
        if t >= T[-1]:
            return W[-1].copy(), zero, zero.copy()
        i = int(np.searchsorted(T, t, side="right")) - 1
        dur = T[i + 1] - T[i]
        s = (t - T[i]) / dur
        blend = 10 * s**3 - 15 * s**4 + 6 * s**5
        dblend = (30 * s**2 - 60 * s**3 + 30 * s**4) / dur
        ddblend = (60 * s - 180 * s**2 + 120 * s**3) / dur**2
        dq = W[i + 1] - W[i]
        return W[i] + blend * dq, dblend * dq, ddblend * dq

    @classmethod
    def from_dict(cls, d):
        return cls(d["times"], d["waypoints"])


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """One closed-loop run.

    ``scenario`` is a JSON path or a canonical scenario number 1..6.
    ``duration`` of ``None`` takes the value from the scenario file.
    """

    scenario: str
    controller: str = "adaptive"
    duration: float = None
    control_period: float = 0.01
    substeps: int = 10
    seed: int = 0
    integration_step: float = None

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ConfigurationError(f"controller must be one of {CONTROLLERS}, got {self.controller!r}")
        if self.duration is not None and not self.duration > 0:
            raise ConfigurationError(f"duration must be positive, got {self.duration}")
        if not self.control_period > 0:
            raise ConfigurationError("control period must be positive")
        if int(self.substeps) < 1:
            raise ConfigurationError("substeps must be a positive integer")
        self.substeps = int(self.substeps)
        h = self.control_period / self.substeps
        if self.integration_step is None:
            self.integration_step = h
        elif not math.isclose(self.integration_step * self.substeps, self.control_period, rel_tol=1e-9):
            raise ConfigurationError("control period must equal integration step times substeps")

    @property
    def scenario_path(self):
        return resolve_scenario(self.scenario)


def resolve_scenario(scenario):
    """Accept a file path or a canonical scenario number."""
    s = str(scenario)
    if s.isdigit():
        paths = canonical_scenario_paths()
        idx = int(s)
        if not 1 <= idx <= len(paths):
            raise ConfigurationError(f"canonical scenarios are numbered 1..{len(paths)}, got {idx}")
        return paths[idx - 1]
    p = Path(s)
    if not p.is_file():
        raise ConfigurationError(f"scenario file not found: {p}")
    return p


# ---------------------------------------------------------------------------
# Trajectory log
# ---------------------------------------------------------------------------


def log_columns(n_x, n_u):
    cols = ["t"]
    for name, n in (("x", n_x), ("xhat", n_x), ("xd", n_x), ("u", n_u), ("er", n_x), ("ea", n_x), ("erhat", n_x)):
        cols += [f"{name}_{i}" for i in range(n)]
    return cols + ["disturbance", "f_tilde_norm", "stage_cost"]


@dataclass
class TrajectoryLog:
    """Per-control-step records with a fixed schema.

    ``disturbance`` is the summed magnitude of the pushes active at ``t``
    (their nominal amplitude, so sinusoidal pushes show as a plateau);
    ``failure`` is set when the run stopped early.
    """

    n_x: int
    n_u: int
    rows: list = field(default_factory=list)
    failure: dict = None

    @property
    def columns(self):
        return log_columns(self.n_x, self.n_u)

    def append(self, t, x, x_hat, x_d, u, disturbance, f_tilde_norm, stage_cost):
        if self.rows and not t > self.rows[-1][0]:
            raise ContractViolation("log timestamps must be strictly increasing")
        tri = error_triple(x, x_hat, x_d)
        row = np.concatenate([[t], x, x_hat, x_d, u, tri.e_r, tri.e_a, tri.e_r_hat,
                              [disturbance, f_tilde_norm, stage_cost]])
        if row.shape[0] != len(self.columns):
            raise ContractViolation("record does not match the log schema")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    @property
    def data(self):
        if not self.rows:
            return np.zeros((0, len(self.columns)))
        return np.vstack(self.rows)

    def _block(self, name, n):
        start = self.columns.index(f"{name}_0")
        return self.data[:, start : start + n]

    @property
    def t(self):
        return self.data[:, 0]

    x = property(lambda self: self._block("x", self.n_x))
    x_hat = property(lambda self: self._block("xhat", self.n_x))
    x_d = property(lambda self: self._block("xd", self.n_x))
    u = property(lambda self: self._block("u", self.n_u))
    e_r = property(lambda self: self._block("er", self.n_x))
    e_a = property(lambda self: self._block("ea", self.n_x))
    e_r_hat = property(lambda self: self._block("erhat", self.n_x))
    disturbance = property(lambda self: self.data[:, -3])
    f_tilde_norm = property(lambda self: self.data[:, -2])
    stage_cost = property(lambda self: self.data[:, -1])


def export_csv(log, path):
    """Write the log with a header row; an empty log gives a header-only file."""
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(log.columns)
            for row in log.rows:
                w.writerow([repr(float(v)) for v in row])
    except OSError as exc:
        raise OSError(f"cannot write trajectory log to {path}: {exc}") from exc
    return path


def read_csv(path):
    """Parse a CSV written by :func:`export_csv` back into a :class:`TrajectoryLog`."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [np.array([float(v) for v in r]) for r in reader if r]
    except OSError as exc:
        raise OSError(f"cannot read trajectory log {path}: {exc}") from exc
    except StopIteration:
        raise ContractViolation(f"{path} is empty (no header row)") from None
    n_x = sum(1 for c in header if c.startswith("x_"))
    n_u = sum(1 for c in header if c.startswith("u_"))
    log = TrajectoryLog(n_x, n_u)
    if header != log.columns:
        raise ContractViolation(f"{path} does not have the trajectory-log schema")
    log.rows = rows
    return log


_PLOT_TEMPLATE = '''"""Plot tracking and estimation errors from {csv_name}."""
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np

here = Path(__file__).resolve().parent
data = np.genfromtxt(here / "{csv_name}", delimiter=",", names=True)
t = data["t"]
er = np.sqrt(sum(data[f"er_{{i}}"] ** 2 for i in range({n_x})))
ea = np.sqrt(sum(data[f"ea_{{i}}"] ** 2 for i in range({n_x})))

fig, (ax1, ax2) = plt.subplots(2, 1, sharex=True, figsize=(7, 5))
ax1.semilogy(t, np.maximum(er, 1e-12), label="|e_r|")
ax1.semilogy(t, np.maximum(ea, 1e-12), label="|e_a|")
ax1.set_ylabel("error norm")
ax1.legend()
ax2.plot(t, data["disturbance"])
ax2.set_ylabel("push magnitude [N]")
ax2.set_xlabel("t [s]")
fig.tight_layout()
fig.savefig(here / "{png_name}", dpi=120)
'''


def export_plot_script(log, path, csv_name="trajectory.csv"):
    """Write a matplotlib script that reads ``csv_name`` relative to its own location."""
    path = Path(path)
    text = _PLOT_TEMPLATE.format(csv_name=csv_name, n_x=log.n_x, png_name=Path(csv_name).stem + ".png")
    try:
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write plot script to {path}: {exc}") from exc
    return path


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass
class Metrics:
    final_rms: float
    time_to_threshold: float  # None when the error never settles
    peaks: list               # [{"onset": t, "peak": value, "t_peak": t}, ...]
    total_cost: float
    threshold: float = 1e-2

    def to_dict(self):
        return asdict(self)


def compute_metrics(log, threshold=1e-2, window=0.1):
    """Metrics of ``||e_r||`` over a trajectory log.

    * ``final_rms``: RMS over the last ``window`` fraction of samples;
    * ``time_to_threshold``: first logged time after which the error stays
      below ``threshold`` (``None`` if the last sample is not below it);
    * ``peaks``: largest error between each rising edge of the disturbance
      column and the next one (or the end of the log);
    * ``total_cost``: sum of the stage-cost column.
    """
    if len(log) == 0:
        raise ContractViolation("cannot compute metrics of an empty log")
    t = log.t
    err = np.linalg.norm(log.e_r, axis=1)
    n = len(t)
    k = max(1, int(math.ceil(window * n)))
    final_rms = float(np.sqrt(np.mean(err[-k:] ** 2)))

    below = err < threshold
    if not below[-1]:
        ttt = None
    else:
        above = np.flatnonzero(~below)
        ttt = float(t[0] if above.size == 0 else t[above[-1] + 1])

    dist = log.disturbance
    active = dist > 0
    onsets = [i for i in range(n) if active[i] and (i == 0 or not active[i - 1])]
    peaks = []
    for j, i in enumerate(onsets):
        end = onsets[j + 1] if j + 1 < len(onsets) else n
        m = i + int(np.argmax(err[i:end]))
        peaks.append({"onset": float(t[i]), "peak": float(err[m]), "t_peak": float(t[m])})
    return Metrics(final_rms=final_rms, time_to_threshold=ttt, peaks=peaks,
                   total_cost=float(np.sum(log.stage_cost)), threshold=threshold)


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------


def _push_magnitude(scenario, t):
    return float(sum(np.linalg.norm(p.force) for p in scenario.pushes if p.t_start <= t < p.t_end))


def _mpc_from_dict(d, reference, n_joints, default_dt):
    dt = float(d.get("dt", default_dt))
    model = LinearNominalModel.from_reference(reference, dt, n_outputs=n_joints)
    cfg = MpcConfig.from_dict(d, model.n_x, model.n_u, model.n_y)
    cfg.max_iter = int(d.get("max_iter", cfg.max_iter))
    return model, cfg


class ScenarioRun:
    """Closed-loop simulation state for one :class:`RunConfig`; call :meth:`run`."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.scenario, self.model, self.raw = load_scenario(cfg.scenario_path)
        if not isinstance(self.model, PlanarArm):
            raise ConfigurationError("scenario runs expect a planar arm model")
        raw_run = self.raw.get("run", {})
        self.duration = float(cfg.duration if cfg.duration is not None else raw_run.get("duration", 10.0))
        if not self.duration > 0:
            raise ConfigurationError("duration must be positive")
        n = self.model.n_links
        ctrl = self.raw.get("controller", {})
        self.reference = ReferenceModel.second_order(n, float(ctrl.get("reference_omega", 2.0)),
                                                     ctrl.get("u_L"))
        self.gamma = second_order_gain(n, float(ctrl.get("Gamma_omega", 10.0)))
        self.slack = augment_slack(self.model.control_matrix)
        self.path = QuinticPath.from_dict(self.raw["path"]) if "path" in self.raw else None

        learning = cfg.controller in ("inversion", "adaptive")
        approx = None
        if learning:
            approx = SignGradientRegressor(hidden_layer_sizes=tuple(ctrl.get("hidden", (32, 32))),
                                           step_size=float(ctrl.get("eta", 1e-3)),
                                           random_state=cfg.seed).initialize(self.model.n_x, self.model.n_u)
        self.observer = ModifiedStateObserver(self.model, ctrl.get("Lambda", 50.0), approximator=approx,
                                              learning=learning)

        mpc_raw = self.raw.get("mpc", {})
        self.Q_c = np.diag(np.broadcast_to(np.asarray(mpc_raw.get("Q_diag", 1.0), float), (self.model.n_x,)))
        self.R_c = np.diag(np.broadcast_to(np.asarray(mpc_raw.get("R_diag", 1.0), float), (n,)))
        self.mpc = None
        self.value = None
        if cfg.controller in ("rmpc", "adaptive"):
            nominal, mpc_cfg = _mpc_from_dict(mpc_raw, self.reference, n, 5 * cfg.control_period)
            self.mpc_every = max(1, int(round(nominal.dt / cfg.control_period)))
            if cfg.controller == "adaptive":
                vraw = self.raw.get("value", {})
                self.value = ValueEstimate(self.model.n_x, hidden_layer_sizes=tuple(vraw.get("hidden", (32, 32))),
                                           step_size=float(vraw.get("step_size", 3e-3)),
                                           epochs=int(vraw.get("epochs", 20)),
                                           batch_size=vraw.get("batch_size", 16), random_state=cfg.seed)
                self.value_every = int(vraw.get("episode_steps", 20))
                self.buffer = Buffer(int(vraw.get("capacity", 10_000)))
            self.mpc = RobustMPC(nominal, mpc_cfg, value_fn=self.value,
                                 accept_unconverged=self.value is not None)

    # -- references ---------------------------------------------------------

    def setpoint(self, t):
        if self.path is not None:
            return self.path(t)
        z = np.zeros(self.model.n_links)
        return self.reference.u_L.copy(), z, z.copy()

    def steady_state(self, y_d):
        return np.concatenate([y_d, np.zeros(self.model.n_links)])

    def stage_cost(self, x, u_L, y_d):
        dx = x - self.steady_state(y_d)
        du = u_L - y_d
        return float(dx @ self.Q_c @ dx + du @ self.R_c @ du)

    # -- loop ---------------------------------------------------------------

    def run(self):
        cfg, model = self.cfg, self.model
        n = model.n_links
        h = cfg.integration_step
        Tc = cfg.control_period
        steps = int(round(self.duration / Tc))
        q0, _, _ = self.setpoint(0.0)
        x = np.concatenate([q0, np.zeros(n)])
        self.observer.x_hat = x.copy()
        x_d = x.copy()
        u_L = q0.copy()
        log_ = TrajectoryLog(model.n_x, model.n_u)
        pending = None  # (x, u_L, y_d, episode) awaiting its successor state
        episode = 0
        n_transitions = 0
        t = 0.0
        for k in range(steps):
            t = k * Tc
            try:
                q_p, qd_p, qdd_p = self.setpoint(t)
                y_d = q_p
                if cfg.controller == "inversion":
                    if self.path is not None:
                        x_d = np.concatenate([q_p, qd_p])
                        u_L = self.reference.feedforward(q_p, qd_p, qdd_p)
                    else:
                        u_L = self.reference.u_L
                elif k % self.mpc_every == 0:
                    if pending is not None and self.value is not None:
                        px, pu, py, pep = pending
                        self.buffer.append(TransitionTuple(x=px, u=pu, c=self.stage_cost(x, pu, py), x_next=x.copy(),
                                                           t=t, episode=pep, reference=self.steady_state(py)))
                        n_transitions += 1
                        if n_transitions % self.value_every == 0:
                            update_value(self.buffer, self.value)
                            episode += 1
                    u_L = np.asarray(self.mpc(x, y_d), dtype=float)
                    pending = (x.copy(), u_L.copy(), y_d.copy(), episode)

                xi_hat = self.observer.xi_hat(x)
                u = inversion_control(x, x_d, u_L, self.observer.f_hat_total(x, xi_hat), self.gamma,
                                      model.control_matrix, self.reference, slack=self.slack)
                f_tilde = model.control_matrix @ (model.uncertainty(x, t, self.scenario) - xi_hat)
                log_.append(t, x, self.observer.x_hat, x_d, u, _push_magnitude(self.scenario, t),
                            float(np.linalg.norm(f_tilde)), self.stage_cost(x, u_L, y_d))

                for j in range(cfg.substeps):
                    ts = t + j * h
                    x = self.observer.step(x, u, self.scenario, ts, h)
                    if cfg.controller != "inversion" or self.path is None:
                        u_hold = u_L
                        x_d = rk4_step(lambda s, z: self.reference.derivative(z, u_hold), x_d, h)
            except DeepMPCError as exc:
                log_.failure = {"t": t, "error": type(exc).__name__, "message": str(exc)}
                log.warning("run stopped at t=%.3f: %s", t, exc)
                break
        return log_


def run_scenario(cfg: RunConfig) -> TrajectoryLog:
    """Simulate ``cfg`` and return the per-control-step log (deterministic given the seed)."""
    return ScenarioRun(cfg).run()


def write_metrics(metrics, path):
    Path(path).write_text(json.dumps(metrics.to_dict(), indent=2))
