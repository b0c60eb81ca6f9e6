"""Episode loop that learns a terminal value for the MPC from its own closed-loop costs.

Each episode samples an initial state, runs the receding-horizon controller
for ``L`` steps and stores ``(x, u, c, x')`` transitions. The value estimate
is then regressed toward the empirical undiscounted cost-to-go of each
stored state and fed back to the MPC as a terminal cost.
"""

from __future__ import annotations

import csv
import logging
import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np

from .approximator import SignGradientRegressor
from .exceptions import ContractViolation, DeepMPCError
from .rmpc import LinearConstraints, LinearNominalModel, MpcConfig, RobustMPC

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TransitionTuple:
    x: np.ndarray
    u: np.ndarray
    c: float
    x_next: np.ndarray
    t: float
    episode: int = 0
    reference: np.ndarray = None  # steady state the cost is measured against

    def __post_init__(self):
        if not self.c >= 0:
            raise ContractViolation(f"running cost must be nonnegative, got {self.c}")
        if not np.all(np.isfinite(self.x_next)):
            raise ContractViolation("x_next must be finite")


class Buffer:
    """FIFO transition store with bounded capacity."""

    def __init__(self, capacity=100_000):
        if capacity < 1:
            raise ContractViolation("capacity must be positive")
        self.capacity = int(capacity)
        self._items = deque(maxlen=self.capacity)

    def append(self, item):
        self._items.append(item)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def episodes(self):
        """Contiguous runs of tuples sharing an episode id, in insertion order."""
        runs, cur, cur_id = [], [], None
        for tr in self._items:
            if cur and tr.episode != cur_id:
                runs.append(cur)
                cur = []
            cur.append(tr)
            cur_id = tr.episode
        if cur:
            runs.append(cur)
        return runs


def cost_to_go(costs):
    """Backward recursion ``target[k] = c[k] + target[k+1]`` with ``target[L] = 0``."""
    costs = np.asarray(costs, dtype=float)
    out = np.empty_like(costs)
    acc = 0.0
    for k in range(len(costs) - 1, -1, -1):
        acc = costs[k] + acc
        out[k] = acc
    return out


def value_targets(buffer):
    """Training inputs (state deviations) and cost-to-go targets for every stored tuple."""
    X, y = [], []
    for run in buffer.episodes():
        targets = cost_to_go([tr.c for tr in run])
        for tr, target in zip(run, targets):
            ref = np.zeros_like(tr.x) if tr.reference is None else tr.reference
            X.append(tr.x - ref)
            y.append(target)
    return np.array(X), np.array(y)


class ValueEstimate:
    """Nonnegative value ``V(d) = scale * net(d / input_scale)**2`` of a state deviation ``d``.

    The network regresses ``sqrt(target / scale)``; squaring keeps the
    estimate nonnegative away from the data, where a plain regressor can
    extrapolate below zero and make the controller steer toward unexplored
    states. ``scale`` is fixed at the first update from the largest target,
    and ``input_scale`` (unless given) from the largest deviation per coordinate.
    """

    def __init__(self, n_x, hidden_layer_sizes=(32, 32), step_size=3e-3, epochs=50, batch_size=16,
                 input_scale=None, random_state=None, hessian_eps=1e-4):
        self.n_x = int(n_x)
        self.net = SignGradientRegressor(hidden_layer_sizes=hidden_layer_sizes, step_size=step_size,
                                         max_epochs=epochs, batch_size=batch_size,
                                         random_state=random_state).initialize(self.n_x, 1)
        self.epochs = int(epochs)
        self._fixed_input_scale = input_scale is not None
        self.input_scale = np.ones(self.n_x) if input_scale is None else \
            np.broadcast_to(np.asarray(input_scale, dtype=float), (self.n_x,)).copy()
        self.scale = None
        self.hessian_eps = hessian_eps

    @property
    def output_scale(self):
        return 1.0 if self.scale is None else self.scale

    def __call__(self, d):
        r = self.net.forward(np.asarray(d) / self.input_scale)[0]
        return float(self.output_scale * r * r)

    def gradient(self, d):
        z = np.asarray(d) / self.input_scale
        r = self.net.forward(z)[0]
        J = self.net.input_jacobian(z)[0]
        return 2.0 * self.output_scale * r * J / self.input_scale

    def hessian_psd(self, d):
        """Central-difference Hessian projected onto the PSD cone."""
        d = np.asarray(d, dtype=float)
        eps = self.hessian_eps * self.input_scale
        H = np.empty((self.n_x, self.n_x))
        for i in range(self.n_x):
            e = np.zeros(self.n_x)
            e[i] = eps[i]
            H[:, i] = (self.gradient(d + e) - self.gradient(d - e)) / (2.0 * eps[i])
        H = 0.5 * (H + H.T)
        w, U = np.linalg.eigh(H)
        return (U * np.maximum(w, 0.0)) @ U.T

    def _net_targets(self, y):
        return np.sqrt(np.maximum(y, 0.0) / self.output_scale)

    def batch_loss(self, X, y):
        """Mean squared error of the network in its (square-root, scaled) target units."""
        X = np.asarray(X, dtype=float)
        return self.net.loss(X / self.input_scale, self._net_targets(np.asarray(y, dtype=float))) / max(len(y), 1)

    def fit_targets(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y, dtype=float)
        if self.scale is None:
            self.scale = max(float(np.abs(y).max()), 1e-12)
            if not self._fixed_input_scale:
                self.input_scale = np.maximum(np.abs(X).max(axis=0), 1e-12)
        # anchor: zero deviation carries zero cost-to-go
        Xa = np.vstack([X, np.zeros((1, self.n_x))]) / self.input_scale
        ya = self._net_targets(np.concatenate([y, [0.0]]))
        before = self.net.loss(Xa, ya)
        self.net.partial_fit(Xa, ya, epochs=self.epochs)
        after = self.net.loss(Xa, ya)
        return before / len(ya), after / len(ya)

    def snapshot(self):
        v = ValueEstimate.__new__(ValueEstimate)
        v.__dict__.update(self.__dict__)
        v.net = self.net.snapshot()
        v.input_scale = self.input_scale.copy()
        return v

    def to_dict(self):
        return {"n_x": self.n_x, "scale": self.scale, "input_scale": self.input_scale.tolist(),
                "epochs": self.epochs, "net": self.net.to_dict()}

    @classmethod
    def from_dict(cls, d):
        v = cls.__new__(cls)
        v.n_x = int(d["n_x"])
        v.scale = d["scale"]
        v.input_scale = np.asarray(d["input_scale"], dtype=float)
        v.epochs = int(d["epochs"])
        v.hessian_eps = 1e-4
        v._fixed_input_scale = True
        v.net = SignGradientRegressor.from_dict(d["net"])
        return v


def update_value(buffer, value):
    """Regress ``value`` toward cost-to-go targets from ``buffer``.

    Returns ``(value, loss_before, loss_after)``; an empty buffer is a no-op.
    The loss never increases because the regressor keeps its best iterate.
    """
    if len(buffer) == 0:
        warnings.warn("empty buffer; value estimate left unchanged", RuntimeWarning, stacklevel=2)
        return value, float("nan"), float("nan")
    X, y = value_targets(buffer)
    before, after = value.fit_targets(X, y)
    return value, before, after


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------


class EpisodeAborted(DeepMPCError):
    def __init__(self, step, cause):
        self.step = step
        self.cause = cause
        super().__init__(f"episode aborted at step {step}: {cause}")


def run_episode(env, controller, L, buffer, rng=None, episode=0):
    """Reset ``env``, run ``L`` controller steps and append ``L`` transitions.

    On controller failure the partial episode stays in the buffer and
    :class:`EpisodeAborted` is raised.
    """
    if L < 1:
        raise ContractViolation("episode length must be at least 1")
    x = env.reset(rng)
    if hasattr(controller, "reset"):
        controller.reset()
    for k in range(L):
        try:
            u = controller(x, env.target)
        except DeepMPCError as exc:
            raise EpisodeAborted(k, exc) from exc
        x_next = env.step(x, u, rng)
        c = env.stage_cost(x_next, u)
        buffer.append(TransitionTuple(x=x.copy(), u=np.array(u, copy=True), c=c, x_next=x_next.copy(),
                                      t=k * env.dt, episode=episode, reference=env.steady_state))
        x = x_next
    return buffer


class IntegratorTask:
    """Disturbed scalar integrator ``x+ = x + dt v + w`` regulated to ``target``.

    Initial states are drawn with random sign and magnitude in ``x0_range``.
    Running cost is ``Q (x' - x_s)^2 + R (v - v_s)^2``.
    """

    def __init__(self, Q=1.0, R=10.0, target=0.0, x0_range=(2.0, 4.0), w_max=0.0, dt=1.0):
        self.Q, self.R = float(Q), float(R)
        self.target = np.array([float(target)])
        self.x0_range = x0_range
        self.w_max = float(w_max)
        self.dt = float(dt)

    @property
    def steady_state(self):
        return self.target.copy()

    def reset(self, rng):
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        lo, hi = self.x0_range
        return np.array([rng.choice([-1.0, 1.0]) * rng.uniform(lo, hi)])

    def step(self, x, u, rng=None):
        w = 0.0
        if self.w_max > 0:
            w = rng.uniform(-self.w_max, self.w_max)
        return x + self.dt * np.asarray(u) + w

    def stage_cost(self, x_next, u):
        dx = x_next - self.target
        return float(self.Q * dx @ dx + self.R * np.asarray(u) @ np.asarray(u))

    def controller(self, N=1, alpha=100.0, T=100.0, u_max=1.0, value_fn=None, max_iter=200):
        model = LinearNominalModel.integrator(self.dt)
        cfg = MpcConfig(N=N, Q=[[self.Q]], R=[[self.R]], T=[[T]], alpha=alpha,
                        constraints=LinearConstraints.box(1, 1, "input", -u_max, u_max), max_iter=max_iter)
        # a nonconvex learned terminal cost can slow SQP to first-order rates
        return RobustMPC(model, cfg, value_fn=value_fn, accept_unconverged=value_fn is not None)

    @classmethod
    def from_dict(cls, d):
        keys = ("Q", "R", "target", "w_max", "dt")
        kw = {k: d[k] for k in keys if k in d}
        if "x0_range" in d:
            kw["x0_range"] = tuple(d["x0_range"])
        return cls(**kw)


class _MpcPolicy:
    def __init__(self, mpc):
        self.mpc = mpc

    def reset(self):
        self.mpc.reset()

    def __call__(self, x, target):
        return self.mpc(x, target)


@dataclass
class LearningCurve:
    episode: list
    total_cost: list
    value_loss: list

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["episode", "total_cost", "value_loss"])
            for row in zip(self.episode, self.total_cost, self.value_loss):
                w.writerow([row[0], repr(float(row[1])), repr(float(row[2]))])


def train(env, episodes, L, seed=0, controller_kwargs=None, value_kwargs=None, use_value=True, buffer_capacity=None):
    """Alternate :func:`run_episode` and :func:`update_value`.

    Returns ``(value, curve)``. With ``use_value=False`` the value estimate is
    still trained but never enters the controller (plain receding horizon).
    """
    if episodes < 1:
        raise ContractViolation("need at least one episode")
    rng = np.random.default_rng(seed)
    value_kwargs = {"random_state": seed, **(value_kwargs or {})}
    n_x = len(env.steady_state)
    value = ValueEstimate(n_x, **value_kwargs)
    mpc = env.controller(value_fn=value if use_value else None, **(controller_kwargs or {}))
    policy = _MpcPolicy(mpc)
    buffer = Buffer(buffer_capacity or max(episodes * L, 1))
    curve = LearningCurve([], [], [])
    for ep in range(episodes):
        try:
            run_episode(env, policy, L, buffer, rng, episode=ep)
        except EpisodeAborted as exc:
            log.warning("%s", exc)
        total = float(sum(tr.c for tr in buffer if tr.episode == ep))
        _, _, loss = update_value(buffer, value)
        curve.episode.append(ep)
        curve.total_cost.append(total)
        curve.value_loss.append(loss)
    return value, curve
