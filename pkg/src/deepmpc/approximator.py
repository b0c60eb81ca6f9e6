"""Feed-forward approximator trained by sign-only gradient steps.

The same class backs both learned quantities of the controller: the
uncertainty estimate (state -> actuated-channel residual) and the value
estimate (state deviation -> cost-to-go).

Every parameter moves by exactly ``step_size`` (or not at all) per update,
whatever the gradient magnitude, so vanishing or exploding gradients cannot
stall or blow up training.
"""

from __future__ import annotations

import copy
import json

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ContractViolation

FORMAT = "deepmpc-approximator/1"


class SignGradientRegressor(RegressorMixin, BaseEstimator):
    """Tanh MLP with an identity output layer, trained by sign descent.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
        Width of each hidden layer.
    step_size : float
        Per-parameter step ``eta`` of the sign update.
    max_epochs : int
        Full-batch sign steps taken by :meth:`fit`.
    init_scale : float
        Weights and biases start uniform in ``[-init_scale, init_scale]``.
    keep_best : bool
        If true, :meth:`fit` and :meth:`partial_fit` keep the lowest-loss
        iterate seen (the starting point included), so training loss on the
        batch never increases.
    batch_size : int or None
        Samples per sign step within an epoch; ``None`` uses the full batch.
        Full-batch sign steps tend to lock into a period-two cycle in which
        every weight flips with the sign of the mean residual; shuffled
        mini-batches break that cycle.
    random_state : int or None
        Seed for the initialisation and the mini-batch shuffling.
    """

    def __init__(self, hidden_layer_sizes=(32, 32), step_size=1e-3, max_epochs=200, init_scale=0.1,
                 keep_best=True, batch_size=None, random_state=None):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.step_size = step_size
        self.max_epochs = max_epochs
        self.init_scale = init_scale
        self.keep_best = keep_best
        self.batch_size = batch_size
        self.random_state = random_state

    # -- construction -----------------------------------------------------

    def initialize(self, n_features, n_outputs=1):
        """Allocate seeded weights for the given input/output widths."""
        if not self.step_size > 0:
            raise ContractViolation(f"step_size must be positive, got {self.step_size}")
        sizes = [int(n_features), *(int(h) for h in self.hidden_layer_sizes), int(n_outputs)]
        if any(s <= 0 for s in sizes):
            raise ContractViolation(f"layer sizes must be positive, got {sizes}")
        rng = np.random.default_rng(self.random_state)
        s = self.init_scale
        self.coefs_ = [rng.uniform(-s, s, size=(a, b)) for a, b in zip(sizes[:-1], sizes[1:])]
        self.intercepts_ = [rng.uniform(-s, s, size=b) for b in sizes[1:]]
        self.layer_sizes_ = sizes
        self.n_features_in_ = sizes[0]
        self.n_outputs_ = sizes[-1]
        self._shuffle_rng = rng
        return self

    @classmethod
    def from_weights(cls, coefs, intercepts, **params):
        """Build a network with explicitly given layers (``W`` shaped ``(n_in, n_out)``)."""
        coefs = [np.array(W, dtype=float) for W in coefs]
        intercepts = [np.array(b, dtype=float) for b in intercepts]
        if len(coefs) != len(intercepts) or not coefs:
            raise ContractViolation("need one bias vector per weight matrix")
        sizes = [coefs[0].shape[0]]
        for W, b in zip(coefs, intercepts):
            if W.ndim != 2 or W.shape[0] != sizes[-1] or b.shape != (W.shape[1],):
                raise ContractViolation("incompatible consecutive layer shapes")
            sizes.append(W.shape[1])
        params.setdefault("hidden_layer_sizes", tuple(sizes[1:-1]))
        net = cls(**params)
        net.coefs_, net.intercepts_ = coefs, intercepts
        net.layer_sizes_ = sizes
        net.n_features_in_, net.n_outputs_ = sizes[0], sizes[-1]
        return net

    # -- parameters -------------------------------------------------------

    @property
    def parameters(self):
        """Parameter arrays in order ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for W, b in zip(self.coefs_, self.intercepts_):
            out += [W, b]
        return out

    def get_flat_weights(self):
        return np.concatenate([p.ravel() for p in self.parameters])

    def set_flat_weights(self, flat):
        flat = np.asarray(flat, dtype=float)
        n = sum(p.size for p in self.parameters)
        if flat.shape != (n,):
            raise ContractViolation(f"expected {n} weights, got shape {flat.shape}")
        i = 0
        for p in self.parameters:
            p[...] = flat[i : i + p.size].reshape(p.shape)
            i += p.size
        return self

    def snapshot(self):
        """Independent copy safe to hand to concurrent readers."""
        return copy.deepcopy(self)

    # -- evaluation -------------------------------------------------------

    def _check_input(self, x):
        check_is_fitted(self, "coefs_")
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        if X.ndim != 2 or X.shape[1] != self.n_features_in_:
            raise ContractViolation(f"expected input with {self.n_features_in_} features, got shape {x.shape}")
        return X, single

    def _activations(self, X):
        acts = [X]
        last = len(self.coefs_) - 1
        for i, (W, b) in enumerate(zip(self.coefs_, self.intercepts_)):
            z = acts[-1] @ W + b
            acts.append(z if i == last else np.tanh(z))
        return acts

    def forward(self, x):
        """Network output; a 1-D input gives a 1-D output of length ``n_outputs_``."""
        X, single = self._check_input(x)
        out = self._activations(X)[-1]
        return out[0] if single else out

    def input_jacobian(self, x):
        """``d forward(x) / d x`` for a single input, shape ``(n_outputs, n_features)``."""
        X, _ = self._check_input(x)
        acts = self._activations(X)
        J = self.coefs_[-1].T  # (n_out, n_h)
        for i in range(len(self.coefs_) - 2, -1, -1):
            J = (J * (1.0 - acts[i + 1][0] ** 2)) @ self.coefs_[i].T
        return J

    def loss(self, X, y):
        """Sum over samples of ``||forward(x) - y||^2``."""
        X, _ = self._check_input(X)
        Y = np.asarray(y, dtype=float).reshape(X.shape[0], -1)
        r = self._activations(X)[-1] - Y
        return float(np.sum(r * r))

    def gradient_of_loss(self, x, target):
        """Exact gradient of ``sum ||forward(x) - target||^2`` w.r.t. all parameters.

        Returns a list matching :attr:`parameters`.
        """
        X, _ = self._check_input(x)
        T = np.asarray(target, dtype=float).reshape(X.shape[0], -1)
        if T.shape[1] != self.n_outputs_:
            raise ContractViolation(f"target must have {self.n_outputs_} outputs, got {T.shape[1]}")
        acts = self._activations(X)
        delta = 2.0 * (acts[-1] - T)
        grads = []
        for i in range(len(self.coefs_) - 1, -1, -1):
            grads.append(delta.sum(axis=0))
            grads.append(acts[i].T @ delta)
            if i > 0:
                delta = (delta @ self.coefs_[i].T) * (1.0 - acts[i] ** 2)
        grads.reverse()
        # reversed list is [W0, b0, ...] because each layer pushed (b, W)
        return grads

    def sign_update(self, gradient):
        """In place ``w <- w - step_size * sign(g)`` for every parameter; ``sign(0) = 0``."""
        params = self.parameters
        if len(gradient) != len(params):
            raise ContractViolation(f"expected {len(params)} gradient arrays, got {len(gradient)}")
        for p, g in zip(params, gradient):
            g = np.asarray(g, dtype=float)
            if g.shape != p.shape:
                raise ContractViolation(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
        for p, g in zip(params, gradient):
            p -= self.step_size * np.sign(g)
        return self

    # -- estimator API ----------------------------------------------------

    def _validate_xy(self, X, y):
        X, y = check_X_y(X, y, multi_output=True, y_numeric=True)
        if y.ndim == 1:
            self._y_1d = True
            y = y[:, None]
        else:
            self._y_1d = False
        return X, y

    def _epochs(self, X, y, n):
        best_loss = self.loss(X, y)
        best = self.get_flat_weights() if self.keep_best else None
        self.loss_curve_ = [best_loss]
        m = X.shape[0]
        bs = m if self.batch_size is None else max(1, min(int(self.batch_size), m))
        if bs < m and not hasattr(self, "_shuffle_rng"):
            self._shuffle_rng = np.random.default_rng(self.random_state)
        for _ in range(n):
            if bs == m:
                self.sign_update(self.gradient_of_loss(X, y))
            else:
                order = self._shuffle_rng.permutation(m)
                for start in range(0, m, bs):
                    idx = order[start : start + bs]
                    self.sign_update(self.gradient_of_loss(X[idx], y[idx]))
            cur = self.loss(X, y)
            self.loss_curve_.append(cur)
            if self.keep_best and cur < best_loss:
                best_loss, best = cur, self.get_flat_weights()
        if self.keep_best:
            self.set_flat_weights(best)
        return self

    def fit(self, X, y):
        X, y = self._validate_xy(X, y)
        self.initialize(X.shape[1], y.shape[1])
        return self._epochs(X, y, self.max_epochs)

    def partial_fit(self, X, y, epochs=1):
        X, y = self._validate_xy(X, y)
        if not hasattr(self, "coefs_"):
            self.initialize(X.shape[1], y.shape[1])
        return self._epochs(X, y, epochs)

    def predict(self, X):
        check_is_fitted(self, "coefs_")
        X = check_array(X)
        out = self.forward(X)
        if getattr(self, "_y_1d", self.n_outputs_ == 1):
            return out[:, 0]
        return out

    # -- serialisation ----------------------------------------------------

    def to_dict(self):
        check_is_fitted(self, "coefs_")
        return {
            "format": FORMAT,
            "layer_sizes": list(self.layer_sizes_),
            "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()},
            "weights": self.get_flat_weights().tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("format") != FORMAT:
            raise ContractViolation(f"unsupported snapshot format {d.get('format')!r}")
        params = dict(d.get("params", {}))
        if "hidden_layer_sizes" in params:
            params["hidden_layer_sizes"] = tuple(params["hidden_layer_sizes"])
        sizes = d["layer_sizes"]
        if tuple(sizes[1:-1]) != tuple(params.get("hidden_layer_sizes", sizes[1:-1])):
            raise ContractViolation("layer-shape header disagrees with hidden_layer_sizes")
        params["hidden_layer_sizes"] = tuple(sizes[1:-1])
        net = cls(**params).initialize(sizes[0], sizes[-1])
        net.set_flat_weights(np.array(d["weights"], dtype=float))
        return net

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))
