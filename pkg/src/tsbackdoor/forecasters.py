"""Small differentiable forecasters used as attacker surrogate and as victim models."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .data import WindowSpec, window_arrays
from .errors import ContractViolation, NumericError

log = logging.getLogger(__name__)

KINDS = ("linear", "mlp")


@dataclass(frozen=True)
class ForecasterSpec:
    kind: str = "mlp"
    hidden: int = 64
    activation: str = "relu"
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    patience: int = 10

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown forecaster kind {self.kind!r}")
        if self.activation not in nx.ACTIVATIONS:
            raise ContractViolation(f"unknown activation {self.activation!r}")


class Forecaster:
    """Maps B x h x N inputs to B x f x N forecasts.

    ``linear``: one h->f map shared by all variables plus a per-variable bias.
    ``mlp``: flattened h*N -> hidden -> f*N.
    """

    def __init__(self, spec: ForecasterSpec, h, f, n_vars, params, history=None):
        self.spec, self.h, self.f, self.n_vars = spec, h, f, n_vars
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.history = list(history or [])

    @property
    def names(self):
        return list(self.params)

    def forward(self, x, params=None):
        """Graph-building forward pass; ``params`` maps names to Nodes (default: constants)."""
        p = params if params is not None else {k: nx.const(v) for k, v in self.params.items()}
        x = nx.const(x) if not isinstance(x, nx.Node) else x
        if x.value.ndim != 3 or x.value.shape[1:] != (self.h, self.n_vars):
            raise ContractViolation(f"expected input (B, {self.h}, {self.n_vars}), got {x.value.shape}")
        B = x.value.shape[0]
        if self.spec.kind == "linear":
            y = nx.transpose(x, (0, 2, 1)) @ p["W"]
            return nx.transpose(y, (0, 2, 1)) + p["b"]
        hid = nx.activation(x.reshape(B, self.h * self.n_vars) @ p["W1"] + p["b1"], self.spec.activation)
        return (hid @ p["W2"] + p["b2"]).reshape(B, self.f, self.n_vars)

    def predict(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 2
        out = self.forward(x[None] if single else x).value
        return out[0] if single else out

    def copy(self):
        return Forecaster(self.spec, self.h, self.f, self.n_vars,
                          {k: v.copy() for k, v in self.params.items()}, self.history)

    def to_dict(self):
        return {"spec": asdict(self.spec), "h": self.h, "f": self.f, "n_vars": self.n_vars,
                "params": {k: v.tolist() for k, v in self.params.items()}, "history": self.history}

    @classmethod
    def from_dict(cls, d):
        return cls(ForecasterSpec(**d["spec"]), d["h"], d["f"], d["n_vars"],
                   {k: np.asarray(v) for k, v in d["params"].items()}, d.get("history"))


def _glorot(rng, fan_in, fan_out):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_in, fan_out))


def init_forecaster(spec: ForecasterSpec, window: WindowSpec, n_vars, seed=0) -> Forecaster:
    rng = np.random.default_rng(seed)
    h, f = window.h, window.f
    if spec.kind == "linear":
        params = {"W": _glorot(rng, h, f), "b": np.zeros(n_vars)}
    else:
        params = {"W1": _glorot(rng, h * n_vars, spec.hidden), "b1": np.zeros(spec.hidden),
                  "W2": _glorot(rng, spec.hidden, f * n_vars), "b2": np.zeros(f * n_vars)}
    return Forecaster(spec, h, f, n_vars, params)


def mae(model: Forecaster, values, origins, batch=512):
    window = WindowSpec(model.h, model.f)
    total, count = 0.0, 0
    for i in range(0, len(origins), batch):
        x, y = window_arrays(values, window, origins[i:i + batch])
        total += np.abs(model.predict(x) - y).sum()
        count += y.size
    return total / max(count, 1)


def train(spec: ForecasterSpec, values, train_origins, window: WindowSpec, *, seed=0, val_values=None,
          val_origins=None, init: Forecaster | None = None, epochs=None, early_stop=True) -> Forecaster:
    """Plain minibatch MSE training with Adam.

    Early stopping watches validation MAE (when validation windows are given) and
    restores the best weights. ``init`` warm-starts from an existing model.
    """
    values = np.asarray(values, dtype=np.float64)
    train_origins = np.asarray(train_origins)
    if len(train_origins) == 0:
        raise ContractViolation("no training windows")
    model = init.copy() if init is not None else init_forecaster(spec, window, values.shape[1], seed)
    rng = np.random.default_rng(seed + 7919)
    opt = nx.Adam(lr=spec.lr)
    names = model.names
    xs, ys = window_arrays(values, window, train_origins)
    use_val = early_stop and val_origins is not None and len(val_origins) > 0
    best, best_params, bad = np.inf, None, 0
    history = list(model.history)
    n_epochs = spec.epochs if epochs is None else epochs
    for epoch in range(n_epochs):
        order = rng.permutation(len(train_origins))
        for i in range(0, len(order), spec.batch_size):
            idx = order[i:i + spec.batch_size]
            nodes = {k: nx.var(model.params[k]) for k in names}
            diff = model.forward(xs[idx], nodes) - ys[idx]
            loss = nx.square(diff).mean()
            if not np.isfinite(loss.value):
                raise NumericError(f"training loss diverged at epoch {epoch}")
            grads = nx.eval_backward(loss, [nodes[k] for k in names])
            new = opt.step([model.params[k] for k in names], grads)
            model.params = dict(zip(names, new))
        rec = {"epoch": len(history), "train_mae": float(np.mean(np.abs(model.predict(xs) - ys)))}
        if use_val:
            rec["val_mae"] = float(mae(model, val_values, val_origins))
        history.append(rec)
        if use_val:
            if rec["val_mae"] < best - 1e-12:
                best, best_params, bad = rec["val_mae"], {k: v.copy() for k, v in model.params.items()}, 0
            else:
                bad += 1
                if bad >= spec.patience:
                    break
    if use_val and best_params is not None:
        model.params = best_params
    model.history = history
    return model


def window_errors(model: Forecaster, values, origins):
    """Per-timestamp MAE over each window's f x N horizon."""
    x, y = window_arrays(values, WindowSpec(model.h, model.f), origins)
    return np.abs(model.predict(x) - y).mean(axis=(1, 2))
