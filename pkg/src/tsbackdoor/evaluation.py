"""Clean/poisoned forecasting metrics, positional error, stealth AUC and report files."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from . import numerics as nx
from .data import Scaler, SeriesDataset, WindowSpec, window_arrays
from .errors import UndefinedAUCError
from .forecasters import Forecaster
from .generators import TriggerBatch, make_batch
from .injection import AttackEvent
from .patterns import sample_offsets, unit_waveform

METRICS = ("M_c", "M_p_c", "M_p_a")


def metric_clean(model: Forecaster, dataset: SeriesDataset, scaler: Scaler, origins, window: WindowSpec):
    """MAE (raw units) over every horizon cell of the clean windows."""
    x, y = window_arrays(dataset.values, window, origins)
    pred = scaler.inverse(model.predict(scaler.transform(x)))
    return float(np.mean(np.abs(pred - y)))


@dataclass(frozen=True)
class EvalAssignment:
    """Attacked variables and offsets for every test window, drawn once per run."""

    events: tuple

    def to_dict(self):
        return [e.to_dict() for e in self.events]

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(AttackEvent.from_dict(e) for e in d))


def make_test_assignment(origins, n_vars, k, f, t_ptn, seed) -> EvalAssignment:
    rng = np.random.default_rng(seed)
    var_sets = [tuple(sorted(int(v) for v in rng.choice(n_vars, size=k, replace=False))) for _ in origins]
    offs = sample_offsets(seed + 1, origins, var_sets, f, t_ptn)
    return EvalAssignment(tuple(AttackEvent(int(t), vs, tuple(offs[(int(t), s)] for s in vs))
                                for t, vs in zip(origins, var_sets)))


@dataclass
class PoisonedEval:
    M_p_a: float
    M_p_c: float
    peak_errors: np.ndarray  # one per attacked (window, variable)
    intended_offsets: np.ndarray


def intended_pattern(clean_values, event: AttackEvent, shape, t_ptn, pattern_budget, mode="anchored_additive"):
    """(rows, cols, values) of the pattern the attacker wants in the forecast."""
    w = unit_waveform(shape, t_ptn)
    rows, cols, vals = [], [], []
    for s, off in zip(event.variables, event.offsets):
        r = np.arange(event.t + off, event.t + off + t_ptn)
        base = clean_values[event.t + off - 1, s] if mode == "anchored_additive" else 0.0
        rows.append(r)
        cols.append(np.full(t_ptn, s))
        vals.append(base + w * pattern_budget[s])
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def eval_trigger_batch(dataset: SeriesDataset, scaler: Scaler, assignment: EvalAssignment, *, window, t_tgr, t_ptn,
               t_bef, shape, pattern_budget, trigger_budget, sigma=1.0, mark_period=24.0, mode="anchored_additive"):
    """Trigger-generator inputs for the test windows; futures carry the intended pattern."""
    z = scaler.transform(dataset.values)
    batch = make_batch(z, assignment.events, f=window.f, t_tgr=t_tgr, t_ptn=t_ptn, t_bef=t_bef,
                       budget_z=trigger_budget / scaler.std, sigma=sigma, mark_period=mark_period)
    fut = batch.future.copy()
    for e, ev in enumerate(assignment.events):
        rows, cols, vals = intended_pattern(dataset.values, ev, shape, t_ptn, pattern_budget, mode)
        horizon = dataset.values[ev.t:ev.t + window.f].copy()
        horizon[rows - ev.t, cols] = vals
        hz = scaler.transform(horizon)
        for r in np.flatnonzero(batch.event_ids == e):
            fut[r] = hz[:, batch.var_ids[r]]
    return replace(batch, future=fut)


def peak_position_error(prediction, intended_offset, pattern_col, baseline=None, f=None):
    """|best-matching pattern position - intended offset| for one predicted horizon column.

    The match is a cross-correlation of (prediction - baseline) with the mean-removed
    pattern over every feasible start. A flat residual scores the maximal error f.
    """
    r = np.asarray(prediction, dtype=np.float64)
    if baseline is not None:
        r = r - np.asarray(baseline, dtype=np.float64)
    p = np.asarray(pattern_col, dtype=np.float64)
    f = r.size if f is None else f
    L = p.size
    if np.ptp(r) <= 1e-12 * (1.0 + np.max(np.abs(r))):
        return f
    tmpl = p - p.mean()
    scores = np.array([np.dot(r[d:d + L], tmpl) for d in range(r.size - L + 1)])
    return int(abs(int(np.argmax(scores)) - intended_offset))


def metric_poisoned(model: Forecaster, dataset: SeriesDataset, scaler: Scaler, assignment: EvalAssignment,
                    trigger_rows, *, window: WindowSpec, t_tgr, t_ptn, shape, pattern_budget,
                    mode="anchored_additive") -> PoisonedEval:
    """Inject each window's trigger into a copy of its input and score the forecast.

    ``trigger_rows`` holds raw trigger values, one row per (window, attacked variable)
    in assignment order. M_p^a compares against the intended pattern, M_p^c against
    the clean truth on every other horizon cell.
    """
    events = assignment.events
    origins = np.array([e.t for e in events])
    x, y = window_arrays(dataset.values, window, origins)
    x_trig = x.copy()
    tgt = y.copy()
    pmask = np.zeros(y.shape, bool)
    r = 0
    w = unit_waveform(shape, t_ptn)
    for b, ev in enumerate(events):
        for s in ev.variables:
            anchor = dataset.values[ev.t - t_tgr - 1, s]
            x_trig[b, window.h - t_tgr:, s] = anchor + trigger_rows[r]
            r += 1
        rows, cols, vals = intended_pattern(dataset.values, ev, shape, t_ptn, pattern_budget, mode)
        tgt[b, rows - ev.t, cols] = vals
        pmask[b, rows - ev.t, cols] = True
    pred = scaler.inverse(model.predict(scaler.transform(x_trig)))
    pred0 = scaler.inverse(model.predict(scaler.transform(x)))
    err = np.abs(pred - tgt)
    peaks, offs = [], []
    for b, ev in enumerate(events):
        for s, off in zip(ev.variables, ev.offsets):
            peaks.append(peak_position_error(pred[b, :, s], off, w, baseline=pred0[b, :, s], f=window.f))
            offs.append(off)
    return PoisonedEval(float(err[pmask].mean()), float(err[~pmask].mean()), np.array(peaks), np.array(offs))


# --- stealth ------------------------------------------------------------------

class StealthDetector:
    """Window autoencoder (flattened L x N -> bottleneck -> L x N); score = reconstruction error."""

    def __init__(self, n_vars, length=24, bottleneck=8, seed=0):
        rng = np.random.default_rng(seed)
        d = length * n_vars
        lim1, lim2 = np.sqrt(6.0 / (d + bottleneck)), np.sqrt(6.0 / (bottleneck + d))
        self.length, self.n_vars = length, n_vars
        self.params = {"W1": rng.uniform(-lim1, lim1, (d, bottleneck)), "b1": np.zeros(bottleneck),
                       "W2": rng.uniform(-lim2, lim2, (bottleneck, d)), "b2": np.zeros(d)}
        self.trained_on = None

    def _windows(self, z):
        idx = np.arange(z.shape[0] - self.length + 1)[:, None] + np.arange(self.length)[None, :]
        return z[idx].reshape(len(idx), -1)

    def reconstruct(self, flat, params=None):
        p = params if params is not None else {k: nx.const(v) for k, v in self.params.items()}
        return nx.tanh(nx.const(flat) @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"]

    def fit(self, z_clean, epochs=100, batch_size=32, lr=1e-3, seed=0, split="test"):
        X = self._windows(np.asarray(z_clean))
        rng = np.random.default_rng(seed)
        opt = nx.Adam(lr=lr)
        names = list(self.params)
        for _ in range(epochs):
            order = rng.permutation(len(X))
            for i in range(0, len(order), batch_size):
                xb = X[order[i:i + batch_size]]
                nodes = {k: nx.var(v) for k, v in self.params.items()}
                loss = nx.square(self.reconstruct(xb, nodes) - xb).mean()
                grads = nx.eval_backward(loss, [nodes[k] for k in names])
                self.params = dict(zip(names, opt.step([self.params[k] for k in names], grads)))
        self.trained_on = split
        return self

    def scores(self, z):
        """Per-timestamp mean squared reconstruction error over all windows covering it."""
        z = np.asarray(z)
        X = self._windows(z)
        err = (self.reconstruct(X).value - X) ** 2
        err = err.reshape(len(X), self.length, self.n_vars).mean(axis=2)
        total = np.zeros(z.shape[0])
        count = np.zeros(z.shape[0])
        for k in range(self.length):
            total[k:k + len(X)] += err[:, k]
            count[k:k + len(X)] += 1
        return total / count


def auc(labels, scores):
    """ROC AUC from the Mann-Whitney rank statistic, ties averaged."""
    labels = np.asarray(labels, bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC needs both positive and negative labels")
    ranks = rankdata(np.asarray(scores, dtype=np.float64))
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def stealth_auc(detector: StealthDetector, poisoned_z_train, trigger_mask_train):
    labels = np.asarray(trigger_mask_train).any(axis=1)
    return auc(labels, detector.scores(poisoned_z_train))


# --- reports ------------------------------------------------------------------

def report_rows(report):
    rows = []
    for res in report.get("results", []):
        for m in METRICS:
            if m in res:
                rows.append((res["method"], res["model"], m, res[m]))
    return rows


def emit_report(report: dict, path):
    """Write ``report`` as JSON plus a ``method,model,metric,value`` CSV beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    csv_path = path.with_suffix(".csv")
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "model", "metric", "value"])
        for row in report_rows(report):
            w.writerow([row[0], row[1], row[2], repr(float(row[3]))])
    return path, csv_path


def load_report(path):
    with Path(path).open(encoding="utf-8") as fh:
        return json.load(fh)
