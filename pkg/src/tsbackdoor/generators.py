"""Trigger sources: two learnable position-guided generators and two fixed baselines.

All sources work on a :class:`TriggerBatch`, where each row is one
(event, attacked variable) pair, and return trigger rows of length t_tgr.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractViolation, InsufficientDataError
from .injection import AttackEvent
from .patterns import guidance_columns

SOURCES = ("gcn", "inverse", "random", "manhattan")


@dataclass(frozen=True, eq=False)
class TriggerBatch:
    events: tuple
    event_ids: np.ndarray  # R
    var_ids: np.ndarray  # R
    context: np.ndarray  # R x t_bef, z-scored history before the trigger
    future: np.ndarray  # R x f, z-scored horizon containing the pattern
    guidance: np.ndarray  # R x f
    marks: np.ndarray  # R x 2f
    budget: np.ndarray  # R, trigger budget in z units

    @property
    def rows(self):
        return self.var_ids.size

    def split(self, rows):
        """Per-event t_tgr x |S_i| matrices from stacked rows."""
        rows = np.asarray(rows)
        return [rows[self.event_ids == e].T.copy() for e in range(len(self.events))]


def time_marks(t, f, period):
    steps = t + np.arange(f)
    ang = 2.0 * np.pi * steps / period
    return np.concatenate([np.sin(ang), np.cos(ang)])


def make_batch(values_z, events, *, f, t_tgr, t_ptn, t_bef, budget_z, sigma=1.0, mark_period=24.0,
               future_z=None) -> TriggerBatch:
    """Gather generator inputs for each event from a z-scored T x N matrix.

    ``future_z`` (if given) supplies the pattern-bearing horizon; defaults to ``values_z``.
    """
    values_z = np.asarray(values_z)
    future_z = values_z if future_z is None else np.asarray(future_z)
    budget_z = np.asarray(budget_z, dtype=np.float64)
    ev_ids, var_ids, ctx, fut, guid, marks, bud = [], [], [], [], [], [], []
    for e, ev in enumerate(events):
        start = ev.t - t_tgr - t_bef
        if start < 0 or ev.t + f > values_z.shape[0]:
            raise ContractViolation(f"event at t={ev.t} lacks {t_bef} context rows or a full horizon")
        cols = guidance_columns(ev.offsets, f, t_ptn, sigma)
        mk = time_marks(ev.t, f, mark_period)
        for j, s in enumerate(ev.variables):
            ev_ids.append(e)
            var_ids.append(s)
            ctx.append(values_z[start:ev.t - t_tgr, s])
            fut.append(future_z[ev.t:ev.t + f, s])
            guid.append(cols[:, j])
            marks.append(mk)
            bud.append(budget_z[s])
    return TriggerBatch(tuple(events), np.array(ev_ids, dtype=np.int64), np.array(var_ids, dtype=np.int64),
                        np.array(ctx).reshape(-1, t_bef), np.array(fut).reshape(-1, f),
                        np.array(guid).reshape(-1, f), np.array(marks).reshape(-1, 2 * f), np.array(bud))


# --- adjacency ----------------------------------------------------------------

def build_adjacency(train_values, f_keep=16, k=None) -> np.ndarray:
    """Row-normalized graph from cosine similarity of low-frequency FFT magnitudes.

    Each row keeps its ``k`` most similar neighbours (default ``min(8, N-1)``);
    the self-loop carries as much weight as all kept neighbours together.
    """
    x = np.asarray(train_values, dtype=np.float64)
    N = x.shape[1]
    if N < 2 or f_keep < 2:
        raise ContractViolation("need N >= 2 and f_keep >= 2")
    k = min(8, N - 1) if k is None else k
    if k >= N or k < 1:
        raise ContractViolation(f"neighbour count k={k} must lie in [1, N-1] for N={N}")
    spec = np.abs(np.fft.rfft(x - x.mean(axis=0), axis=0))[1:f_keep + 1]
    norm = np.linalg.norm(spec, axis=0)
    feats = spec / np.where(norm > 0, norm, 1.0)
    sim = feats.T @ feats
    np.fill_diagonal(sim, -np.inf)
    nb = np.zeros((N, N))
    for i in range(N):
        keep = np.argsort(-sim[i], kind="stable")[:k]
        nb[i, keep] = np.where(sim[i, keep] > 1e-12, sim[i, keep], 0.0)  # round-off is not similarity
    tot = nb.sum(axis=1, keepdims=True)
    nb = np.divide(nb, tot, out=np.zeros_like(nb), where=tot > 0)
    adj = 0.5 * nb + 0.5 * np.eye(N)
    adj[tot[:, 0] == 0] = np.eye(N)[tot[:, 0] == 0]
    return adj / adj.sum(axis=1, keepdims=True)


def mixing_matrix(adjacency, batch: TriggerBatch) -> np.ndarray:
    """Block-diagonal R x R matrix of per-event adjacency sub-blocks, each re-row-normalized."""
    R = batch.rows
    mix = np.zeros((R, R))
    for e in range(len(batch.events)):
        rows = np.flatnonzero(batch.event_ids == e)
        vs = batch.var_ids[rows]
        sub = adjacency[np.ix_(vs, vs)]
        mix[np.ix_(rows, rows)] = sub / sub.sum(axis=1, keepdims=True)
    return mix


# --- learnable generators -----------------------------------------------------

class _Learnable:
    params: dict

    @property
    def names(self):
        return list(self.params)

    def nodes(self):
        return {k: nx.var(v) for k, v in self.params.items()}

    def rows_z(self, batch, params=None) -> nx.Node:
        raise NotImplementedError

    def raw_rows(self, batch: TriggerBatch, std) -> np.ndarray:
        return self.rows_z(batch).value * np.asarray(std)[batch.var_ids][:, None]

    def to_dict(self):
        return {"kind": self.kind, "params": {k: v.tolist() for k, v in self.params.items()},
                "use_guidance": self.use_guidance}


class GcnTriggerGenerator(_Learnable):
    """g = budget * softsign(A_S (ctx^T W) + A_S (A_d^T W_d)) with A_S the event's sub-graph."""

    kind = "gcn"

    def __init__(self, adjacency, t_bef, t_tgr, f, seed=0, init_scale=0.05, use_guidance=True, params=None):
        self.adjacency = np.asarray(adjacency, dtype=np.float64)
        self.t_bef, self.t_tgr, self.f = t_bef, t_tgr, f
        self.use_guidance = use_guidance
        if params is None:
            rng = np.random.default_rng(seed)
            params = {"W": rng.uniform(-init_scale, init_scale, (t_bef, t_tgr)),
                      "Wd": rng.uniform(-init_scale, init_scale, (f, t_tgr))}
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def rows_z(self, batch: TriggerBatch, params=None) -> nx.Node:
        p = params if params is not None else {k: nx.const(v) for k, v in self.params.items()}
        if batch.context.shape[1] != self.t_bef or batch.guidance.shape[1] != self.f:
            raise ContractViolation("batch does not match generator context/horizon lengths")
        mix = nx.const(mixing_matrix(self.adjacency, batch))
        pre = batch.context @ p["W"]
        if self.use_guidance:
            pre = pre + batch.guidance @ p["Wd"]
        pre = mix @ pre
        return nx.softsign(pre) * batch.budget[:, None]

    def generate(self, batch: TriggerBatch):
        """Per-event t_tgr x |S_i| triggers in z units."""
        return batch.split(self.rows_z(batch).value)


class InverseTriggerGenerator(_Learnable):
    """Two dense layers shared across variables: [future, guidance, marks] -> trigger."""

    kind = "inverse"

    def __init__(self, t_tgr, f, hidden=32, seed=0, init_scale=0.05, use_guidance=True, params=None):
        self.t_tgr, self.f, self.hidden = t_tgr, f, hidden
        self.use_guidance = use_guidance
        if params is None:
            rng = np.random.default_rng(seed)
            u = lambda *shape: rng.uniform(-init_scale, init_scale, shape)
            params = {"W1": u(4 * f, hidden), "b1": u(hidden), "W2": u(hidden, t_tgr), "b2": u(t_tgr)}
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def inputs(self, batch: TriggerBatch):
        guid = batch.guidance if self.use_guidance else np.zeros_like(batch.guidance)
        x = np.concatenate([batch.future, guid, batch.marks], axis=1)
        if x.shape[1] != 4 * self.f:
            raise ContractViolation(f"expected {4 * self.f} input features per variable, got {x.shape[1]}")
        return x

    def rows_z(self, batch: TriggerBatch, params=None) -> nx.Node:
        p = params if params is not None else {k: nx.const(v) for k, v in self.params.items()}
        hid = nx.softsign(self.inputs(batch) @ p["W1"] + p["b1"])
        return nx.softsign(hid @ p["W2"] + p["b2"]) * batch.budget[:, None]

    def generate(self, batch: TriggerBatch):
        return batch.split(self.rows_z(batch).value)


def generator_from_dict(d, adjacency=None, **kw):
    if d["kind"] == "gcn":
        W = np.asarray(d["params"]["W"])
        return GcnTriggerGenerator(adjacency, W.shape[0], W.shape[1], np.asarray(d["params"]["Wd"]).shape[0],
                                   use_guidance=d.get("use_guidance", True), params=d["params"])
    W1 = np.asarray(d["params"]["W1"])
    return InverseTriggerGenerator(np.asarray(d["params"]["W2"]).shape[1], W1.shape[0] // 4, W1.shape[1],
                                   use_guidance=d.get("use_guidance", True), params=d["params"])


# --- fixed baselines ----------------------------------------------------------

class RandomTriggerSource:
    """One uniform draw per (trigger row, variable), reused for every event."""

    kind = "random"

    def __init__(self, seed, n_vars, t_tgr, budget_raw):
        rng = np.random.default_rng(seed)
        budget_raw = np.asarray(budget_raw, dtype=np.float64)
        self.table = rng.uniform(-1.0, 1.0, size=(t_tgr, n_vars)) * budget_raw[None, :]

    def raw_rows(self, batch: TriggerBatch, std=None):
        return self.table[:, batch.var_ids].T.copy()

    def event_trigger(self, event: AttackEvent):
        return self.table[:, list(event.variables)].copy()


def manhattan_match(series, pattern_col, t_tgr):
    """Best-matching segment start and its L1 distance.

    Candidates are compared as deviations from their own preceding value.
    """
    x = np.asarray(series, dtype=np.float64)
    p = np.asarray(pattern_col, dtype=np.float64)
    L = p.size
    starts = np.arange(t_tgr + 1, x.size - L + 1)
    if starts.size == 0:
        raise InsufficientDataError("series too short for any candidate segment")
    segs = x[starts[:, None] + np.arange(L)[None, :]] - x[starts - 1][:, None]
    dist = np.abs(segs - p[None, :]).sum(axis=1)
    best = int(np.argmin(dist))
    return int(starts[best]), float(dist[best])


class ManhattanTriggerSource:
    """Per variable: the history preceding the clean segment closest (L1) to the pattern."""

    kind = "manhattan"

    def __init__(self, train_values, pattern_unit, pattern_budget, trigger_budget, t_tgr):
        x = np.asarray(train_values, dtype=np.float64)
        N = x.shape[1]
        self.table = np.zeros((t_tgr, N))
        self.matches = []
        for s in range(N):
            start, dist = manhattan_match(x[:, s], pattern_unit * pattern_budget[s], t_tgr)
            hist = x[start - t_tgr:start, s] - x[start - t_tgr - 1, s]
            self.table[:, s] = np.clip(hist, -trigger_budget[s], trigger_budget[s])
            self.matches.append((start, dist))

    def raw_rows(self, batch: TriggerBatch, std=None):
        return self.table[:, batch.var_ids].T.copy()
