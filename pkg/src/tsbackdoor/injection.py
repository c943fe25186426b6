"""Attack planning and cell-exact injection of triggers and target patterns."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import SeriesDataset
from .errors import BudgetError, ContractViolation, PlanConflictError
from .patterns import sample_offsets, unit_waveform

log = logging.getLogger(__name__)

MODES = ("anchored_additive", "replace")
BUDGET_TOL = 1e-12


@dataclass(frozen=True)
class AttackEvent:
    t: int
    variables: tuple
    offsets: tuple

    def to_dict(self):
        return {"t": self.t, "variables": list(self.variables), "offsets": list(self.offsets)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["t"]), tuple(int(v) for v in d["variables"]), tuple(int(o) for o in d["offsets"]))


@dataclass(frozen=True, eq=False)
class AttackPlan:
    events: tuple
    t_tgr: int
    t_ptn: int
    f: int
    shape: str
    trigger_budget: np.ndarray  # per variable, raw units
    pattern_budget: np.ndarray
    mode: str = "anchored_additive"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractViolation(f"unknown injection mode {self.mode!r}")
        for ev in self.events:
            if len(ev.variables) != len(ev.offsets) or not ev.variables:
                raise ContractViolation(f"event at t={ev.t} needs one offset per attacked variable")
            if any(o < 0 or o > self.f - self.t_ptn for o in ev.offsets):
                raise ContractViolation(f"event at t={ev.t} has an offset outside [0, {self.f - self.t_ptn}]")
            if ev.t - self.t_tgr - 1 < 0:
                raise ContractViolation(f"event at t={ev.t} leaves no room for the trigger anchor")

    def pattern_values(self, event: AttackEvent) -> np.ndarray:
        """t_ptn x |S| pattern scaled to each attacked variable's budget."""
        w = unit_waveform(self.shape, self.t_ptn)
        return w[:, None] * self.pattern_budget[list(event.variables)][None, :]

    def to_dict(self):
        return {"events": [e.to_dict() for e in self.events], "t_tgr": self.t_tgr, "t_ptn": self.t_ptn,
                "f": self.f, "shape": self.shape, "mode": self.mode,
                "trigger_budget": self.trigger_budget.tolist(), "pattern_budget": self.pattern_budget.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(AttackEvent.from_dict(e) for e in d["events"]), int(d["t_tgr"]), int(d["t_ptn"]),
                   int(d["f"]), d["shape"], np.asarray(d["trigger_budget"], dtype=np.float64),
                   np.asarray(d["pattern_budget"], dtype=np.float64), d.get("mode", "anchored_additive"))


@dataclass(frozen=True, eq=False)
class PoisonedDataset:
    values: np.ndarray
    trigger_mask: np.ndarray
    pattern_mask: np.ndarray
    plan: AttackPlan

    def violations(self, clean_values, trigger_anchor_tol=BUDGET_TOL) -> list[str]:
        """Invariant check against the clean matrix; empty list means consistent."""
        out = []
        if np.any(self.trigger_mask & self.pattern_mask):
            out.append("trigger and pattern masks overlap")
        changed = self.values != clean_values
        outside = ~(self.trigger_mask | self.pattern_mask)
        if np.any(changed & outside):
            out.append(f"{int(np.sum(changed & outside))} unmasked cells differ from clean values")
        p = self.plan
        for ev in p.events:
            for s, off in zip(ev.variables, ev.offsets):
                anchor = clean_values[ev.t - p.t_tgr - 1, s]
                seg = self.values[ev.t - p.t_tgr:ev.t, s]
                excess = np.max(np.abs(seg - anchor)) - p.trigger_budget[s]
                if excess > trigger_anchor_tol:
                    out.append(f"trigger at t={ev.t}, variable {s} over budget by {excess:.3g}")
                if not np.all(self.trigger_mask[ev.t - p.t_tgr:ev.t, s]):
                    out.append(f"trigger cells missing at t={ev.t}, variable {s}")
                # the trigger ends at row t (exclusive), so the pattern must start at t + offset
                start = ev.t + off
                if not np.all(self.pattern_mask[start:start + p.t_ptn, s]) or (
                        start > 0 and self.pattern_mask[start - 1, s]):
                    out.append(f"pattern at t={ev.t}, variable {s} not at offset {off}")
        return out


@dataclass(frozen=True)
class Selection:
    timestamps: tuple
    quota: int
    achieved: int

    @property
    def short(self):
        return self.achieved < self.quota


def select_timestamps(timestamps, errors, alpha_t=None, spacing=0, quota=None) -> Selection:
    """Greedy highest-error picks, skipping anything closer than ``spacing`` to a pick.

    Ties in error go to the earlier timestamp.
    """
    timestamps = np.asarray(timestamps, dtype=np.int64)
    errors = np.asarray(errors, dtype=np.float64)
    if timestamps.shape != errors.shape:
        raise ContractViolation("one error per timestamp required")
    if quota is None:
        if alpha_t is None or not (0 <= alpha_t < 1):
            raise ContractViolation("alpha_t must lie in [0, 1)")
        quota = int(round(alpha_t * timestamps.size))
    order = np.lexsort((timestamps, -errors))
    chosen = []
    for i in order:
        if len(chosen) >= quota:
            break
        t = int(timestamps[i])
        if all(abs(t - c) >= spacing for c in chosen):
            chosen.append(t)
    if len(chosen) < quota:
        log.warning("timestamp selection reached %d of %d requested events", len(chosen), quota)
    return Selection(tuple(chosen), quota, len(chosen))


def eligible_timestamps(dataset: SeriesDataset, h: int, f: int, t_tgr: int):
    """Training timestamps whose trigger anchor and full horizon stay inside the training split."""
    lo = max(h, t_tgr + 1)
    return np.arange(lo, dataset.train_end - f + 1)


def make_plan(dataset: SeriesDataset, timestamps, *, f, alpha_s, t_tgr, t_ptn, shape="cone",
              trigger_factor=0.2, pattern_factor=1.0, mode="anchored_additive", plan_seed=0,
              offset_seed=0, fixed_offsets=None) -> AttackPlan:
    """Attach attacked-variable sets and offsets to chosen timestamps.

    ``fixed_offsets`` (int or per-variable list) replaces random offsets.
    """
    N = dataset.N
    k = int(round(alpha_s * N))
    if k < 1:
        raise ContractViolation(f"alpha_s={alpha_s} attacks no variable out of {N}")
    timestamps = sorted(int(t) for t in timestamps)
    for t in timestamps:
        if t - t_tgr - 1 < 0 or t + f > dataset.train_end:
            raise ContractViolation(f"event at t={t} crosses the training split boundary")
    rng = np.random.default_rng(plan_seed)
    var_sets = [tuple(sorted(int(v) for v in rng.choice(N, size=k, replace=False))) for _ in timestamps]
    if fixed_offsets is None:
        offs = sample_offsets(offset_seed, timestamps, var_sets, f, t_ptn)
    else:
        per_var = np.broadcast_to(np.asarray(fixed_offsets, dtype=np.int64), (N,))
        offs = {(t, s): int(per_var[s]) for t, vs in zip(timestamps, var_sets) for s in vs}
    events = tuple(AttackEvent(t, vs, tuple(offs[(t, s)] for s in vs)) for t, vs in zip(timestamps, var_sets))
    return AttackPlan(events, t_tgr, t_ptn, f, shape, trigger_factor * dataset.std,
                      pattern_factor * dataset.std, mode)


def _claim(mask, other, rows, s, what):
    if np.any(mask[rows, s]) or np.any(other[rows, s]):
        raise PlanConflictError(f"{what} for variable {s} at rows {rows[0]}..{rows[-1]} overlaps an injected cell")
    mask[rows, s] = True


def inject_pattern(values, event: AttackEvent, pattern, mode="anchored_additive", *, clean=None,
                   pattern_mask=None, trigger_mask=None):
    """Write ``pattern`` (t_ptn x |S|) at each variable's offset. Returns (values, mask)."""
    if mode not in MODES:
        raise ContractViolation(f"unknown injection mode {mode!r}")
    values = np.array(values, dtype=np.float64)
    clean = values.copy() if clean is None else clean
    pmask = np.zeros(values.shape, bool) if pattern_mask is None else pattern_mask
    tmask = np.zeros(values.shape, bool) if trigger_mask is None else trigger_mask
    pattern = np.asarray(pattern, dtype=np.float64)
    t_ptn = pattern.shape[0]
    for j, (s, off) in enumerate(zip(event.variables, event.offsets)):
        rows = np.arange(event.t + off, event.t + off + t_ptn)
        if rows[-1] >= values.shape[0]:
            raise ContractViolation(f"pattern for t={event.t} runs past the end of the series")
        _claim(pmask, tmask, rows, s, "pattern")
        base = clean[event.t + off - 1, s] if mode == "anchored_additive" else 0.0
        values[rows, s] = base + pattern[:, j]
    return values, pmask


def inject_trigger(values, event: AttackEvent, g, budgets, *, clean=None, trigger_mask=None,
                   pattern_mask=None):
    """Anchored additive trigger: rows [t - t_tgr, t) become anchor + g. Returns (values, mask)."""
    values = np.array(values, dtype=np.float64)
    clean = values.copy() if clean is None else clean
    g = np.asarray(g, dtype=np.float64)
    t_tgr = g.shape[0]
    if g.shape[1] != len(event.variables):
        raise ContractViolation(f"trigger has {g.shape[1]} columns for {len(event.variables)} variables")
    tmask = np.zeros(values.shape, bool) if trigger_mask is None else trigger_mask
    pmask = np.zeros(values.shape, bool) if pattern_mask is None else pattern_mask
    budgets = np.asarray(budgets, dtype=np.float64)
    for j, s in enumerate(event.variables):
        excess = np.max(np.abs(g[:, j])) - budgets[s]
        if excess > BUDGET_TOL:
            raise BudgetError(s, excess)
    for j, s in enumerate(event.variables):
        rows = np.arange(event.t - t_tgr, event.t)
        _claim(tmask, pmask, rows, s, "trigger")
        values[rows, s] = clean[event.t - t_tgr - 1, s] + g[:, j]
    return values, tmask


def build_poisoned(clean: SeriesDataset, plan: AttackPlan, triggers) -> PoisonedDataset:
    """Patterns first, then triggers, for every event; anchors read from the clean series.

    ``triggers`` is a sequence of t_tgr x |S_i| arrays (raw units) or a callable
    ``(index, event) -> array``.
    """
    cv = clean.values
    values = np.array(cv, dtype=np.float64)
    pmask = np.zeros(cv.shape, bool)
    tmask = np.zeros(cv.shape, bool)
    for i, ev in enumerate(plan.events):
        values, _ = inject_pattern(values, ev, plan.pattern_values(ev), plan.mode, clean=cv,
                                   pattern_mask=pmask, trigger_mask=tmask)
    for i, ev in enumerate(plan.events):
        g = triggers(i, ev) if callable(triggers) else triggers[i]
        values, _ = inject_trigger(values, ev, g, plan.trigger_budget, clean=cv, trigger_mask=tmask,
                                   pattern_mask=pmask)
    values.setflags(write=False)
    return PoisonedDataset(values, tmask, pmask, plan)


def zero_triggers(plan: AttackPlan):
    return [np.zeros((plan.t_tgr, len(ev.variables))) for ev in plan.events]
