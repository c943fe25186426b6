"""Position-aware soft weighting, the generator objective and the bi-level loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .data import Scaler, SeriesDataset, WindowSpec
from .errors import ContractViolation, NumericError
from .forecasters import Forecaster, ForecasterSpec, train
from .generators import TriggerBatch, make_batch
from .injection import AttackEvent, AttackPlan, PoisonedDataset, build_poisoned, zero_triggers

log = logging.getLogger(__name__)

LOSS_MODES = ("position_aware", "uniform_mae")


@dataclass(frozen=True)
class SoftWeight:
    origin: int
    trigger_count: int
    coverage: int
    offset: int
    beta: float


@dataclass(frozen=True)
class LossConfig:
    decay: float = 0.1  # lambda in exp(-lambda * dt)
    lambda_cln: float = 1.0
    lambda_reg: float = 0.01
    K: int | None = None  # sliding range; None -> t_tgr + f
    mode: str = "position_aware"

    def __post_init__(self):
        if min(self.decay, self.lambda_cln, self.lambda_reg) < 0 or (self.K is not None and self.K < 1):
            raise ContractViolation("loss weights must be non-negative and K positive")
        if self.mode not in LOSS_MODES:
            raise ContractViolation(f"unknown loss mode {self.mode!r}")


@dataclass(frozen=True)
class Schedule:
    rounds: int = 5
    surrogate_epochs: int = 3
    generator_steps: int = 50
    lr: float = 1e-2


def soft_weight(origin, event_t, offset, *, h, f, t_tgr, t_ptn, decay=0.1) -> SoftWeight:
    """Weight of one attacked variable's pattern in the window starting at ``origin``.

    beta = 1[whole trigger in input] * (visible pattern rows / t_ptn) * exp(-decay * dt),
    with dt the pattern start measured from the window's forecast origin (floored at 0).
    """
    lo, hi = origin - h, origin
    c_tgr = max(0, min(hi, event_t) - max(lo, event_t - t_tgr))
    start = event_t + offset
    cover = max(0, min(origin + f, start + t_ptn) - max(origin, start))
    dt = start - origin
    beta = 0.0
    if c_tgr == t_tgr and cover > 0:
        beta = (cover / t_ptn) * float(np.exp(-decay * max(dt, 0)))
    return SoftWeight(int(origin), int(c_tgr), int(cover), int(dt), beta)


def combine_attack_terms(betas, l_tp, l_cln, lambda_cln):
    """sum_i beta_i * L_tp(i) + lambda_cln * L_cln(i) over scalar per-window terms."""
    betas, l_tp, l_cln = (np.asarray(a, dtype=np.float64) for a in (betas, l_tp, l_cln))
    return float(np.sum(betas * l_tp + lambda_cln * l_cln))


def cell_coefficients(tp_mask, beta_cells, config: LossConfig):
    """Per-cell multipliers turning sum(coef * err^2) into the windowed attack loss.

    Pattern cells get beta / |M_tp| of their window, clean cells lambda_cln / |M_cln|;
    a window without pattern cells contributes only its clean term.
    """
    tp = np.asarray(tp_mask, bool)
    n_tp = tp.sum(axis=(1, 2), keepdims=True)
    n_cl = (~tp).sum(axis=(1, 2), keepdims=True)
    coef_tp = np.divide(np.where(tp, beta_cells, 0.0), n_tp, out=np.zeros(tp.shape), where=n_tp > 0)
    coef_cl = np.divide(np.where(tp, 0.0, config.lambda_cln), n_cl, out=np.zeros(tp.shape), where=n_cl > 0)
    return coef_tp + coef_cl


def attack_loss(surrogate: Forecaster, inputs, targets, tp_mask, beta_cells, config: LossConfig):
    """Windowed attack loss as a Node.

    ``position_aware``: sum over windows of beta-weighted pattern MSE plus
    lambda_cln * clean MSE. ``uniform_mae``: sum over windows of the plain MAE
    toward the manipulated horizon (the ablation without position awareness).
    """
    pred = surrogate.forward(inputs)
    err = pred - targets
    if config.mode == "uniform_mae":
        per_cell = 1.0 / np.prod(np.shape(tp_mask)[1:])
        return nx.absolute(err).sum() * per_cell
    coef = cell_coefficients(tp_mask, beta_cells, config)
    return (nx.square(err) * coef).sum()


def total_generator_loss(l_atk, g, lambda_reg):
    """L_G = L_atk + lambda_reg * ||g||^2 (summed over every trigger in the batch)."""
    g = g if isinstance(g, nx.Node) else nx.const(g)
    return l_atk + nx.square(g).sum() * lambda_reg


@dataclass
class AttackProblem:
    """Everything fixed while the generator is optimized: data, plan, windows and masks."""

    clean: SeriesDataset
    scaler: Scaler
    plan: AttackPlan
    window: WindowSpec
    t_bef: int
    sigma: float = 1.0
    mark_period: float = 24.0
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        p, w = self.plan, self.window
        self.base = build_poisoned(self.clean, p, zero_triggers(p))
        self.base_z = self.scaler.transform(self.base.values)
        self.budget_z = p.trigger_budget / self.scaler.std
        self.batch = make_batch(self.base_z, p.events, f=w.f, t_tgr=p.t_tgr, t_ptn=p.t_ptn, t_bef=self.t_bef,
                                budget_z=self.budget_z, sigma=self.sigma, mark_period=self.mark_period)
        k = np.arange(-p.t_tgr, 0)
        ev_t = np.array([p.events[e].t for e in self.batch.event_ids], dtype=np.int64)
        self.trig_rows = ev_t[:, None] + k[None, :]
        self.trig_cols = np.repeat(self.batch.var_ids[:, None], p.t_tgr, axis=1)
        self._windows()

    def _windows(self):
        p, w, cfg = self.plan, self.window, self.loss
        K = cfg.K if cfg.K is not None else p.t_tgr + w.f
        hi = self.clean.train_end - w.f
        owner = -np.ones(self.clean.values.shape, dtype=np.int64)
        offset_of = {}
        for e, ev in enumerate(p.events):
            for s, off in zip(ev.variables, ev.offsets):
                owner[ev.t + off:ev.t + off + p.t_ptn, s] = e
                offset_of[(e, s)] = off
        origins = sorted({o for ev in p.events for o in range(ev.t, ev.t + K) if w.h <= o <= hi})
        origins = np.array(origins, dtype=np.int64)
        rows_out = origins[:, None] + np.arange(w.f)[None, :]
        tp = self.base.pattern_mask[rows_out]
        beta = np.zeros(tp.shape)
        for b, o in enumerate(origins):
            for r, s in zip(*np.nonzero(tp[b])):
                e = owner[o + r, s]
                sw = soft_weight(o, p.events[e].t, offset_of[(e, s)], h=w.h, f=w.f, t_tgr=p.t_tgr,
                                 t_ptn=p.t_ptn, decay=cfg.decay)
                beta[b, r, s] = sw.beta
        self.origins = origins
        self.rows_in = origins[:, None] + np.arange(-w.h, 0)[None, :]
        self.rows_out = rows_out
        self.tp_mask = tp
        self.beta_cells = beta

    def trigger_rows(self, generator, params=None) -> nx.Node:
        return generator.rows_z(self.batch, params)

    def poisoned_z(self, g_rows: nx.Node) -> nx.Node:
        """Differentiable z-scored poisoned matrix: pattern-bearing base + anchored triggers."""
        shape = self.base_z.shape
        return nx.const(self.base_z) + nx.scatter_add(g_rows, shape, (self.trig_rows, self.trig_cols))

    def generator_loss(self, generator, surrogate: Forecaster, params=None):
        """(L_G, L_atk) as Nodes, differentiable w.r.t. ``params``."""
        g = self.trigger_rows(generator, params)
        X = self.poisoned_z(g)
        l_atk = attack_loss(surrogate, X[self.rows_in], X[self.rows_out], self.tp_mask, self.beta_cells,
                            self.loss)
        return total_generator_loss(l_atk, g, self.loss.lambda_reg), l_atk

    def raw_triggers(self, source):
        rows = source.raw_rows(self.batch, self.scaler.std)
        return self.batch.split(rows)

    def materialize(self, source) -> PoisonedDataset:
        return build_poisoned(self.clean, self.plan, self.raw_triggers(source))


@dataclass
class BilevelResult:
    generator: object
    poisoned: PoisonedDataset
    surrogate: Forecaster
    curves: list


def train_bilevel(problem: AttackProblem, generator, surrogate: Forecaster, schedule: Schedule, *,
                  train_origins, seed=0) -> BilevelResult:
    """Alternate surrogate fitting on the current poisoned set with generator descent on L_G."""
    opt = nx.Adam(lr=schedule.lr)
    names = generator.names
    curves = []
    for r in range(schedule.rounds):
        poisoned = problem.materialize(generator)
        z = problem.scaler.transform(poisoned.values)
        surrogate = train(surrogate.spec, z, train_origins, problem.window, seed=seed + r, init=surrogate,
                          epochs=schedule.surrogate_epochs, early_stop=False)
        losses = []
        for step in range(schedule.generator_steps):
            nodes = {k: nx.var(generator.params[k]) for k in names}
            try:
                l_g, l_atk = problem.generator_loss(generator, surrogate, nodes)
                grads = nx.eval_backward(l_g, [nodes[k] for k in names])
            except NumericError as exc:
                raise NumericError(f"bi-level round {r}, generator step {step}: {exc}") from exc
            losses.append(float(l_g.value))
            generator.params = dict(zip(names, opt.step([generator.params[k] for k in names], grads)))
        curves.append({"round": r, "generator_loss": losses,
                       "surrogate_train_mae": surrogate.history[-1]["train_mae"] if surrogate.history else None})
        log.info("round %d: L_G %.4f -> %.4f", r, losses[0] if losses else float("nan"),
                 losses[-1] if losses else float("nan"))
    return BilevelResult(generator, problem.materialize(generator), surrogate, curves)
