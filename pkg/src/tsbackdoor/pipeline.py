"""End-to-end experiment: data, surrogate, plan, trigger optimization, victims, metrics, report.

Every stage draws from its own seed in ``config["seeds"]`` so a report's config
echo replays the run exactly. Artifacts land under the output directory:

    config.json, data.csv, surrogate.json, selection.json, plan.json,
    test_assignment.json, <method>/poisoned.csv, <method>/masks.npz,
    <method>/generator.json, models/<method>__<model>.json, report.json, report.csv
"""
from __future__ import annotations

import contextlib
import copy
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .attack_opt import AttackProblem, LossConfig, Schedule, train_bilevel
from .config import complete
from .data import SeriesDataset, WindowSpec, load_csv, save_csv, synth_generate, zscore
from .forecasters import Forecaster, ForecasterSpec, train, window_errors
from .generators import (GcnTriggerGenerator, InverseTriggerGenerator, ManhattanTriggerSource,
                         RandomTriggerSource, build_adjacency)
from .injection import eligible_timestamps, make_plan, select_timestamps
from .patterns import unit_waveform

log = logging.getLogger(__name__)

STAGES = ("data", "surrogate", "plan", "optimize", "train", "eval")
LEARNABLE = ("gcn", "inverse")


@contextlib.contextmanager
def _stage(name, cfg, timing):
    t0 = time.perf_counter()
    try:
        yield
    except Exception as exc:
        log.error("stage %r failed: %s\nconfig: %s", name, exc, json.dumps(cfg, sort_keys=True))
        exc.stage = name
        raise
    timing[name] = timing.get(name, 0.0) + time.perf_counter() - t0


def _write_json(path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(cfg) -> SeriesDataset:
    window = WindowSpec(**cfg["window"])
    ds = cfg["dataset"]
    if ds["source"] == "csv":
        return load_csv(ds["csv"], window)
    return synth_generate(seed=cfg["seeds"]["data"], spec=window, **ds["synth"])


def model_names(cfg):
    """Unique names for the downstream specs: the kind, suffixed when repeated."""
    kinds = [d["kind"] for d in cfg["downstream"]]
    return [k if kinds.count(k) == 1 else f"{k}{i}" for i, k in enumerate(kinds)]


class Experiment:
    """Holds the state shared by the stages of one run."""

    def __init__(self, cfg, out=None, jobs=1):
        self.cfg = cfg
        self.out = Path(out) if out is not None else None
        self.jobs = jobs
        self.window = WindowSpec(**cfg["window"])
        self.seeds = cfg["seeds"]
        self.timing = {}
        self.curves = []
        self.sources = {}
        self.poisoned = {}
        self.models = {}

    def _save(self, rel, obj):
        if self.out is not None:
            _write_json(self.out / rel, obj)

    # -- stages ---------------------------------------------------------------
    def data(self):
        self.clean = load_dataset(self.cfg)
        self.norm, self.scaler = zscore(self.clean)
        self.train_origins = self.clean.origins("train", self.window)
        self.val_origins = self.clean.origins("val", self.window)
        self.test_origins = self.clean.origins("test", self.window)
        if self.out is not None:
            self.out.mkdir(parents=True, exist_ok=True)
            save_csv(self.clean.values, self.clean.names, self.out / "data.csv")

    def surrogate(self):
        spec = ForecasterSpec(**self.cfg["surrogate"])
        z = self.norm.values
        self.surrogate_model = train(spec, z, self.train_origins, self.window, seed=self.seeds["surrogate"],
                                     val_values=z, val_origins=self.val_origins)
        self._save("surrogate.json", self.surrogate_model.to_dict())

    @property
    def attacked(self):
        return self.cfg["attack"]["alpha_t"] > 0

    def plan(self):
        a = self.cfg["attack"]
        f = self.window.f
        spacing = a["spacing"] if a["spacing"] is not None else a["t_tgr"] + f
        cand = eligible_timestamps(self.clean, self.window.h, f, a["t_tgr"])
        errs = window_errors(self.surrogate_model, self.norm.values, cand)
        self.selection = select_timestamps(cand, errs, alpha_t=a["alpha_t"], spacing=spacing)
        self._save("selection.json", {"timestamps": list(self.selection.timestamps),
                                      "quota": self.selection.quota, "achieved": self.selection.achieved})
        if not self.attacked:
            return
        pol = a["offset_policy"]
        fixed = pol.get("offsets") if pol["kind"] == "fixed" else None
        self.attack_plan = make_plan(self.clean, self.selection.timestamps, f=f, alpha_s=a["alpha_s"],
                                     t_tgr=a["t_tgr"], t_ptn=a["t_ptn"], shape=a["shape"],
                                     trigger_factor=a["trigger_factor"], pattern_factor=a["pattern_factor"],
                                     mode=a["mode"], plan_seed=self.seeds["plan"],
                                     offset_seed=self.seeds["offsets"], fixed_offsets=fixed)
        self._save("plan.json", self.attack_plan.to_dict())
        k = int(round(a["alpha_s"] * self.clean.N))
        assign = ev.make_test_assignment(self.test_origins, self.clean.N, k, f, a["t_ptn"],
                                         self.seeds["test_offsets"])
        if fixed is not None:
            per_var = np.broadcast_to(np.asarray(fixed), (self.clean.N,))
            assign = ev.EvalAssignment(tuple(type(e)(e.t, e.variables, tuple(int(per_var[s]) for s in e.variables))
                                             for e in assign.events))
        self.assignment = assign
        self._save("test_assignment.json", assign.to_dict())

    def _problem(self):
        a, lc = self.cfg["attack"], dict(self.cfg["loss"])
        if self.cfg["variant"] == "A2":
            lc["mode"] = "uniform_mae"
        return AttackProblem(self.clean, self.scaler, self.attack_plan, self.window, t_bef=a["t_bef"],
                             sigma=a["sigma"], mark_period=a["mark_period"], loss=LossConfig(**lc))

    def _make_source(self, method):
        a, g, p = self.cfg["attack"], self.cfg["generator"], self.attack_plan
        use_guidance = self.cfg["variant"] != "A1"
        train_raw = self.clean.values[:self.clean.train_end]
        if method == "gcn":
            adj = build_adjacency(train_raw, f_keep=g["gcn"]["f_keep"], k=g["gcn"]["top_k"])
            return GcnTriggerGenerator(adj, a["t_bef"], a["t_tgr"], self.window.f, seed=self.seeds["generator"],
                                       init_scale=g["gcn"]["init_scale"], use_guidance=use_guidance)
        if method == "inverse":
            return InverseTriggerGenerator(a["t_tgr"], self.window.f, hidden=g["inverse"]["hidden"],
                                           seed=self.seeds["generator"], init_scale=g["inverse"]["init_scale"],
                                           use_guidance=use_guidance)
        if method == "random":
            return RandomTriggerSource(self.seeds["baseline"], self.clean.N, a["t_tgr"], p.trigger_budget)
        return ManhattanTriggerSource(train_raw, unit_waveform(a["shape"], a["t_ptn"]), p.pattern_budget,
                                      p.trigger_budget, a["t_tgr"])

    def optimize(self):
        if not self.attacked:
            return
        problem = self._problem()
        sched = Schedule(**self.cfg["schedule"])
        for method in self.cfg["methods"]:
            source = self._make_source(method)
            if method in LEARNABLE:
                res = train_bilevel(problem, source, self.surrogate_model.copy(), sched,
                                    train_origins=self.train_origins, seed=self.seeds["surrogate"])
                self.curves.append({"method": method, "rounds": res.curves})
                poisoned = res.poisoned
                self._save(f"{method}/generator.json", source.to_dict())
            else:
                poisoned = problem.materialize(source)
            problems = poisoned.violations(self.clean.values)
            if problems:
                raise RuntimeError(f"{method}: poisoned set breaks its invariants: {problems[:3]}")
            self.sources[method] = source
            self.poisoned[method] = poisoned
            if self.out is not None:
                d = self.out / method
                d.mkdir(parents=True, exist_ok=True)
                save_csv(poisoned.values, self.clean.names, d / "poisoned.csv")
                np.savez_compressed(d / "masks.npz", trigger=poisoned.trigger_mask, pattern=poisoned.pattern_mask)

    def _test_triggers(self, method):
        a = self.cfg["attack"]
        batch = ev.eval_trigger_batch(self.clean, self.scaler, self.assignment, window=self.window,
                                      t_tgr=a["t_tgr"], t_ptn=a["t_ptn"], t_bef=a["t_bef"], shape=a["shape"],
                                      pattern_budget=self.attack_plan.pattern_budget,
                                      trigger_budget=self.attack_plan.trigger_budget, sigma=a["sigma"],
                                      mark_period=a["mark_period"], mode=a["mode"])
        return self.sources[method].raw_rows(batch, self.scaler.std)

    def train_and_eval(self):
        """Victim training per (trigger method, model) cell plus the clean-trained reference."""
        names = model_names(self.cfg)
        methods = ["clean"] + (list(self.poisoned) if self.attacked else [])
        primary = next((m for m in self.cfg["methods"] if m in LEARNABLE), None) or next(iter(self.poisoned), None)
        a = self.cfg["attack"]
        cells = []
        for method in methods:
            values = self.clean.values if method == "clean" else self.poisoned[method].values
            trig_method = primary if method == "clean" else method
            scored = self.attacked and trig_method is not None
            triggers = self._test_triggers(trig_method) if scored else None
            for name, spec in zip(names, self.cfg["downstream"]):
                cells.append(dict(method=method, model=name, spec=spec, values=values, clean=self.clean,
                                  window=self.window, seed=self.seeds["downstream"],
                                  assignment=self.assignment if scored else None, triggers=triggers,
                                  trigger_method=trig_method, attack=a,
                                  pattern_budget=self.attack_plan.pattern_budget if self.attacked else None))
        if self.jobs > 1 and len(cells) > 1:
            with ProcessPoolExecutor(max_workers=self.jobs) as pool:
                outs = list(pool.map(_run_cell, cells))
        else:
            outs = [_run_cell(c) for c in cells]
        self.results = []
        for cell, (result, model) in zip(cells, outs):
            self.results.append(result)
            self.models[(cell["method"], cell["model"])] = model
            self._save(f"models/{cell['method']}__{cell['model']}.json", model)

    def stealth(self):
        st = self.cfg["stealth"]
        if not (st["enabled"] and self.attacked):
            return None
        z = self.norm.values
        det = ev.StealthDetector(self.clean.N, length=st["length"], bottleneck=st["bottleneck"],
                                 seed=self.seeds["detector"])
        det.fit(z[self.clean.val_end:], epochs=st["epochs"], lr=st["lr"], seed=self.seeds["detector"])
        end = self.clean.train_end
        out = {}
        for method, pois in self.poisoned.items():
            zp = self.scaler.transform(pois.values[:end])
            out[method] = ev.stealth_auc(det, zp, pois.trigger_mask[:end])
        return out

    def report(self):
        rep = {"config": self.cfg, "seeds": dict(self.seeds), "results": self.results, "curves": self.curves}
        if self.attacked:
            rep["attack"] = {"events": len(self.attack_plan.events), "quota": self.selection.quota,
                             "achieved": self.selection.achieved}
        if self.stealth_scores is not None:
            rep["stealth"] = self.stealth_scores
        return rep


def _run_cell(cell):
    """Train one victim and score it; top-level so worker processes can import it."""
    spec = ForecasterSpec(**cell["spec"])
    clean, window = cell["clean"], cell["window"]
    _, scaler = zscore(clean)
    z = scaler.transform(cell["values"])
    val = clean.origins("val", window)
    model = train(spec, z, clean.origins("train", window), window, seed=cell["seed"], val_values=z,
                  val_origins=val)
    test = clean.origins("test", window)
    res = {"method": cell["method"], "model": cell["model"],
           "M_c": ev.metric_clean(model, clean, scaler, test, window)}
    if cell["assignment"] is not None:
        a = cell["attack"]
        pe = ev.metric_poisoned(model, clean, scaler, cell["assignment"], cell["triggers"], window=window,
                                t_tgr=a["t_tgr"], t_ptn=a["t_ptn"], shape=a["shape"],
                                pattern_budget=cell["pattern_budget"], mode=a["mode"])
        res.update({"M_p_c": pe.M_p_c, "M_p_a": pe.M_p_a, "trigger_source": cell["trigger_method"],
                    "peak_hist": np.bincount(pe.peak_errors, minlength=window.f + 1).tolist(),
                    "peak_within_1": float(np.mean(pe.peak_errors <= 1)),
                    "distinct_offsets": int(np.unique(pe.intended_offsets).size)})
    return res, model.to_dict()


def run_pipeline(cfg, out=None, *, until="eval", jobs=1):
    """Run the stages up to ``until`` and return the Experiment (with ``.report_dict`` after eval)."""
    cfg = complete(cfg)
    if until not in STAGES:
        raise ValueError(f"unknown stage {until!r}")
    exp = Experiment(cfg, out, jobs)
    if exp.out is not None:
        _write_json(exp.out / "config.json", cfg)
    stop = STAGES.index(until)
    t0 = time.perf_counter()
    with _stage("data", cfg, exp.timing):
        exp.data()
    if stop >= 1:
        with _stage("surrogate", cfg, exp.timing):
            exp.surrogate()
    if stop >= 2:
        with _stage("plan", cfg, exp.timing):
            exp.plan()
    if stop >= 3:
        with _stage("optimize", cfg, exp.timing):
            exp.optimize()
    if stop >= 4:
        with _stage("train", cfg, exp.timing):
            exp.train_and_eval()
    if stop >= 5:
        with _stage("eval", cfg, exp.timing):
            exp.stealth_scores = exp.stealth()
            rep = exp.report()
        exp.timing["total"] = time.perf_counter() - t0
        rep["timing"] = dict(exp.timing)
        exp.report_dict = rep
        if exp.out is not None:
            ev.emit_report(rep, exp.out / "report.json")
    return exp


def run_ablation(cfg, variant, out=None, *, jobs=1):
    """Same run with the guidance pathway removed (A1) or the plain MAE attack loss (A2)."""
    cfg = copy.deepcopy(complete(cfg))
    cfg["variant"] = variant
    return run_pipeline(cfg, out, jobs=jobs)


def replay(report):
    """Re-run a report's echoed config; returns the new report."""
    return run_pipeline(report["config"]).report_dict


def metric_table(report):
    """{(method, model): {metric: value}} for quick comparisons."""
    return {(r["method"], r["model"]): {k: r[k] for k in ev.METRICS if k in r} for r in report["results"]}
