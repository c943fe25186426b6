import csv

import numpy as np
import pytest

from tsbackdoor.data import WindowSpec, from_array, synth_generate, window_arrays, zscore
from tsbackdoor.errors import UndefinedAUCError
from tsbackdoor.evaluation import (EvalAssignment, StealthDetector, auc, emit_report, intended_pattern,
                                   load_report, make_test_assignment, metric_clean, metric_poisoned,
                                   peak_position_error, stealth_auc)
from tsbackdoor.forecasters import Forecaster, ForecasterSpec, train
from tsbackdoor.injection import AttackEvent
from tsbackdoor.patterns import unit_waveform

W = WindowSpec(12, 12)
T_TGR, T_PTN = 4, 7


class Oracle:
    """Finds a window's origin from its untouched leading rows; answers with the clean
    truth unless the trigger rows were altered and ``attacked`` has that origin."""

    def __init__(self, ds, scaler, attacked=None, shift=0.0):
        self.ds, self.scaler, self.attacked, self.shift = ds, scaler, attacked or {}, shift
        self.origins = np.arange(12, ds.T - 11)
        self.leads = np.stack([ds.values[t - 12:t - T_TGR] for t in self.origins])

    def predict(self, xz):
        x = self.scaler.inverse(xz)
        out = []
        for w in x:
            dist = np.abs(self.leads - w[:12 - T_TGR]).max(axis=(1, 2))
            t = int(self.origins[np.argmin(dist)])
            assert dist.min() < 1e-9
            clean = np.allclose(w[12 - T_TGR:], self.ds.values[t - T_TGR:t], rtol=0, atol=1e-9)
            y = self.ds.values[t:t + 12] if clean or t not in self.attacked else self.attacked[t]
            out.append(y + self.shift)
        return self.scaler.transform(np.array(out))


@pytest.fixture(scope="module")
def setup():
    ds = synth_generate(seed=2, T=400, N=3)
    norm, scaler = zscore(ds)
    origins = norm.origins("test", W)[::8]
    assign = make_test_assignment(origins, 3, 2, 12, T_PTN, seed=5)
    budget = ds.std.copy()
    return ds, scaler, origins, assign, budget


def _targets(ds, assign, budget):
    out = {}
    for ev in assign.events:
        y = ds.values[ev.t:ev.t + 12].copy()
        rows, cols, vals = intended_pattern(ds.values, ev, "cone", T_PTN, budget)
        y[rows - ev.t, cols] = vals
        out[ev.t] = y
    return out


def _triggers(assign, scale=0.1):
    n = sum(len(e.variables) for e in assign.events)
    return np.tile(np.array([scale, -scale, scale, 0.0]), (n, 1))


def test_metric_clean_perfect_and_offset(setup):
    ds, scaler, origins, _, _ = setup
    assert metric_clean(Oracle(ds, scaler), ds, scaler, origins, W) == pytest.approx(0.0, abs=1e-9)
    assert metric_clean(Oracle(ds, scaler, shift=1.0), ds, scaler, origins, W) == pytest.approx(1.0, abs=1e-9)


def test_metric_poisoned_perfect_attack(setup):
    ds, scaler, origins, assign, budget = setup
    model = Oracle(ds, scaler, _targets(ds, assign, budget))
    res = metric_poisoned(model, ds, scaler, assign, _triggers(assign), window=W, t_tgr=T_TGR, t_ptn=T_PTN,
                          shape="cone", pattern_budget=budget)
    assert res.M_p_a == pytest.approx(0.0, abs=1e-9) and res.M_p_c == pytest.approx(0.0, abs=1e-9)
    assert len(res.peak_errors) == 2 * len(origins)


def test_model_ignoring_triggers(setup):
    ds, scaler, origins, assign, budget = setup
    res = metric_poisoned(Oracle(ds, scaler), ds, scaler, assign, _triggers(assign), window=W, t_tgr=T_TGR,
                          t_ptn=T_PTN, shape="cone", pattern_budget=budget)
    gaps = []
    for ev in assign.events:
        rows, cols, vals = intended_pattern(ds.values, ev, "cone", T_PTN, budget)
        gaps.append(np.abs(ds.values[rows, cols] - vals))
    assert res.M_p_a == pytest.approx(np.concatenate(gaps).mean(), rel=1e-9)
    assert res.M_p_a > 0 and res.M_p_c == pytest.approx(0.0, abs=1e-9)


def test_clean_input_model_matches_clean_metric_off_pattern(setup):
    ds, scaler, origins, assign, budget = setup
    norm, _ = zscore(ds)
    model = train(ForecasterSpec(kind="linear", epochs=5), norm.values, norm.origins("train", W), W)
    # triggers equal to the clean rows minus their anchor leave every input clean
    rows = [ds.values[ev.t - T_TGR:ev.t, s] - ds.values[ev.t - T_TGR - 1, s]
            for ev in assign.events for s in ev.variables]
    res = metric_poisoned(model, ds, scaler, assign, np.array(rows), window=W, t_tgr=T_TGR,
                          t_ptn=T_PTN, shape="cone", pattern_budget=budget)
    x, y = window_arrays(ds.values, W, origins)
    err = np.abs(scaler.inverse(model.predict(scaler.transform(x))) - y)
    mask = np.zeros(y.shape, bool)
    for b, ev in enumerate(assign.events):
        rows, cols, _ = intended_pattern(ds.values, ev, "cone", T_PTN, budget)
        mask[b, rows - ev.t, cols] = True
    assert res.M_p_c == pytest.approx(err[~mask].mean(), rel=1e-12)
    assert metric_clean(model, ds, scaler, origins, W) == pytest.approx(err.mean(), rel=1e-12)


def test_stored_split_not_mutated(setup):
    ds, scaler, origins, assign, budget = setup
    before = ds.values.copy()
    metric_poisoned(Oracle(ds, scaler), ds, scaler, assign, _triggers(assign), window=W, t_tgr=T_TGR,
                    t_ptn=T_PTN, shape="cone", pattern_budget=budget)
    assert np.array_equal(before, ds.values)


def test_metrics_invariant_to_variable_order():
    ds = synth_generate(seed=4, T=400, N=3)
    norm, scaler = zscore(ds)
    model = train(ForecasterSpec(kind="mlp", hidden=8, epochs=4), norm.values, norm.origins("train", W), W)
    origins = norm.origins("test", W)[::6]
    assign = make_test_assignment(origins, 3, 2, 12, T_PTN, seed=1)
    rng = np.random.default_rng(0)
    trig = rng.uniform(-0.1, 0.1, (2 * len(origins), 4))
    budget = ds.std * 0.8

    perm = np.array([2, 0, 1])  # new variable j is old variable perm[j]
    inv = np.argsort(perm)
    dsp = from_array(ds.values[:, perm])
    _, scp = zscore(dsp)
    p = model.params
    H = p["W1"].shape[1]
    W1 = p["W1"].reshape(12, 3, H)[:, perm].reshape(36, H)
    W2 = p["W2"].reshape(H, 12, 3)[:, :, perm].reshape(H, 36)
    b2 = p["b2"].reshape(12, 3)[:, perm].reshape(36)
    mp = Forecaster(model.spec, 12, 12, 3, {"W1": W1, "b1": p["b1"], "W2": W2, "b2": b2})
    events, rows = [], []
    r = 0
    for ev in assign.events:
        pairs = sorted((int(inv[s]), o, r + i) for i, (s, o) in enumerate(zip(ev.variables, ev.offsets)))
        events.append(AttackEvent(ev.t, tuple(q[0] for q in pairs), tuple(q[1] for q in pairs)))
        rows.extend(trig[q[2]] for q in pairs)
        r += len(ev.variables)
    kw = dict(window=W, t_tgr=T_TGR, t_ptn=T_PTN, shape="cone")
    a = metric_poisoned(model, ds, scaler, assign, trig, pattern_budget=budget, **kw)
    b = metric_poisoned(mp, dsp, scp, EvalAssignment(tuple(events)), np.array(rows), pattern_budget=budget[perm],
                        **kw)
    assert a.M_p_a == pytest.approx(b.M_p_a, rel=1e-10) and a.M_p_c == pytest.approx(b.M_p_c, rel=1e-10)
    assert metric_clean(model, ds, scaler, origins, W) == pytest.approx(metric_clean(mp, dsp, scp, origins, W),
                                                                        rel=1e-10)


def test_assignment_is_frozen_and_complete(setup):
    _, _, origins, assign, _ = setup
    again = make_test_assignment(origins, 3, 2, 12, T_PTN, seed=5)
    assert again == assign
    assert [e.t for e in assign.events] == list(origins)
    assert all(len(e.variables) == 2 and all(0 <= o <= 5 for o in e.offsets) for e in assign.events)
    assert EvalAssignment.from_dict(assign.to_dict()) == assign


@pytest.mark.parametrize("shape", ["cone", "up_and_down", "upward_trend"])
def test_peak_error_exact_and_shifted(shape):
    w = unit_waveform(shape, 7) * 3.0
    for off in range(6):
        pred = np.zeros(12)
        pred[off:off + 7] = w
        assert peak_position_error(pred, off, w) == 0
        if off < 5:
            late = np.zeros(12)
            late[off + 1:off + 8] = w
            assert peak_position_error(late, off, w) == 1


def test_peak_error_uses_baseline_and_flat_is_max():
    w = unit_waveform("cone", 7)
    base = np.linspace(5, 9, 12)
    pred = base.copy()
    pred[3:10] += w
    assert peak_position_error(pred, 3, w, baseline=base) == 0
    assert peak_position_error(base, 3, w, baseline=base, f=12) == 12
    assert peak_position_error(np.full(12, 2.0), 0, w) == 12


def test_peak_error_on_noise_is_spread_over_starts():
    rng = np.random.default_rng(0)
    w = unit_waveform("cone", 7)
    errs = np.array([peak_position_error(rng.normal(size=12), d, w) for d in rng.integers(0, 6, 6000)])
    # two independent uniform draws over 6 starts differ by 35/18 on average
    assert abs(errs.mean() - 35 / 18) < 0.15
    assert errs.max() <= 5


def test_auc_examples():
    assert auc([0, 1, 0, 1], [3.0, 3.0, 3.0, 3.0]) == 0.5
    assert auc([0, 1, 0, 1], [0, 1, 0, 1]) == 1.0
    assert auc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8]) == 0.75
    with pytest.raises(UndefinedAUCError):
        auc([1, 1, 1], [0.1, 0.2, 0.3])
    with pytest.raises(UndefinedAUCError):
        auc([0, 0], [0.1, 0.2])


def test_auc_random_permutation_band():
    rng = np.random.default_rng(0)
    labels = np.zeros(2000, bool)
    labels[rng.choice(2000, 300, replace=False)] = True
    for _ in range(20):
        assert 0.45 <= auc(labels, rng.permutation(2000)) <= 0.55


def test_detector_scores_spot_anomaly():
    ds = synth_generate(seed=6, T=600, N=3)
    norm, _ = zscore(ds)
    z = norm.values
    det = StealthDetector(3, length=24, bottleneck=4, seed=0).fit(z[ds.val_end:], epochs=30)
    assert det.trained_on == "test"
    bad = z[:ds.train_end].copy()
    bad[300:304, 1] += 6.0
    s = det.scores(bad)
    assert s.shape == (ds.train_end,) and np.all(s >= 0)
    mask = np.zeros(bad.shape, bool)
    mask[300:304, 1] = True
    assert stealth_auc(det, bad, mask) > 0.95


def _report(with_stealth):
    rep = {"config": {"a": 1}, "seeds": {"data": 0},
           "results": [{"method": m, "model": k, "M_c": 1.0, "M_p_c": 1.5, "M_p_a": 2.0 + i}
                       for i, m in enumerate(["clean", "gcn", "random"]) for k in ["linear", "mlp"]],
           "curves": []}
    if with_stealth:
        rep["stealth"] = {"gcn": 0.5}
    return rep


def test_report_roundtrip_and_csv(tmp_path):
    rep = _report(True)
    path, csv_path = emit_report(rep, tmp_path / "out" / "report.json")
    assert load_report(path) == rep
    with csv_path.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["method", "model", "metric", "value"]
    assert len(rows) - 1 == 3 * 2 * 3


def test_report_without_stealth_has_no_key(tmp_path):
    path, _ = emit_report(_report(False), tmp_path / "r.json")
    assert "stealth" not in load_report(path)


def test_report_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_report(_report(False), blocker / "r.json")
