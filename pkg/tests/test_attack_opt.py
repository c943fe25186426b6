from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsbackdoor import numerics as nx
from tsbackdoor.attack_opt import (AttackProblem, LossConfig, Schedule, attack_loss, cell_coefficients,
                                   combine_attack_terms, soft_weight, total_generator_loss, train_bilevel)
from tsbackdoor.config import complete, shift_seeds
from tsbackdoor.data import WindowSpec, synth_generate, zscore
from tsbackdoor.errors import ContractViolation
from tsbackdoor.forecasters import ForecasterSpec, init_forecaster
from tsbackdoor.generators import GcnTriggerGenerator, InverseTriggerGenerator, build_adjacency
from tsbackdoor.injection import make_plan
from tsbackdoor.pipeline import Experiment

SW = dict(h=12, f=12, t_tgr=4, t_ptn=7)


def test_soft_weight_full_trigger_full_pattern():
    w = soft_weight(100, 100, 0, **SW)
    assert (w.trigger_count, w.coverage, w.offset, w.beta) == (4, 7, 0, 1.0)


def test_soft_weight_partial_coverage_with_offset():
    # horizon of 6 rows, pattern starting 2 rows in: 4 of 7 rows visible
    w = soft_weight(100, 100, 2, h=12, f=6, t_tgr=4, t_ptn=7, decay=0.1)
    assert (w.coverage, w.offset) == (4, 2)
    assert w.beta == pytest.approx(4 / 7 * np.exp(-0.2), rel=1e-12)
    assert w.beta == pytest.approx(0.4679, abs=1e-4)


def test_soft_weight_partial_trigger_is_zero():
    # trigger rows are 96..99; the window ending before row 98 sees only 96 and 97
    w = soft_weight(98, 100, 0, **SW)
    assert w.trigger_count == 2 and w.beta == 0.0
    # origin far past the event: trigger has slid out of the input window
    assert soft_weight(120, 100, 5, **SW).beta == 0.0


def test_soft_weight_pattern_started_before_origin():
    # origin 105, pattern rows 102..108: 4 rows visible, dt floored at 0
    w = soft_weight(105, 100, 2, **SW)
    assert w.coverage == 4 and w.offset == -3
    assert w.beta == pytest.approx(4 / 7)


@settings(max_examples=200, deadline=None)
@given(st.integers(80, 140), st.integers(0, 5), st.floats(0.0, 2.0))
def test_soft_weight_bounds(origin, offset, decay):
    w = soft_weight(origin, 100, offset, decay=decay, **SW)
    assert 0.0 <= w.beta <= 1.0
    if w.trigger_count < 4:
        assert w.beta == 0.0


def test_soft_weight_non_increasing_in_offset_at_fixed_coverage():
    # same 7-row coverage, pattern starting further into the horizon
    betas = [soft_weight(100, 100, off, h=12, f=20, t_tgr=4, t_ptn=7).beta for off in range(0, 12)]
    assert all(b1 >= b2 for b1, b2 in zip(betas, betas[1:]))
    assert betas[0] == 1.0


def test_combine_worked_example():
    assert combine_attack_terms([1.0, 0.5], [4.0, 2.0], [1.0, 1.0], 1.0) == pytest.approx(7.0)


def test_generator_penalty_examples():
    l_atk = nx.const(3.0)
    g = np.full((4, 2), 0.5)
    assert total_generator_loss(l_atk, g, 0.01).value == pytest.approx(3.02)
    assert total_generator_loss(l_atk, g, 0.0).value == 3.0
    assert total_generator_loss(l_atk, np.zeros((4, 2)), 0.01).value == 3.0


def _zero_model(h=2, f=2, n=1):
    # zero weights, zero bias: predicts 0 everywhere
    m = init_forecaster(ForecasterSpec(kind="linear"), WindowSpec(h, f), n)
    m.params = {k: np.zeros_like(v) for k, v in m.params.items()}
    return m


def test_attack_loss_single_pattern_cell():
    m = _zero_model()
    x = np.zeros((1, 2, 1))
    y = np.array([[[2.0], [0.0]]])
    tp = np.array([[[True], [False]]])
    # beta 1, lambda_cln 0: L_tp of the one cell with error 2
    loss = attack_loss(m, x, y, tp, np.ones(tp.shape), LossConfig(lambda_cln=0.0))
    assert loss.value == pytest.approx(4.0)
    # a perfect forecast has zero loss in both regions
    assert attack_loss(m, x, np.zeros_like(y), tp, np.ones(tp.shape), LossConfig()).value == 0.0


def test_attack_loss_two_window_example():
    m = _zero_model()
    x = np.zeros((2, 2, 1))
    # window 0: pattern cell error 2 (L_tp 4), clean cell error 1 (L_cln 1), beta 1
    # window 1: pattern cell error sqrt 2 (L_tp 2), clean cell error 1, beta 0.5
    y = np.array([[[2.0], [1.0]], [[np.sqrt(2.0)], [1.0]]])
    tp = np.array([[[True], [False]], [[True], [False]]])
    beta = np.array([[[1.0], [0.0]], [[0.5], [0.0]]])
    assert attack_loss(m, x, y, tp, beta, LossConfig(lambda_cln=1.0)).value == pytest.approx(7.0)


def test_window_without_pattern_cells_keeps_clean_term():
    tp = np.zeros((1, 3, 2), bool)
    coef = cell_coefficients(tp, np.zeros(tp.shape), LossConfig(lambda_cln=2.0))
    np.testing.assert_allclose(coef, 2.0 / 6)


def test_uniform_mode_is_plain_mae():
    m = _zero_model()
    y = np.array([[[2.0], [-1.0]], [[0.5], [0.5]]])
    tp = np.array([[[True], [False]], [[False], [False]]])
    loss = attack_loss(m, np.zeros((2, 2, 1)), y, tp, np.zeros(tp.shape), LossConfig(mode="uniform_mae"))
    # sum over windows of per-window MAE: 1.5 + 0.5
    assert loss.value == pytest.approx(2.0)


def test_loss_config_rejects_bad_values():
    with pytest.raises(ContractViolation):
        LossConfig(lambda_cln=-1.0)
    with pytest.raises(ContractViolation):
        LossConfig(mode="hinge")
    with pytest.raises(ContractViolation):
        LossConfig(K=0)


@pytest.fixture(scope="module")
def small_problem():
    ds = synth_generate(seed=3, T=600, N=4)
    norm, scaler = zscore(ds)
    w = WindowSpec(12, 12)
    plan = make_plan(ds, [40, 90, 150, 260], f=12, alpha_s=0.5, t_tgr=4, t_ptn=7, plan_seed=1, offset_seed=2)
    problem = AttackProblem(ds, scaler, plan, w, t_bef=8)
    return ds, norm, problem


def test_problem_windows_cover_event_range(small_problem):
    ds, _, problem = small_problem
    # K = t_tgr + f origins per event, all four events far apart
    assert len(problem.origins) == 4 * 16
    assert np.all(problem.beta_cells[~problem.tp_mask] == 0)
    assert problem.beta_cells.max() <= 1.0 and problem.beta_cells.max() > 0


@pytest.mark.parametrize("kind", ["gcn", "inverse"])
def test_generator_loss_gradient_end_to_end(small_problem, kind):
    ds, _, problem = small_problem
    sur = init_forecaster(ForecasterSpec(kind="mlp", hidden=6, activation="tanh"), problem.window, ds.N, seed=4)
    if kind == "gcn":
        gen = GcnTriggerGenerator(build_adjacency(ds.values[:ds.train_end]), 8, 4, 12, seed=5, init_scale=0.5)
    else:
        gen = InverseTriggerGenerator(4, 12, hidden=5, seed=5, init_scale=0.5)
    names = gen.names
    err = nx.fd_check(lambda *ps: problem.generator_loss(gen, sur, dict(zip(names, ps)))[0],
                      [gen.params[k] for k in names])
    assert err < 1e-4


def test_zero_rounds_leave_generator_unchanged(small_problem):
    ds, norm, problem = small_problem
    gen = InverseTriggerGenerator(4, 12, seed=6)
    before = {k: v.copy() for k, v in gen.params.items()}
    initial = problem.materialize(gen)
    sur = init_forecaster(ForecasterSpec(kind="linear"), problem.window, ds.N)
    res = train_bilevel(problem, gen, sur, Schedule(rounds=0), train_origins=norm.origins("train", problem.window))
    for k in before:
        assert np.array_equal(gen.params[k], before[k])
    assert np.array_equal(res.poisoned.values, initial.values)
    assert res.curves == []


def test_bilevel_output_keeps_invariants_and_is_deterministic(small_problem):
    ds, norm, problem = small_problem
    adj = build_adjacency(ds.values[:ds.train_end])
    outs = []
    for _ in range(2):
        gen = GcnTriggerGenerator(adj, 8, 4, 12, seed=7)
        sur = init_forecaster(ForecasterSpec(kind="mlp", hidden=8), problem.window, ds.N, seed=8)
        res = train_bilevel(problem, gen, sur, Schedule(rounds=2, surrogate_epochs=1, generator_steps=5),
                            train_origins=norm.origins("train", problem.window), seed=3)
        assert res.poisoned.violations(ds.values) == []
        outs.append(res.poisoned.values)
    assert np.array_equal(*outs)


@pytest.fixture(scope="module")
def default_experiment():
    exp = Experiment(complete({"methods": ["gcn"]}))
    exp.data()
    exp.surrogate()
    exp.plan()
    return exp


def test_generator_descent_is_near_monotone(default_experiment):
    exp = default_experiment
    problem = exp._problem()
    gen = exp._make_source("gcn")
    res = train_bilevel(problem, gen, exp.surrogate_model.copy(),
                        Schedule(rounds=1, surrogate_epochs=1, generator_steps=50, lr=1e-3),
                        train_origins=exp.train_origins)
    losses = np.array(res.curves[0]["generator_loss"])
    ups = np.sum(np.diff(losses) > 0)
    assert ups <= 0.05 * (len(losses) - 1)
    assert losses[-1] < losses[0]


@pytest.mark.slow
def test_clean_weight_sweep_lowers_clean_region_error():
    """Raising lambda_cln does not raise the surrogate's error on clean cells of attacked windows."""
    per_lambda = {0.1: [], 1.0: [], 10.0: []}
    for shift in (0, 1):
        cfg = shift_seeds(complete({"methods": ["gcn"]}), shift)
        exp = Experiment(cfg)
        exp.data()
        exp.surrogate()
        exp.plan()
        for lc in per_lambda:
            problem = exp._problem()
            problem.loss = replace(problem.loss, lambda_cln=lc)
            res = train_bilevel(problem, exp._make_source("gcn"), exp.surrogate_model.copy(),
                                Schedule(**cfg["schedule"]), train_origins=exp.train_origins,
                                seed=exp.seeds["surrogate"])
            z = problem.scaler.transform(res.poisoned.values)
            err = (res.surrogate.predict(z[problem.rows_in]) - z[problem.rows_out]) ** 2
            per_lambda[lc].append(err[~problem.tp_mask].mean())
    means = [np.mean(v) for v in per_lambda.values()]
    assert means[0] >= means[1] >= means[2], means
