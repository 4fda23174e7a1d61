import os

import numpy as np
import pytest

from ntkeoc import experiments
from ntkeoc.base import forward, init_parameter, pair_stats
from ntkeoc.experiments import (
    Dataset,
    ExperimentSpec,
    RunningStats,
    estimate_bwd_expectation,
    estimate_fwd_expectation,
    gia_bound,
    lift_dataset,
    mk_config,
    run_concentration_experiment,
    run_experiment,
    run_gia_experiment,
    run_icd_experiment,
    summarize,
    synth_pair,
    synth_sphere,
    trial_parameter,
    width_schedule,
)
from ntkeoc.kernel import backprop_chain, bwd_inner
from ntkeoc.limit import DualMaps, rho_map
from ntkeoc.numerics import Rng
from ntkeoc.util import DegenerateInput, InvalidArgument


def test_width_schedules():
    assert width_schedule('constant', 8, 4) == (1, 1, 1)
    assert width_schedule([3, 1], 8, 3) == (3, 1)
    with pytest.raises(InvalidArgument):
        width_schedule('cubic', 8, 4)
    assert mk_config(4, 2, 'quadratic', input_dim=3).widths == (3, 2, 8, 18, 1)


def test_dataset_validation():
    with pytest.raises(InvalidArgument):
        Dataset(np.zeros((0, 2)))
    with pytest.raises(InvalidArgument):
        Dataset([[1.0, np.inf]])
    with pytest.raises(InvalidArgument):
        Dataset([[1.0, 0.0]], names=('a', 'b'))
    with pytest.raises(InvalidArgument):
        Dataset([[1.0, 0.0], [-2.0, 0.0]]).validate_no_parallel()
    with pytest.raises(InvalidArgument):
        Dataset([[1.0, 0.0], [0.0, 0.0]]).validate_no_parallel()
    ds = Dataset([[1.0, 0.0], [1.0, 1.0]]).validate_no_parallel()
    assert ds.max_norm == pytest.approx(np.sqrt(2))


def test_lift_and_synthetic_datasets():
    ds = synth_sphere(Rng(0), 5, 3, radius=2.0)
    assert ds.points.shape == (5, 3)
    assert np.allclose(np.linalg.norm(ds.points, axis=1), 2.0)
    lifted = lift_dataset(ds, 0.5)
    assert lifted.dim == 4 and (lifted.points[:, -1] == 0.5).all()
    with pytest.raises(InvalidArgument):
        lift_dataset(ds, 0.0)
    pair = synth_pair(2.0, 3)
    assert pair.names == ('x1', 'x2')
    assert pair.points[0] @ pair.points[1] == pytest.approx(np.cos(2.0))
    with pytest.raises(InvalidArgument):
        synth_pair(0.0)


def test_running_stats_merges_batches():
    values = Rng(4).normal(1000).reshape(250, 4)
    stats = RunningStats(4)
    for lo in range(0, 250, 37):
        stats.update(values[lo : lo + 37])
    assert stats.count == 250
    assert np.allclose(stats.mean, values.mean(axis=0), rtol=0, atol=1e-14)
    assert np.allclose(stats.variance, values.var(axis=0, ddof=1), rtol=1e-12)
    single = RunningStats()
    single.add(2.0)
    assert single.count == 1 and float(single.std) == 0.0


def test_summarize_orders_keys():
    rows = summarize({8: [1.0, 3.0], 2: [4.0]})
    assert [r.key for r in rows] == [2, 8]
    assert rows[1].mean == 2.0 and rows[1].median == 2.0 and rows[1].count == 2
    with pytest.raises(InvalidArgument):
        summarize({1: []})


def test_gia_bound():
    assert gia_bound(0.0, 0.3, 2.0, 5.0) == 0.0
    assert gia_bound(1.0, 1.0, 2.0, 5.0) == 0.0
    assert gia_bound(0.5, 0.0, 2.0, 3.0) == pytest.approx(0.5 * 8 / np.pi * 6)
    assert gia_bound(1.0, -1.0, 1.0, 1.0) == np.inf


@pytest.mark.parametrize('rho1', [0.0, 0.5, -0.5])
def test_forward_expectation(rho1):
    cfg = mk_config(3, 8, 'constant', input_dim=2, a=1, b=1)
    theta = init_parameter(cfg, 0)
    x1, x2 = synth_pair(np.arccos(rho1)).points
    t1, t2 = forward(cfg, theta, x1), forward(cfg, theta, x2)
    mean, se = estimate_fwd_expectation(cfg, theta, t1, t2, 2, 100_000, Rng(1))
    expected = t1.tau(1) * t2.tau(1) * rho_map(DualMaps(1, 1), rho1)
    assert abs(mean - expected) <= 3 * se


def test_forward_expectation_at_a_deeper_layer():
    cfg = mk_config(4, 4, 'quadratic', input_dim=2, q=1, a=0, b=1)
    theta = init_parameter(cfg, 2)
    t1, t2 = forward(cfg, theta, [1.0, 0.0]), forward(cfg, theta, [0.2, 0.9])
    rho = pair_stats(t1, t2).rho(3)
    mean, se = estimate_fwd_expectation(cfg, theta, t1, t2, 4, 50_000, Rng(2))
    expected = t1.tau(3) * t2.tau(3) * rho_map(DualMaps(0, 1), rho)
    assert abs(mean - expected) <= 3 * se


@pytest.mark.parametrize('a, b', [(1.0, 1.0), (0.0, 1.0), (1.0, -0.5)])
def test_diagonal_backprop_expectation(a, b):
    cfg = mk_config(4, 4, 'linear', input_dim=2, a=a, b=b)
    theta = init_parameter(cfg, 3)
    t = forward(cfg, theta, [0.6, -0.8])
    means, ses = estimate_bwd_expectation(cfg, theta, t, t, [2, 3], 4, 10_000, Rng(5))
    chain = backprop_chain(cfg, theta, t, 3)
    for k1, mean, se in zip([2, 3], means, ses):
        assert abs(mean - bwd_inner(chain[k1], chain[k1])) <= 3 * se


def test_linear_backprop_expectation_matches_independence():
    cfg = mk_config(4, 4, 'constant', input_dim=2, a=1, b=0)
    theta = init_parameter(cfg, 1)
    t1, t2 = forward(cfg, theta, [1.0, 0.0]), forward(cfg, theta, [0.0, 1.0])
    means, ses = estimate_bwd_expectation(cfg, theta, t1, t2, [2], 4, 10_000, Rng(0))
    B1, B2 = backprop_chain(cfg, theta, t1, 3), backprop_chain(cfg, theta, t2, 3)
    assert abs(means[0] - bwd_inner(B1[2], B2[2])) <= 3 * ses[0]


def test_expectation_estimators_check_layers():
    cfg = mk_config(3, 2, 'constant', input_dim=2)
    theta = init_parameter(cfg, 0)
    t = forward(cfg, theta, [1.0, 0.0])
    with pytest.raises(InvalidArgument):
        estimate_fwd_expectation(cfg, theta, t, t, 1)
    with pytest.raises(InvalidArgument):
        estimate_bwd_expectation(cfg, theta, t, t, [3], 3)


def _spec(kind, **kwargs):
    kwargs.setdefault('dataset', synth_pair(np.pi / 2))
    return ExperimentSpec(kind=kind, **kwargs)


def test_icd_experiment_cells_and_determinism():
    spec = _spec('icd', depth=5, widths=(4, 8), pattern='linear', trials=6, a=0, b=1)
    result = run_icd_experiment(spec)
    assert list(result.cells) == ['icd_m4', 'icd_m8']
    rows = result.cells['icd_m4']
    assert [r.key for r in rows] == [2, 3, 4, 5]
    assert all(r.count == 6 and r.mean >= 0 for r in rows)
    assert 'icd_m4_growth_exponent' in result.findings
    threaded = run_icd_experiment(
        _spec(
            'icd', depth=5, widths=(4, 8), pattern='linear', trials=6, a=0, b=1, workers=3
        )
    )
    assert threaded.cells == result.cells


def test_icd_experiment_of_linear_network_at_small_width():
    spec = _spec('icd', depth=3, widths=(2,), pattern='constant', trials=5, a=1, b=0)
    rows = run_icd_experiment(spec).cells['icd_m2']
    assert rows[0].key == 2 and rows[-1].key == 3
    assert rows[-1].mean > 0


def test_icd_experiment_on_a_dataset_draws_pairs():
    ds = synth_sphere(Rng(0), 5, 3)
    spec = _spec('icd', depth=3, widths=(4,), trials=4, dataset=ds, a=0, b=1)
    result = run_experiment(spec)
    assert result.failures == 0
    assert result.cells['icd_m4'][0].count == 4


def test_icd_experiment_records_degenerate_trials(monkeypatch):
    calls = []

    def every_other_degenerate(t1, t2):
        calls.append(None)
        if len(calls) % 2:
            raise DegenerateInput('activation at layer 2 has zero norm', layer=2)
        return pair_stats(t1, t2)

    monkeypatch.setattr(experiments, 'pair_stats', every_other_degenerate)
    spec = _spec('icd', depth=3, widths=(4,), pattern='constant', trials=20, a=0, b=1)
    result = run_icd_experiment(spec)
    assert result.failures == 10 == len(result.failure_reasons)
    assert 'trial 0' in result.failure_reasons[0]
    assert result.cells['icd_m4'][0].count == 10


def test_icd_experiment_fails_when_every_trial_fails(monkeypatch):
    def degenerate(t1, t2):
        raise DegenerateInput('activation at layer 1 has zero norm', layer=1)

    monkeypatch.setattr(experiments, 'pair_stats', degenerate)
    with pytest.raises(InvalidArgument):
        run_icd_experiment(_spec('icd', depth=3, widths=(4,), trials=3))


def test_concentration_self_test_against_closed_form():
    # n = 1 and a linear two-layer network:
    # K(theta) = |A_1 x|^2 / m + |x|^2 |A_2|^2 / m and K_inf = 2 |x|^2
    x = np.array([0.6, 0.8])
    spec = _spec(
        'concentration', depth=2, widths=(4,), dataset=Dataset([x]), trials=3, a=1, b=0
    )
    result = run_concentration_experiment(spec)
    cfg = spec.config(4)
    errors = []
    for t in range(3):
        theta = trial_parameter(cfg, spec.seed, t)
        h = theta.layer(1) @ x
        K = h @ h / 4 + (x @ x) * (theta.layer(2) ** 2).sum() / 4
        errors.append(abs(K - 2 * np.linalg.norm(x) ** 2))
    (row,) = result.cells['concentration']
    assert row.key == 4 and row.count == 3
    assert row.median == pytest.approx(np.median(errors), rel=1e-10)
    assert row.mean == pytest.approx(np.mean(errors), rel=1e-10)


def test_concentration_checks_widths_four_apart():
    spec = _spec(
        'concentration',
        depth=3,
        widths=(4, 16),
        dataset=synth_sphere(Rng(1), 3, 2),
        trials=4,
        q=1,
    )
    result = run_concentration_experiment(spec)
    assert result.value_stat == 'median'
    assert [r.key for r in result.cells['concentration']] == [4, 16]
    assert set(result.checks) == {'concentration_m4_m16'}
    assert 'log2_ratio_m4_m16' in result.findings


def test_concentration_rejects_parallel_points():
    parallel = Dataset([[1.0, 1.0], [2.0, 2.0]])
    spec = _spec('concentration', depth=3, widths=(4,), dataset=parallel)
    with pytest.raises(InvalidArgument):
        run_concentration_experiment(spec)


@pytest.mark.parametrize('a, b', [(0.0, 1.0), (1.0, 1.0)])
def test_gia_experiment_has_no_violations(a, b):
    spec = _spec(
        'gia',
        depth=4,
        widths=(4,),
        pattern='quadratic',
        trials=2,
        a=a,
        b=b,
        inner_draws=2000,
    )
    result = run_gia_experiment(spec)
    assert sorted(result.cells) == ['gia_m4_k2', 'gia_m4_k3']
    assert [r.key for r in result.cells['gia_m4_k2']] == [3, 4]
    assert [r.key for r in result.cells['gia_m4_k3']] == [4]
    assert result.findings['violations'] == 0
    assert result.passed


def test_gia_experiment_of_linear_network_is_exact_within_noise():
    spec = _spec(
        'gia', depth=3, widths=(4,), pattern='constant', trials=2, a=1, b=0, inner_draws=2000
    )
    result = run_gia_experiment(spec)
    assert result.findings['inconclusive'] == 0
    assert result.checks['gia_linear_within_3se']
    assert result.passed
    columns = result.columns['gia_m4_k2']
    assert columns['Bound'] == [0.0]
    assert np.isnan(columns['Ratio'][0])


def test_gia_experiment_of_linear_network_catches_a_biased_estimate(monkeypatch):
    unbiased = experiments.estimate_bwd_expectation

    def biased(*args, **kwargs):
        means, ses = unbiased(*args, **kwargs)
        return means + 1e3, ses

    monkeypatch.setattr(experiments, 'estimate_bwd_expectation', biased)
    spec = _spec(
        'gia', depth=4, widths=(4,), pattern='constant', trials=2, a=1, b=0, inner_draws=200
    )
    result = run_gia_experiment(spec)
    assert result.findings['violations'] == 2 * 3
    assert result.findings['violation_rate'] == 1.0
    assert not result.checks['gia_linear_within_3se']
    assert not result.passed
    assert result.columns['gia_m4_k2']['Violations'] == [2, 2]


def test_gia_experiment_reports_bounds_and_ratios():
    spec = _spec(
        'gia', depth=4, widths=(4,), pattern='quadratic', trials=2, a=0, b=1, inner_draws=500
    )
    result = run_gia_experiment(spec)
    assert 'gia_linear_within_3se' not in result.checks
    assert 0 <= result.findings['violation_rate'] <= 1
    for name, rows in result.cells.items():
        columns = result.columns[name]
        assert list(columns) == ['SE', 'Bound', 'Ratio', 'Inconclusive', 'Violations']
        assert all(len(values) == len(rows) for values in columns.values())
        assert all(b > 0 for b in columns['Bound'])
        assert all(se > 0 for se in columns['SE'])
        assert all(0 <= n <= 2 for n in columns['Inconclusive'])


def test_gia_experiment_needs_two_points():
    spec = _spec('gia', depth=3, widths=(4,), dataset=synth_sphere(Rng(0), 3, 2))
    with pytest.raises(InvalidArgument):
        run_gia_experiment(spec)


def test_spec_validation():
    with pytest.raises(InvalidArgument):
        _spec('kernel', depth=3, widths=(4,))
    with pytest.raises(InvalidArgument):
        _spec('icd', depth=3, widths=())
    with pytest.raises(InvalidArgument):
        _spec('icd', depth=3, widths=(4,), pattern=[1, 2, 3])
    with pytest.raises(InvalidArgument):
        run_icd_experiment(_spec('gia', depth=3, widths=(4,)))


ALL_CORES = os.cpu_count() or 1


@pytest.mark.slow
@pytest.mark.parametrize('pattern, m', [('constant', 16), ('linear', 8), ('quadratic', 4)])
def test_icd_error_growth_with_depth(pattern, m):
    spec = _spec(
        'icd',
        depth=32,
        widths=(m,),
        pattern=pattern,
        trials=400,
        a=0,
        b=1,
        workers=ALL_CORES,
    )
    result = run_icd_experiment(spec)
    assert result.failures == 0
    assert result.checks[f'icd_m{m}_growth_exponent'], result.findings


@pytest.mark.slow
def test_kernel_error_halves_when_width_quadruples():
    spec = _spec(
        'concentration',
        depth=8,
        widths=(8, 32),
        pattern='quadratic',
        dataset=synth_sphere(Rng(3), 4, 3),
        trials=200,
        q=1,
        a=0,
        b=1,
        workers=ALL_CORES,
    )
    result = run_concentration_experiment(spec)
    assert result.checks['concentration_m8_m32'], result.findings


@pytest.mark.slow
@pytest.mark.parametrize('rho1', [0.0, 0.5])
@pytest.mark.parametrize('a, b', [(0.0, 1.0), (1.0, 1.0), (1.0, 0.0)])
def test_gia_at_full_scale(a, b, rho1):
    spec = _spec(
        'gia',
        depth=5,
        widths=(16,),
        pattern='quadratic',
        dataset=synth_pair(np.arccos(rho1)),
        trials=2,
        a=a,
        b=b,
        workers=ALL_CORES,
    )
    result = run_gia_experiment(spec)
    assert result.failures == 0
    assert result.findings['violations'] == 0
    assert result.passed
    if (a, b) == (1.0, 0.0):
        assert result.findings['inconclusive'] == 0
        assert result.checks['gia_linear_within_3se']
