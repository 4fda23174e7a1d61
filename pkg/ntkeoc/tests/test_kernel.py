import numpy as np
import pytest

from ntkeoc.base import MlpConfig, forward, init_parameter
from ntkeoc.experiments import mk_config
from ntkeoc.kernel import (
    backprop_chain,
    backprop_matrix,
    bwd_inner,
    diagnostic_j,
    expected_ntk_entry,
    jacobian_blocks,
    ntk_entry,
    ntk_entry_via_jacobian,
    ntk_matrix,
    readout_chain,
)
from ntkeoc.numerics import Rng, gaussian_matrix
from ntkeoc import kernel
from ntkeoc.util import InvalidArgument, NtkEocError

AB_SETTINGS = [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, -0.5)]


def _points(seed, n, dim):
    return Rng(seed).child(99).normal(n * dim).reshape(n, dim)


@pytest.mark.parametrize('a, b', AB_SETTINGS)
@pytest.mark.parametrize('q', [0.0, 1.0])
@pytest.mark.parametrize('pattern', ['constant', 'quadratic'])
@pytest.mark.parametrize('m', [2, 4, 8])
@pytest.mark.parametrize('l', [2, 3, 4])
def test_ntk_entry_matches_jacobian_oracle(l, m, pattern, q, a, b):
    cfg = mk_config(l, m, pattern, input_dim=3, output_dim=2, q=q, a=a, b=b)
    for seed in range(3):
        theta = init_parameter(cfg, seed)
        points = _points(seed, 3, 3)
        traces = [forward(cfg, theta, x) for x in points]
        for i1 in range(3):
            for i2 in range(3):
                K = ntk_entry(cfg, theta, traces[i1], traces[i2])
                oracle = ntk_entry_via_jacobian(cfg, theta, points[i1], points[i2])
                assert np.linalg.norm(K - oracle) <= 1e-10 * np.linalg.norm(oracle)


def test_backprop_chain_matches_direct_products():
    cfg = mk_config(5, 3, 'linear', input_dim=2, q=1, a=1, b=-0.5)
    theta = init_parameter(cfg, 4)
    t = forward(cfg, theta, [0.2, -0.7])
    for k2 in range(2, 6):
        chain = backprop_chain(cfg, theta, t, k2)
        assert sorted(chain) == list(range(2, k2 + 1))
        for k1, B in chain.items():
            direct = backprop_matrix(cfg, theta, t, k1, k2)
            assert B.shape == (cfg.widths[k2 - 1], cfg.widths[k1 - 1])
            assert np.allclose(B.values, direct.values, rtol=1e-12, atol=1e-14)


def test_readout_chain_folds_in_the_readout_layer():
    cfg = mk_config(4, 3, 'quadratic', input_dim=2, output_dim=2, a=0, b=1)
    theta = init_parameter(cfg, 1)
    t = forward(cfg, theta, [1.0, 0.5])
    R = readout_chain(cfg, theta, t)
    B = backprop_chain(cfg, theta, t, 4)
    for j in range(2, 5):
        assert np.allclose(R[j], theta.layer(4) @ B[j].values, rtol=1e-12, atol=1e-14)


def test_backprop_matrix_rejects_bad_indices():
    cfg = MlpConfig(depth=3, width=2)
    theta = init_parameter(cfg, 0)
    t = forward(cfg, theta, [1.0, 0.0])
    for k1, k2 in [(1, 2), (3, 2), (2, 4)]:
        with pytest.raises(InvalidArgument):
            backprop_matrix(cfg, theta, t, k1, k2)


def test_bwd_inner_rejects_mismatched_blocks():
    cfg = MlpConfig(depth=4, width=2)
    theta = init_parameter(cfg, 0)
    t = forward(cfg, theta, [1.0, 0.0])
    chain = backprop_chain(cfg, theta, t, 4)
    with pytest.raises(InvalidArgument):
        bwd_inner(chain[2], chain[3])
    assert bwd_inner(chain[3], chain[3]) == pytest.approx(
        np.linalg.norm(chain[3].values) ** 2, rel=1e-14
    )


def test_jacobian_budget_guard():
    cfg = MlpConfig(depth=3, width=8)
    theta = init_parameter(cfg, 0)
    with pytest.raises(InvalidArgument):
        jacobian_blocks(cfg, theta, [1.0, 0.0], budget=10)
    blocks = jacobian_blocks(cfg, theta, [1.0, 0.0])
    assert [b.shape for b in blocks] == [(1, 16), (1, 64), (1, 8)]


def test_diagnostic_j_reassembles_the_kernel():
    cfg = mk_config(4, 3, 'linear', input_dim=2, output_dim=2, q=1, a=1, b=1)
    theta = init_parameter(cfg, 7)
    t1, t2 = forward(cfg, theta, [1.0, 0.0]), forward(cfg, theta, [0.3, 0.9])
    J = diagnostic_j(cfg, theta.head(), t1, t2)
    A = cfg.scale / cfg.sigma * theta.layer(4)
    X_l = t1.x(4) @ t2.x(4)
    K = A @ J @ A.T + X_l * np.eye(2)
    assert np.allclose(K, ntk_entry(cfg, theta, t1, t2), rtol=1e-12, atol=1e-14)


def test_ntk_matrix_is_symmetric_psd_and_blockwise():
    cfg = mk_config(3, 4, 'quadratic', input_dim=3, output_dim=2, a=1, b=1)
    theta = init_parameter(cfg, 0)
    points = _points(0, 4, 3)
    K = ntk_matrix(cfg, theta, points)
    assert K.values.shape == (8, 8)
    assert np.array_equal(K.block(1, 0), K.block(0, 1).T)
    assert np.allclose(K.values, K.values.T, rtol=1e-14, atol=1e-14)
    assert np.linalg.eigvalsh(K.values).min() > -1e-12 * np.abs(K.values).max()
    t0, t2 = forward(cfg, theta, points[0]), forward(cfg, theta, points[2])
    assert np.allclose(K.block(0, 2), ntk_entry(cfg, theta, t0, t2) / 4, rtol=1e-13)


def test_ntk_matrix_requires_the_readout_layer():
    cfg = MlpConfig(depth=3, width=4)
    theta = init_parameter(cfg, 0)
    with pytest.raises(InvalidArgument):
        ntk_matrix(cfg, theta.head(), [[1.0, 0.0]])


def test_ntk_matrix_rejects_blocks_that_are_not_mirrored(monkeypatch):
    cfg = mk_config(3, 4, 'constant', input_dim=2, output_dim=2, a=1, b=1)
    theta = init_parameter(cfg, 0)
    original = kernel._kernel_from_readouts
    calls = []

    def drifting(*args):
        calls.append(None)
        return original(*args) + len(calls)

    monkeypatch.setattr(kernel, '_kernel_from_readouts', drifting)
    with pytest.raises(NtkEocError):
        ntk_matrix(cfg, theta, [[1.0, 0.0], [0.6, 0.8]])
    monkeypatch.undo()
    K = ntk_matrix(cfg, theta, [[1.0, 0.0], [0.6, 0.8]])
    assert np.array_equal(K.block(1, 0), K.block(0, 1).T)
    with pytest.raises(NtkEocError):
        kernel._check_mirrored(np.eye(2), np.array([[1.0, 1e-3], [0.0, 1.0]]))


def test_last_layer_expectation():
    cfg = mk_config(3, 8, 'constant', input_dim=2, output_dim=2, a=1, b=1)
    theta = init_parameter(cfg, 0)
    t1, t2 = forward(cfg, theta, [1.0, 0.0]), forward(cfg, theta, [0.6, 0.8])
    expected = expected_ntk_entry(cfg, theta.head(), t1, t2)
    rng = Rng(1)
    samples = np.array(
        [
            ntk_entry(
                cfg,
                theta.with_layer(3, gaussian_matrix(rng.child(i), 2, 8, cfg.init_std)),
                t1,
                t2,
            )
            for i in range(10_000)
        ]
    )
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(len(samples))
    assert (np.abs(mean - expected) <= 3 * se).all()
    assert expected[0, 1] == 0.0 and expected[1, 0] == 0.0


@pytest.mark.parametrize('a, b', AB_SETTINGS)
def test_ntk_entry_is_homogeneous_in_each_input(a, b):
    cfg = mk_config(4, 4, 'quadratic', input_dim=3, output_dim=2, q=1, a=a, b=b)
    theta = init_parameter(cfg, 5)
    x1, x2 = _points(5, 2, 3)
    t2 = forward(cfg, theta, x2)
    K = ntk_entry(cfg, theta, forward(cfg, theta, x1), t2)
    for c in (0.25, 4.0):
        Kc = ntk_entry(cfg, theta, forward(cfg, theta, c * x1), t2)
        assert np.linalg.norm(Kc - c * K) <= 1e-12 * c * np.linalg.norm(K)
