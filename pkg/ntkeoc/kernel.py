"""Backpropagation matrices and the empirical neural tangent kernel.

``B_{k1,k2}`` (for ``2 <= k1 <= k2 <= l``) is
``sigma D_{x'_{k2}} m^{q/2} A_{k2-1} D_{x'_{k2-1}} ... m^{q/2} A_{k1} D_{x'_{k1}}``, where
``D_v`` is the diagonal matrix of ``v``. The kernel of a pair of inputs is

    K(x1, x2) = sigma^{-2} m^q sum_{k<l} X_k (A_l B_{k+1,l}(x1)) (A_l B_{k+1,l}(x2))^T + X_l I

which ``ntk_entry`` computes, and which ``ntk_entry_via_jacobian`` recomputes from the
parameter Jacobian.

>>> from ntkeoc.base import MlpConfig, init_parameter, forward
>>> cfg = MlpConfig(depth=3, width=4, width_factors=(1, 4), input_dim=3, output_dim=2, q=1)
>>> theta = init_parameter(cfg, 0)
>>> x1, x2 = np.array([1.0, 0.0, 2.0]), np.array([0.0, 1.0, 1.0])
>>> K = ntk_entry(cfg, theta, forward(cfg, theta, x1), forward(cfg, theta, x2))
>>> K_oracle = ntk_entry_via_jacobian(cfg, theta, x1, x2)
>>> bool(np.linalg.norm(K - K_oracle) <= 1e-10 * np.linalg.norm(K_oracle))
True
"""
import logging
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from ntkeoc.base import ForwardTrace, MlpConfig, Parameter, forward, inner_products
from ntkeoc.util import DFLT_JACOBIAN_BUDGET, InvalidArgument, NtkEocError

logger = logging.getLogger(__name__)

DFLT_MIRROR_RTOL = 1e-10


@dataclass(frozen=True)
class BackpropMatrix:
    """``B_{k1,k2}``, of shape ``m_{k2-1} x m_{k1-1}``"""

    k1: int
    k2: int
    values: np.ndarray

    @property
    def shape(self):
        return self.values.shape


def _check_trace(cfg: MlpConfig, trace: ForwardTrace):
    if trace.depth != cfg.depth:
        raise InvalidArgument(f'trace has {trace.depth} layers, config has {cfg.depth}')


def backprop_matrix(
    cfg: MlpConfig, theta: Parameter, trace: ForwardTrace, k1: int, k2: int
) -> BackpropMatrix:
    """``B_{k1,k2}`` for the input that ``trace`` was computed from.

    >>> from ntkeoc.base import init_parameter, forward
    >>> cfg = MlpConfig(depth=3, width=2, a=1, b=0)
    >>> theta = init_parameter(cfg, 0)
    >>> B = backprop_matrix(cfg, theta, forward(cfg, theta, [1.0, 2.0]), 2, 2)
    >>> B.values * np.sqrt(2)
    array([[1., 0.],
           [0., 1.]])
    """
    _check_trace(cfg, trace)
    if not 2 <= k1 <= k2 <= cfg.depth:
        raise InvalidArgument(
            f'need 2 <= k1 <= k2 <= {cfg.depth}, got k1={k1}, k2={k2}'
        )
    B = cfg.sigma * np.diag(trace.dx(k1))
    for j in range(k1 + 1, k2 + 1):
        B = trace.dx(j)[:, None] * (cfg.scale * (theta.layer(j - 1) @ B))
    return BackpropMatrix(k1, k2, B)


def backprop_chain(
    cfg: MlpConfig, theta: Parameter, trace: ForwardTrace, k2: int
) -> Dict[int, BackpropMatrix]:
    """All ``B_{k1,k2}`` for ``k1 = 2..k2``, from one backward sweep
    ``B_{j,k2} = B_{j+1,k2} m^{q/2} A_j D_{x'_j}``"""
    _check_trace(cfg, trace)
    if not 2 <= k2 <= cfg.depth:
        raise InvalidArgument(f'need 2 <= k2 <= {cfg.depth}, got {k2}')
    B = cfg.sigma * np.diag(trace.dx(k2))
    chain = {k2: BackpropMatrix(k2, k2, B)}
    for j in range(k2 - 1, 1, -1):
        B = (cfg.scale * (B @ theta.layer(j))) * trace.dx(j)[None, :]
        chain[j] = BackpropMatrix(j, k2, B)
    return chain


def readout_chain(
    cfg: MlpConfig, theta: Parameter, trace: ForwardTrace
) -> Dict[int, np.ndarray]:
    """``A_l B_{j,l}`` for ``j = 2..l``, sweeping backwards from the readout layer so
    that every product has only ``m_l`` rows"""
    _check_trace(cfg, trace)
    l = cfg.depth
    R = cfg.sigma * theta.layer(l) * trace.dx(l)[None, :]
    chain = {l: R}
    for j in range(l - 1, 1, -1):
        R = (cfg.scale * (R @ theta.layer(j))) * trace.dx(j)[None, :]
        chain[j] = R
    return chain


def bwd_inner(B1, B2) -> float:
    """``X' = tr(B1 B2^T)``, as a sum of entrywise products

    >>> float(bwd_inner(np.array([[1.0, 2.0], [3.0, 4.0]]), np.eye(2)))
    5.0
    """
    if isinstance(B1, BackpropMatrix) and isinstance(B2, BackpropMatrix):
        if (B1.k1, B1.k2) != (B2.k1, B2.k2):
            raise InvalidArgument(
                f'B_{{{B1.k1},{B1.k2}}} and B_{{{B2.k1},{B2.k2}}} are different blocks'
            )
    v1 = getattr(B1, 'values', B1)
    v2 = getattr(B2, 'values', B2)
    if v1.shape != v2.shape:
        raise InvalidArgument(f'shapes {v1.shape} and {v2.shape} differ')
    return float(np.einsum('ij,ij->', v1, v2))


def _kernel_from_readouts(cfg: MlpConfig, X, R1, R2) -> np.ndarray:
    l = cfg.depth
    K = X[l - 1] * np.eye(cfg.output_dim)
    weight = cfg.scale**2 / cfg.sigma**2
    for k in range(1, l):
        K = K + weight * X[k - 1] * (R1[k + 1] @ R2[k + 1].T)
    return K


def ntk_entry(
    cfg: MlpConfig, theta: Parameter, t1: ForwardTrace, t2: ForwardTrace
) -> np.ndarray:
    """The ``m_l x m_l`` kernel ``K_theta(x1, x2)`` of the inputs of two traces"""
    theta.check(cfg, head_ok=False)
    R1 = readout_chain(cfg, theta, t1)
    R2 = R1 if t2 is t1 else readout_chain(cfg, theta, t2)
    return _kernel_from_readouts(cfg, inner_products(t1, t2), R1, R2)


def jacobian_blocks(
    cfg: MlpConfig, theta: Parameter, x, *, budget: int = DFLT_JACOBIAN_BUDGET
) -> List[np.ndarray]:
    """Derivatives of the output with respect to ``A_1..A_l``, each flattened to an
    ``m_l x (m_k m_{k-1})`` block (row-major in ``A_k``).

    :param budget: largest number of elements allowed in a single block
    """
    theta.check(cfg, head_ok=False)
    w = cfg.widths
    largest = max(w[-1] * w[k] * w[k - 1] for k in range(1, cfg.depth + 1))
    if largest > budget:
        raise InvalidArgument(
            f'a Jacobian block would hold {largest} elements, over the budget of {budget}'
        )
    trace = forward(cfg, theta, x)
    l = cfg.depth
    blocks = [np.kron(np.eye(w[l]), trace.x(l)[None, :])]
    # C = d output / d N_k
    C = theta.layer(l) * trace.dx(l)[None, :]
    for k in range(l - 1, 0, -1):
        block = cfg.scale * np.einsum('ir,c->irc', C, trace.x(k))
        blocks.append(block.reshape(w[l], w[k] * w[k - 1]))
        if k > 1:
            C = (cfg.scale * (C @ theta.layer(k))) * trace.dx(k)[None, :]
    return blocks[::-1]


def ntk_entry_via_jacobian(
    cfg: MlpConfig, theta: Parameter, x1, x2, *, budget: int = DFLT_JACOBIAN_BUDGET
) -> np.ndarray:
    """``K_theta(x1, x2)`` as the Gram product of the parameter Jacobians, accumulated
    layer by layer

    >>> cfg = MlpConfig(depth=2, width=1, input_dim=1, output_dim=1, a=1, b=0)
    >>> theta = Parameter((np.array([[2.0]]), np.array([[3.0]])))
    >>> ntk_entry_via_jacobian(cfg, theta, [1.0], [1.0])
    array([[13.]])
    """
    J1 = jacobian_blocks(cfg, theta, x1, budget=budget)
    J2 = jacobian_blocks(cfg, theta, x2, budget=budget)
    return sum(b1 @ b2.T for b1, b2 in zip(J1, J2))


def _bwd_inners_to_readout(cfg, theta_head, t1, t2) -> np.ndarray:
    """``X'_{k+1,l}`` for ``k = 1..l-1``"""
    l = cfg.depth
    B1 = backprop_chain(cfg, theta_head, t1, l)
    B2 = B1 if t2 is t1 else backprop_chain(cfg, theta_head, t2, l)
    return np.array([bwd_inner(B1[k + 1], B2[k + 1]) for k in range(1, l)])


def expected_ntk_entry(
    cfg: MlpConfig, theta_head: Parameter, t1: ForwardTrace, t2: ForwardTrace
) -> np.ndarray:
    """Expectation of ``ntk_entry`` over the readout layer ``A_l``, the other layers
    fixed: ``(sum_{k<l} X_k X'_{k+1,l} + X_l) I``"""
    X = inner_products(t1, t2)
    scalar = X[:-1] @ _bwd_inners_to_readout(cfg, theta_head, t1, t2) + X[-1]
    return scalar * np.eye(cfg.output_dim)


def diagnostic_j(
    cfg: MlpConfig, theta_head: Parameter, t1: ForwardTrace, t2: ForwardTrace
) -> np.ndarray:
    """``J = sum_{k<l} X_k B_{k+1,l}(x1) B_{k+1,l}(x2)^T``, of shape ``m_{l-1} x m_{l-1}``.
    The kernel minus its ``X_l I`` term is ``(sigma^{-1} m^{q/2} A_l) J (...)^T``."""
    l = cfg.depth
    X = inner_products(t1, t2)
    B1 = backprop_chain(cfg, theta_head, t1, l)
    B2 = B1 if t2 is t1 else backprop_chain(cfg, theta_head, t2, l)
    J = np.zeros((cfg.widths[l - 1], cfg.widths[l - 1]))
    for k in range(1, l):
        J += X[k - 1] * (B1[k + 1].values @ B2[k + 1].values.T)
    return J


@dataclass(frozen=True)
class NtkMatrix:
    """The ``n m_l x n m_l`` kernel matrix of a dataset, made of ``m_l x m_l`` blocks"""

    n: int
    block_dim: int
    values: np.ndarray

    def block(self, i1: int, i2: int) -> np.ndarray:
        d = self.block_dim
        return self.values[i1 * d : (i1 + 1) * d, i2 * d : (i2 + 1) * d]


def as_points(dataset) -> np.ndarray:
    points = np.asarray(getattr(dataset, 'points', dataset), dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise InvalidArgument(f'need a nonempty set of points, got shape {points.shape}')
    return points


def ntk_matrix(cfg: MlpConfig, theta: Parameter, dataset) -> NtkMatrix:
    """``K(theta)``, with block ``(i1, i2)`` equal to ``K_theta(x_i1, x_i2) / n``.

    Blocks below the diagonal are mirrored from the ones above it.
    """
    theta.check(cfg, head_ok=False)
    points = as_points(dataset)
    n, d = len(points), cfg.output_dim
    traces = [forward(cfg, theta, x) for x in points]
    readouts = [readout_chain(cfg, theta, t) for t in traces]

    def entry(i1, i2):
        X = inner_products(traces[i1], traces[i2])
        return _kernel_from_readouts(cfg, X, readouts[i1], readouts[i2]) / n

    K = np.empty((n * d, n * d))
    for i1 in range(n):
        for i2 in range(i1, n):
            block = entry(i1, i2)
            K[i1 * d : (i1 + 1) * d, i2 * d : (i2 + 1) * d] = block
            K[i2 * d : (i2 + 1) * d, i1 * d : (i1 + 1) * d] = block.T
    if n > 1:
        _check_mirrored(entry(0, n - 1), entry(n - 1, 0))
    return NtkMatrix(n, d, K)


def _check_mirrored(upper: np.ndarray, lower: np.ndarray):
    atol = DFLT_MIRROR_RTOL * np.abs(upper).max()
    if not np.allclose(lower, upper.T, rtol=DFLT_MIRROR_RTOL, atol=atol):
        raise NtkEocError(
            'kernel blocks K(x_1, x_n) and K(x_n, x_1) are not transposes of each '
            f'other (largest difference {np.abs(lower - upper.T).max():.3g})'
        )
