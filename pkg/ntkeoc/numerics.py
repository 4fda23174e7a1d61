"""Random streams, dense matrix primitives and the bivariate Gaussian quadrature.

Matrices are plain 64-bit ``numpy`` arrays. The ones produced here are marked read-only.
"""
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Tuple

import numpy as np

from ntkeoc.util import (
    DFLT_POWER_MAX_ITER,
    DFLT_POWER_TOL,
    DFLT_QUAD_ORDER,
    InvalidArgument,
    NumericFailure,
    ensure_count,
)

logger = logging.getLogger(__name__)

DFLT_POWER_BLOCK = 4
DFLT_QUAD_PANEL_ORDER = 10
DFLT_QUAD_RADIUS = 12.0
DFLT_QUAD_RADIAL_PANELS = 12

_TWO_PI = 2 * np.pi
_UNIFORM_SCALE = 2.0**-53


def read_only(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


# --------------------------------------------------------------------------------------
# Random streams


@dataclass
class Rng:
    """Counter-based random stream identified by a seed and a path of child indices.

    The generator is numpy's ``Philox`` keyed from ``(seed, path)``, and normals come
    from our own Box-Muller transform of its raw 64-bit output, so the values drawn
    depend on nothing but the seed, the path and the number of draws made so far.

    >>> r = Rng(7)
    >>> a = r.child(3).normal(4)
    >>> b = Rng(7).child(3).normal(4)
    >>> bool((a == b).all())
    True
    >>> bool((Rng(7).child(2).normal(4) == a).any())
    False

    A child doesn't depend on how much its parent was used:

    >>> _ = r.normal(100)
    >>> bool((r.child(3).normal(4) == a).all())
    True
    """

    seed: int
    path: Tuple[int, ...] = ()
    _bit_gen: np.random.Philox = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.seed) != self.seed or self.seed < 0:
            raise InvalidArgument(f'seed must be a nonnegative integer, was {self.seed}')
        self.seed = int(self.seed)
        self.path = tuple(int(i) for i in self.path)
        key = np.random.SeedSequence(self.seed, spawn_key=self.path).generate_state(
            2, np.uint64
        )
        self._bit_gen = np.random.Philox(key=key)

    def child(self, idx: int) -> 'Rng':
        """The independent stream number ``idx`` under this one"""
        if int(idx) != idx or idx < 0:
            raise InvalidArgument(f'child index must be a nonnegative integer, was {idx}')
        return Rng(self.seed, self.path + (int(idx),))

    def uniform(self, size: int) -> np.ndarray:
        """``size`` uniforms in the open interval (0, 1)"""
        raw = self._bit_gen.random_raw(size)
        return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _UNIFORM_SCALE

    def normal(self, size: int) -> np.ndarray:
        """``size`` standard normals (Box-Muller, cosine and sine outputs interleaved)"""
        n_pairs = -(-size // 2)
        u = self.uniform(2 * n_pairs).reshape(n_pairs, 2)
        radius = np.sqrt(-2.0 * np.log(u[:, 0]))
        angle = _TWO_PI * u[:, 1]
        out = np.empty((n_pairs, 2))
        out[:, 0] = radius * np.cos(angle)
        out[:, 1] = radius * np.sin(angle)
        return out.reshape(-1)[:size]

    def index_pair(self, n: int) -> Tuple[int, int]:
        """Two distinct indices of ``range(n)``, uniformly

        >>> i, j = Rng(0).index_pair(2)
        >>> sorted([i, j])
        [0, 1]
        """
        n = ensure_count(n, 'n', minimum=2)
        u1, u2 = self.uniform(2)
        i = min(int(u1 * n), n - 1)
        j = min(int(u2 * (n - 1)), n - 2)
        if j >= i:
            j += 1
        return i, j


def ensure_rng(rng) -> Rng:
    """An ``Rng`` from an ``Rng`` or a seed"""
    if isinstance(rng, Rng):
        return rng
    return Rng(rng)


# --------------------------------------------------------------------------------------
# Matrices


def gaussian_matrix(rng: Rng, rows: int, cols: int, std: float) -> np.ndarray:
    """A read-only ``rows x cols`` matrix of i.i.d. centered normals with standard
    deviation ``std``, sampled in row-major order.

    >>> A = gaussian_matrix(Rng(1), 2, 3, 0.5)
    >>> A.shape
    (2, 3)
    >>> bool((A == gaussian_matrix(Rng(1), 2, 3, 0.5)).all())
    True
    >>> gaussian_matrix(Rng(1), 2, 2, 0.0)
    Traceback (most recent call last):
      ...
    ntkeoc.util.InvalidArgument: std must be positive and finite, was 0.0
    """
    rows = ensure_count(rows, 'rows')
    cols = ensure_count(cols, 'cols')
    if not (np.isfinite(std) and std > 0):
        raise InvalidArgument(f'std must be positive and finite, was {std}')
    return read_only(std * rng.normal(rows * cols).reshape(rows, cols))


def _as_matrix(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.size == 0:
        raise InvalidArgument(f'expected a nonempty matrix, got shape {A.shape}')
    if not np.isfinite(A).all():
        raise InvalidArgument('matrix has non-finite entries')
    return A


def _start_block(dim: int, block_size: int) -> np.ndarray:
    """Normalized all-ones vector followed by the leading coordinate vectors"""
    V = np.zeros((dim, block_size))
    V[:, 0] = 1 / np.sqrt(dim)
    for j in range(1, block_size):
        V[j - 1, j] = 1.0
    return np.linalg.qr(V)[0]


def spectral_norm(
    A,
    *,
    tol: float = DFLT_POWER_TOL,
    max_iter: int = DFLT_POWER_MAX_ITER,
    block_size: int = DFLT_POWER_BLOCK,
) -> float:
    """Largest singular value of ``A``, by power iteration on its Gram matrix.

    The iteration runs on a small block of vectors led by the all-ones vector, so that
    a start orthogonal to the top singular vector, or two nearly equal top singular
    values, don't stall it. It stops when the leading Ritz pair ``(lam, v)`` satisfies
    ``||G v - lam v|| <= tol * lam``.

    :param A: a nonempty finite matrix
    :param tol: relative residual tolerance
    :param max_iter: raise ``NumericFailure`` (carrying the last iterate) beyond this

    >>> round(spectral_norm(np.diag([3.0, 1.0, 2.0])), 12)
    3.0
    >>> spectral_norm(np.zeros((2, 3)))
    0.0
    >>> round(spectral_norm([[1.0, -1.0], [-1.0, 1.0]]), 12)
    2.0
    """
    A = _as_matrix(A)
    # the smaller of the two Gram matrices, so that A and A.T share it
    G = A.T @ A if A.shape[1] <= A.shape[0] else A @ A.T
    if not np.abs(G).max() > 0:
        return 0.0
    dim = G.shape[0]
    V = _start_block(dim, min(dim, block_size))
    v = V[:, 0]
    for i in range(max_iter):
        W = G @ V
        H = V.T @ W
        evals, evecs = np.linalg.eigh((H + H.T) / 2)
        lam, u = evals[-1], evecs[:, -1]
        v = V @ u
        residual = np.linalg.norm(W @ u - lam * v)
        if lam > 0 and residual <= tol * lam:
            logger.debug(f'spectral_norm converged after {i + 1} iterations')
            return float(np.sqrt(lam))
        V = np.linalg.qr(W)[0]
    raise NumericFailure(
        f'power iteration did not reach tolerance {tol} in {max_iter} iterations',
        last_iterate=v,
    )


# --------------------------------------------------------------------------------------
# Bivariate Gaussian quadrature


def _wrap_angle(t):
    return (np.asarray(t) + np.pi) % _TWO_PI - np.pi


@lru_cache(maxsize=8)
def _legendre(order: int):
    return np.polynomial.legendre.leggauss(order)


def _panel_rule(breaks, n_panels: int, panel_order: int):
    """Gauss-Legendre nodes and weights on ``[breaks[0], breaks[-1]]``, with panel
    edges at every break and about ``n_panels`` panels in total"""
    x, w = _legendre(panel_order)
    lengths = np.diff(breaks)
    total = breaks[-1] - breaks[0]
    nodes, weights = [], []
    for lo, length in zip(breaks[:-1], lengths):
        if length <= 0:
            continue
        k = max(1, int(round(n_panels * length / total)))
        edges = np.linspace(lo, lo + length, k + 1)
        half = np.diff(edges)[:, None] / 2
        mid = (edges[:-1] + edges[1:])[:, None] / 2
        nodes.append((mid + half * x).ravel())
        weights.append((half * w).ravel())
    return np.concatenate(nodes), np.concatenate(weights)


def bivariate_dual_quadrature(
    f: Callable, g: Callable, rho: float, *, order: int = DFLT_QUAD_ORDER
) -> float:
    """``E[f(u1) g(u2)]`` for standard normals ``u1, u2`` with correlation ``rho``.

    Writes ``u2 = rho u1 + sqrt(1 - rho^2) u_perp`` and integrates over ``(u1, u_perp)``
    in polar coordinates. The angular rule has panel edges at the angles where ``u1``
    or ``u2`` changes sign, where kinked integrands like the (a,b)-ReLU ones lose
    smoothness, and at least ``order`` nodes. ``f`` and ``g`` must accept arrays.

    >>> abs(bivariate_dual_quadrature(np.abs, np.abs, 0.0) - 2 / np.pi) < 1e-10
    True
    >>> abs(bivariate_dual_quadrature(lambda s: s, lambda s: s, 0.7) - 0.7) < 1e-10
    True
    >>> bivariate_dual_quadrature(np.abs, np.abs, 1.5)
    Traceback (most recent call last):
      ...
    ntkeoc.util.InvalidArgument: rho must be in [-1, 1], was 1.5
    """
    if not -1 <= rho <= 1:
        raise InvalidArgument(f'rho must be in [-1, 1], was {rho}')
    order = ensure_count(order, 'order')
    alpha = np.arccos(rho)
    kinks = _wrap_angle([-np.pi / 2, np.pi / 2, alpha - np.pi / 2, alpha + np.pi / 2])
    breaks = np.unique(np.concatenate([[-np.pi, np.pi], kinks]))
    n_panels = max(1, -(-order // DFLT_QUAD_PANEL_ORDER))
    theta, w_theta = _panel_rule(breaks, n_panels, DFLT_QUAD_PANEL_ORDER)
    r, w_r = _panel_rule(
        np.array([0.0, DFLT_QUAD_RADIUS]), DFLT_QUAD_RADIAL_PANELS, DFLT_QUAD_PANEL_ORDER
    )
    w_r = w_r * r * np.exp(-(r**2) / 2) / _TWO_PI

    s = np.sqrt(max(0.0, 1.0 - rho**2))
    u1 = np.outer(r, np.cos(theta))
    u_perp = np.outer(r, np.sin(theta))
    u2 = rho * u1 + s * u_perp
    values = np.asarray(f(u1), dtype=np.float64) * np.asarray(g(u2), dtype=np.float64)
    return float(w_r @ values @ w_theta)
