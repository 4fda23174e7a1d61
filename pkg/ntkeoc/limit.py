"""Dual maps of the (a,b)-ReLU at the edge of chaos, and the infinite-width kernel.

With ``Delta = b^2 / (a^2 + b^2)`` and ``t = arccos(rho)``, the cosine map is

    rho_map(rho) = rho + Delta (2/pi) (sin t - t cos t)

which is ``sigma^2 E[phi(u1) phi(u2)]`` for unit normals of correlation ``rho``, and its
derivative is ``rho_prime(rho) = 1 - Delta (2/pi) t``. Written this way both are exactly
1 at ``rho = 1`` and exactly the identity (resp. 1) when ``b = 0``.

>>> d = DualMaps(0, 1)
>>> abs(rho_map(d, 0.0) - 2 / np.pi) < 1e-15
True
>>> rho_map(d, 1.0), rho_prime(d, 1.0)
(1.0, 1.0)
"""
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from ntkeoc.base import MlpConfig
from ntkeoc.kernel import NtkMatrix, as_points
from ntkeoc.util import DivergentMap, InvalidArgument, ensure_count

TWO_OVER_PI = 2 / np.pi
ICD_SLOPE = 4 / (3 * np.pi)  # asymptotic growth of w per layer, per unit Delta


@dataclass(frozen=True)
class DualMaps:
    """The activation ``a s + b |s|`` seen through its dual maps"""

    a: float
    b: float
    sigma2: float = field(init=False)
    delta: float = field(init=False)

    def __post_init__(self):
        a, b = float(self.a), float(self.b)
        if a == 0 and b == 0:
            raise InvalidArgument('the activation is zero: (a, b) = (0, 0)')
        norm2 = a**2 + b**2
        object.__setattr__(self, 'sigma2', 1 / norm2)
        object.__setattr__(self, 'delta', b**2 / norm2)

    @classmethod
    def from_config(cls, cfg: MlpConfig) -> 'DualMaps':
        return cls(cfg.a, cfg.b)

    @property
    def icd_slope(self) -> float:
        """Limit of ``(omega^k(w) - w) / k`` as ``k`` grows"""
        return self.delta * ICD_SLOPE


def _in_interval(x, lo, hi, name):
    arr = np.asarray(x, dtype=np.float64)
    if np.isnan(arr).any() or (arr < lo).any() or (arr > hi).any():
        raise InvalidArgument(f'{name} must be in [{lo}, {hi}], was {x}')
    return arr


def _out(arr):
    return float(arr) if arr.ndim == 0 else arr


def _angle(rho):
    return np.arccos(np.clip(rho, -1.0, 1.0))


def rho_map(d: DualMaps, rho: Union[float, np.ndarray]):
    """Cosine of the activations of two unit-variance preactivations of cosine ``rho``

    >>> rho_map(DualMaps(1, 0), 0.3)
    0.3
    """
    rho = _in_interval(rho, -1, 1, 'rho')
    t = _angle(rho)
    s = np.sqrt(np.clip(1 - rho**2, 0.0, None))
    return _out(rho + d.delta * TWO_OVER_PI * (s - t * rho))


def rho_prime(d: DualMaps, rho: Union[float, np.ndarray]):
    """Derivative of ``rho_map``, which is also the dual map of ``phi'``

    >>> round(rho_prime(DualMaps(0, 1), -1.0), 12)
    -1.0
    """
    rho = _in_interval(rho, -1, 1, 'rho')
    return _out(1 - d.delta * TWO_OVER_PI * _angle(rho))


def zeta(d: DualMaps, z: Union[float, np.ndarray]):
    """Squared cosine distance map ``(1 - rho_map(1 - 2z)) / 2``

    >>> zeta(DualMaps(1, 1), 0.0)
    0.0
    """
    z = _in_interval(z, 0, 1, 'z')
    return _out((1 - np.asarray(rho_map(d, 1 - 2 * z))) / 2)


def omega(d: DualMaps, w: float) -> float:
    """Inverse cosine distance map ``zeta(w^{-2})^{-1/2}``, defined for ``w > 1``

    >>> round(omega(DualMaps(1, 0), 3.0), 12)
    3.0
    """
    w = float(w)
    if not w > 1:
        raise InvalidArgument(f'w must be greater than 1, was {w}')
    z = zeta(d, w**-2)
    if not z > 0:
        raise DivergentMap(f'zeta vanishes at w = {w}, so omega is infinite there')
    return z**-0.5


def omega_iterate(d: DualMaps, w: float, k: int) -> float:
    """``omega`` applied ``k`` times to ``w``"""
    k = ensure_count(k, 'k', minimum=0)
    for _ in range(k):
        w = omega(d, w)
    return float(w)


def rho_iterate(d: DualMaps, rho1: float, k: int) -> float:
    """``rho_map`` applied ``k`` times to ``rho1``

    >>> rho_iterate(DualMaps(1, 1), 1.0, 50)
    1.0
    """
    k = ensure_count(k, 'k', minimum=0)
    rho = float(_in_interval(rho1, -1, 1, 'rho1'))
    for _ in range(k):
        rho = rho_map(d, rho)
    return rho


def rho_iterates(d: DualMaps, rho1: float, count: int) -> np.ndarray:
    """The first ``count`` iterates ``rho1, rho_map(rho1), rho_map(rho_map(rho1)), ...``,
    which are the limiting cosines of layers ``1..count``"""
    count = ensure_count(count, 'count')
    out = np.empty(count)
    out[0] = float(_in_interval(rho1, -1, 1, 'rho1'))
    for k in range(1, count):
        out[k] = rho_map(d, out[k - 1])
    return out


def _norm_and_cosine(x1, x2):
    x1, x2 = np.asarray(x1, dtype=np.float64), np.asarray(x2, dtype=np.float64)
    if x1.shape != x2.shape:
        raise InvalidArgument(f'points of shapes {x1.shape} and {x2.shape}')
    n1, n2 = np.linalg.norm(x1), np.linalg.norm(x2)
    if n1 == 0 or n2 == 0:
        raise InvalidArgument('the limiting kernel is undefined at the zero vector')
    if np.array_equal(x1, x2):
        return n1 * n2, 1.0
    return n1 * n2, float(np.clip(x1 @ x2 / (n1 * n2), -1.0, 1.0))


def limiting_ntk_scalar(d: DualMaps, x1, x2, l: int) -> float:
    """The multiple of the identity that ``limiting_ntk_entry`` returns:
    ``||x1|| ||x2|| sum_{k=1..l} r_k prod_{k'=k..l-1} rho_prime(r_{k'})``, where
    ``r_k`` is the ``(k-1)``-th iterate of the input cosine"""
    l = ensure_count(l, 'l', minimum=2)
    norms, rho1 = _norm_and_cosine(x1, x2)
    r = rho_iterates(d, rho1, l)
    derivs = np.asarray(rho_prime(d, r[:-1]))
    # suffix[k] = prod of derivs[k:], with suffix[l-1] = 1
    suffix = np.ones(l)
    for k in range(l - 2, -1, -1):
        suffix[k] = suffix[k + 1] * derivs[k]
    return float(norms * (r @ suffix))


def limiting_ntk_entry(d: DualMaps, x1, x2, l: int, m_l: int) -> np.ndarray:
    """The infinite-width kernel ``K_inf(x1, x2)``, a multiple of ``I_{m_l}``

    >>> limiting_ntk_entry(DualMaps(1, 1), [3.0, 4.0], [3.0, 4.0], l=3, m_l=2)
    array([[75.,  0.],
           [ 0., 75.]])
    """
    m_l = ensure_count(m_l, 'm_l')
    return limiting_ntk_scalar(d, x1, x2, l) * np.eye(m_l)


def limiting_ntk_matrix(d: DualMaps, dataset, l: int, m_l: int) -> NtkMatrix:
    """``K_inf``, blockwise ``K_inf(x_i1, x_i2) / n``

    >>> K = limiting_ntk_matrix(DualMaps(1, 0), [[1.0, 0.0], [0.0, 1.0]], l=3, m_l=1)
    >>> K.values
    array([[1.5, 0. ],
           [0. , 1.5]])
    """
    points = as_points(dataset)
    m_l = ensure_count(m_l, 'm_l')
    n = len(points)
    scalars = np.empty((n, n))
    for i1 in range(n):
        for i2 in range(i1, n):
            scalars[i1, i2] = scalars[i2, i1] = limiting_ntk_scalar(
                d, points[i1], points[i2], l
            )
    return NtkMatrix(n, m_l, np.kron(scalars / n, np.eye(m_l)))
