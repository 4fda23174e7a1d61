"""Edge-of-chaos MLPs with (a,b)-ReLU activations: configuration, initialization and
forward traces.

Layers are numbered from 1. ``A_k`` has shape ``m_k x m_{k-1}``, the activations are
``x_1 = x`` and ``x_{k+1} = m_k^{-1/2} phi(N_k)`` with ``N_k = m^{q/2} A_k x_k``, and
the network output is ``A_l x_l``.

>>> cfg = MlpConfig(depth=3, width=4, width_factors=(1, 4), input_dim=3, output_dim=2, q=1)
>>> cfg.widths
(3, 4, 16, 2)
>>> theta = init_parameter(cfg, seed=0)
>>> [A.shape for A in theta.layers]
[(4, 3), (16, 4), (2, 16)]
>>> trace = forward(cfg, theta, np.ones(3))
>>> trace.output.shape
(2,)
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from ntkeoc.numerics import Rng, ensure_rng, gaussian_matrix
from ntkeoc.util import (
    DFLT_INPUT_DIM,
    DFLT_OUTPUT_DIM,
    DegenerateInput,
    InvalidArgument,
    ensure_count,
)

logger = logging.getLogger(__name__)


def phi(s, a, b):
    """The (a,b)-ReLU ``a s + b |s|``

    >>> float(phi(2, 1, 1)), float(phi(-2, 1, 1)), float(phi(-3, 0, 1))
    (4.0, 0.0, 3.0)
    """
    return a * s + b * np.abs(s)


def phi_prime(s, a, b):
    """Derivative of the (a,b)-ReLU, ``a + b sgn(s)``, taking the value ``a`` at 0

    >>> float(phi_prime(5, 1, 1)), float(phi_prime(0, 1, 1)), float(phi_prime(-1, 0, 1))
    (2.0, 1.0, -1.0)
    """
    return a + b * np.sign(s)


def _real(x, name):
    x = float(x)
    if not np.isfinite(x):
        raise InvalidArgument(f'{name} must be finite, was {x}')
    return x


@dataclass(frozen=True)
class MlpConfig:
    """Architecture and activation of an MLP at the edge of chaos.

    :param depth: number of layers ``l`` (at least 2)
    :param width: base width ``m``
    :param width_factors: ``gamma_1..gamma_{l-1}``, so that ``m_k = gamma_k m``
        (all ones if not given)
    :param input_dim: ``m_0``
    :param output_dim: ``m_l``
    :param q: scaling exponent, the same for every layer
    :param a: linear coefficient of the activation
    :param b: absolute-value coefficient of the activation

    >>> cfg = MlpConfig(depth=4, width=4, width_factors=(1, 4, 9), input_dim=2, output_dim=3)
    >>> cfg.widths
    (2, 4, 16, 36, 3)
    >>> cfg.delta, round(cfg.kappa ** 2, 12)
    (0.5, 2.0)
    >>> MlpConfig(depth=1, width=4)
    Traceback (most recent call last):
      ...
    ntkeoc.util.InvalidArgument: depth must be an integer >= 2, was 1
    """

    depth: int
    width: int
    width_factors: Optional[Tuple[int, ...]] = None
    input_dim: int = DFLT_INPUT_DIM
    output_dim: int = DFLT_OUTPUT_DIM
    q: float = 0.0
    a: float = 1.0
    b: float = 1.0
    widths: Tuple[int, ...] = field(init=False)
    sigma: float = field(init=False)
    delta: float = field(init=False)
    kappa: float = field(init=False)

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)
        set_('depth', ensure_count(self.depth, 'depth', minimum=2))
        set_('width', ensure_count(self.width, 'width'))
        set_('input_dim', ensure_count(self.input_dim, 'input_dim'))
        set_('output_dim', ensure_count(self.output_dim, 'output_dim'))
        width_factors = self.width_factors
        if width_factors is None:
            width_factors = (1,) * (self.depth - 1)
        width_factors = tuple(ensure_count(g, 'width factor') for g in width_factors)
        if len(width_factors) != self.depth - 1:
            raise InvalidArgument(
                f'need {self.depth - 1} width factors for depth {self.depth}, '
                f'got {len(width_factors)}'
            )
        set_('width_factors', width_factors)
        a, b = _real(self.a, 'a'), _real(self.b, 'b')
        if a == 0 and b == 0:
            raise InvalidArgument('the activation is zero: (a, b) = (0, 0)')
        set_('a', a)
        set_('b', b)
        set_('q', _real(self.q, 'q'))
        norm2 = a**2 + b**2
        set_(
            'widths',
            (self.input_dim,)
            + tuple(g * self.width for g in width_factors)
            + (self.output_dim,),
        )
        set_('sigma', norm2**-0.5)
        set_('delta', b**2 / norm2)
        set_('kappa', (abs(a) + abs(b)) / np.sqrt(norm2))

    @property
    def init_std(self) -> float:
        """Standard deviation of the entries of every ``A_k``: ``sigma m^{-q/2}``"""
        return self.sigma * self.width ** (-self.q / 2)

    @property
    def scale(self) -> float:
        """The ``m^{q/2}`` factor applied to every ``A_k`` in the forward pass"""
        return self.width ** (self.q / 2)

    @property
    def n_params(self) -> int:
        return sum(self.widths[k] * self.widths[k - 1] for k in range(1, self.depth + 1))

    def describe(self) -> dict:
        return {
            'widths': list(self.widths),
            'sigma': self.sigma,
            'delta': self.delta,
            'kappa': self.kappa,
            'n_params': self.n_params,
        }


@dataclass(frozen=True)
class Parameter:
    """The layer matrices ``A_1..A_l`` (or ``A_1..A_{l-1}`` for a head)"""

    layers: Tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, 'layers', tuple(self.layers))

    def __len__(self):
        return len(self.layers)

    def layer(self, k: int) -> np.ndarray:
        """``A_k``, counting from 1"""
        if not 1 <= k <= len(self.layers):
            raise InvalidArgument(f'no layer {k} in a {len(self.layers)}-layer parameter')
        return self.layers[k - 1]

    def head(self) -> 'Parameter':
        """``theta_{1:l-1}``: everything but the readout layer"""
        return Parameter(self.layers[:-1])

    def with_layer(self, k: int, A: np.ndarray) -> 'Parameter':
        """A copy with ``A_k`` replaced by ``A``"""
        old = self.layer(k)
        if A.shape != old.shape:
            raise InvalidArgument(f'layer {k} has shape {old.shape}, got {A.shape}')
        layers = list(self.layers)
        layers[k - 1] = A
        return Parameter(tuple(layers))

    def check(self, cfg: MlpConfig, *, head_ok=True):
        """Raise ``InvalidArgument`` if the shapes don't fit ``cfg``"""
        n = len(self.layers)
        if n != cfg.depth and not (head_ok and n == cfg.depth - 1):
            raise InvalidArgument(f'{n} layers for a depth {cfg.depth} config')
        for k, A in enumerate(self.layers, 1):
            expected = (cfg.widths[k], cfg.widths[k - 1])
            if A.shape != expected:
                raise InvalidArgument(f'A_{k} has shape {A.shape}, expected {expected}')


def init_parameter(cfg: MlpConfig, seed: Union[int, Rng]) -> Parameter:
    """Draw ``A_1..A_l`` with i.i.d. ``N(0, sigma^2 m^{-q})`` entries, layer ``k`` from
    child stream ``k`` of ``seed``.

    >>> cfg = MlpConfig(depth=2, width=4, q=1, a=1, b=1)
    >>> round(cfg.init_std, 12) == round(2 ** -0.5 / 2, 12)
    True
    """
    rng = ensure_rng(seed)
    std = cfg.init_std
    return Parameter(
        tuple(
            gaussian_matrix(rng.child(k), cfg.widths[k], cfg.widths[k - 1], std)
            for k in range(1, cfg.depth + 1)
        )
    )


@dataclass(frozen=True)
class ForwardTrace:
    """Everything the forward pass computes for one input.

    Lists are stored from layer 1 on, and read through the 1-based accessors:
    ``x(k)`` for ``k in [1:l]``, ``preactivation(k)`` for ``k in [1:l-1]``,
    ``dx(k)`` (the derivative vector ``m_{k-1}^{-1/2} phi'(N_{k-1})``) for
    ``k in [2:l]`` and ``tau(k) = ||x_k||``.
    ``output`` is None for traces of a parameter head.
    """

    activations: Tuple[np.ndarray, ...]
    preactivations: Tuple[np.ndarray, ...]
    derivatives: Tuple[np.ndarray, ...]
    norms: np.ndarray
    output: Optional[np.ndarray] = None

    @property
    def depth(self) -> int:
        return len(self.activations)

    def x(self, k: int) -> np.ndarray:
        return self.activations[k - 1]

    def preactivation(self, k: int) -> np.ndarray:
        return self.preactivations[k - 1]

    def dx(self, k: int) -> np.ndarray:
        if k < 2:
            raise InvalidArgument(f'derivative vectors start at layer 2, asked for {k}')
        return self.derivatives[k - 2]

    def tau(self, k: int) -> float:
        return float(self.norms[k - 1])


def forward(cfg: MlpConfig, theta: Parameter, x) -> ForwardTrace:
    """Run ``x`` through the network and keep every intermediate value.

    >>> cfg = MlpConfig(depth=2, width=1, input_dim=1, output_dim=1, a=1, b=0)
    >>> theta = Parameter((np.array([[2.0]]), np.array([[3.0]])))
    >>> t = forward(cfg, theta, [1.0])
    >>> float(t.preactivation(1)[0]), float(t.x(2)[0]), float(t.output[0])
    (2.0, 2.0, 6.0)
    """
    theta.check(cfg)
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (cfg.input_dim,):
        raise InvalidArgument(f'input has shape {x.shape}, expected ({cfg.input_dim},)')
    scale = cfg.scale
    activations, preactivations, derivatives = [x], [], []
    for k in range(1, cfg.depth):
        N = scale * (theta.layer(k) @ activations[-1])
        inv_sqrt_width = cfg.widths[k] ** -0.5
        preactivations.append(N)
        activations.append(inv_sqrt_width * phi(N, cfg.a, cfg.b))
        derivatives.append(inv_sqrt_width * phi_prime(N, cfg.a, cfg.b))
    output = None
    if len(theta) == cfg.depth:
        output = theta.layer(cfg.depth) @ activations[-1]
    norms = np.array([np.linalg.norm(v) for v in activations])
    return ForwardTrace(
        tuple(activations), tuple(preactivations), tuple(derivatives), norms, output
    )


def inner_products(t1: ForwardTrace, t2: ForwardTrace) -> np.ndarray:
    """``X_k = <x_k(x1), x_k(x2)>`` for ``k = 1..l``"""
    if t1.depth != t2.depth:
        raise InvalidArgument(f'traces of depths {t1.depth} and {t2.depth}')
    return np.array([v1 @ v2 for v1, v2 in zip(t1.activations, t2.activations)])


@dataclass(frozen=True)
class PairStats:
    """Per-layer inner products ``X_k``, cosines ``rho_k``, cosine distances
    ``z_k = (1 - rho_k) / 2`` and inverse cosine distances ``w_k = z_k^{-1/2}``
    (infinite where ``z_k = 0``), stored from layer 1 on."""

    inner_products: np.ndarray
    cosines: np.ndarray
    cosine_distances: np.ndarray
    inverse_cosine_distances: np.ndarray

    def rho(self, k: int) -> float:
        return float(self.cosines[k - 1])

    def z(self, k: int) -> float:
        return float(self.cosine_distances[k - 1])

    def w(self, k: int) -> float:
        return float(self.inverse_cosine_distances[k - 1])


def pair_stats(t1: ForwardTrace, t2: ForwardTrace) -> PairStats:
    """Compare two traces layer by layer.

    >>> cfg = MlpConfig(depth=3, width=8, input_dim=2)
    >>> theta = init_parameter(cfg, 1)
    >>> s = pair_stats(forward(cfg, theta, [1.0, 0.0]), forward(cfg, theta, [0.0, 1.0]))
    >>> s.rho(1), s.z(1), round(s.w(1) ** 2, 12)
    (0.0, 0.5, 2.0)
    """
    X = inner_products(t1, t2)
    for k in range(1, t1.depth + 1):
        if t1.tau(k) == 0 or t2.tau(k) == 0:
            raise DegenerateInput(f'activation at layer {k} has zero norm', layer=k)
    rho = np.clip(X / (t1.norms * t2.norms), -1.0, 1.0)
    same = [np.array_equal(v1, v2) for v1, v2 in zip(t1.activations, t2.activations)]
    rho[same] = 1.0
    z = (1 - rho) / 2
    with np.errstate(divide='ignore'):
        w = np.where(z > 0, z**-0.5, np.inf)
    return PairStats(X, rho, z, w)
