"""Monte Carlo experiments on finite-width networks at the edge of chaos.

Three experiments compare finite networks with their infinite-width limits:

- ``icd``: the inverse cosine distance ``w_k`` of a pair of inputs at every layer,
  against its limit (``run_icd_experiment``)
- ``concentration``: the spectral distance between the kernel matrix ``K(theta)`` of a
  dataset and its limit ``K_inf``, across widths (``run_concentration_experiment``)
- ``gia``: how far the conditional expectation of a backprop inner product is from its
  value under gradient independence, against the bound on that distance
  (``run_gia_experiment``)

Trial ``t`` of an experiment draws everything from child ``t`` of the experiment seed,
so results don't depend on the order or the parallelism trials run with.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import (
    Callable,
    Dict,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import numpy as np

from ntkeoc.base import (
    ForwardTrace,
    MlpConfig,
    Parameter,
    forward,
    init_parameter,
    pair_stats,
    phi,
    phi_prime,
)
from ntkeoc.kernel import backprop_chain, bwd_inner, ntk_matrix
from ntkeoc.limit import DualMaps, limiting_ntk_matrix, rho_iterates, rho_prime
from ntkeoc.numerics import Rng, read_only, spectral_norm
from ntkeoc.util import (
    DFLT_DRAW_CHUNK,
    DFLT_DRAW_ELEMENTS,
    DFLT_INNER_DRAWS,
    DFLT_OUTPUT_DIM,
    DFLT_PARALLEL_TOL,
    DFLT_PATTERN,
    DFLT_SEED,
    DFLT_TRIALS,
    DFLT_WORKERS,
    DegenerateInput,
    InvalidArgument,
    NumericFailure,
    chunk_indices,
    ensure_count,
)

logger = logging.getLogger(__name__)

EXPERIMENT_KINDS = ('icd', 'concentration', 'gia')
WIDTH_PATTERNS = ('constant', 'linear', 'quadratic')

# expected log-log growth of the icd error with depth, and its tolerance, per pattern
ICD_GROWTH_EXPONENTS = {
    'constant': (2.0, 0.5),
    'linear': (1.0, 0.5),
    'quadratic': (0.0, 0.3),
}
ICD_GROWTH_MIN_LAYER = 4
# quadrupling the width should halve the kernel error: log2 ratio in this range
CONCENTRATION_LOG2_RATIO = (0.7, 1.3)
GIA_SE_MULTIPLIER = 3.0

# child streams of a trial
THETA_STREAM, PAIR_STREAM, INNER_STREAM = 0, 1, 2


# --------------------------------------------------------------------------------------
# Datasets


@dataclass(frozen=True)
class Dataset:
    """Points ``x_1..x_n`` of a common dimension, stored as the rows of ``points``"""

    points: np.ndarray
    names: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.ndim != 2 or len(points) == 0 or points.shape[1] == 0:
            raise InvalidArgument(f'need a nonempty 2-d array of points, got {points.shape}')
        if not np.isfinite(points).all():
            raise InvalidArgument('points must be finite')
        object.__setattr__(self, 'points', read_only(points))
        if self.names is not None:
            names = tuple(self.names)
            if len(names) != len(points):
                raise InvalidArgument(f'{len(names)} names for {len(points)} points')
            object.__setattr__(self, 'names', names)

    def __len__(self):
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def max_norm(self) -> float:
        return float(np.linalg.norm(self.points, axis=1).max())

    def validate_no_parallel(self, tol: float = DFLT_PARALLEL_TOL) -> 'Dataset':
        """Raise ``InvalidArgument`` if two points (or a zero point) make the cosine
        of some pair reach ``1 - tol`` in absolute value"""
        norms = np.linalg.norm(self.points, axis=1)
        if (norms == 0).any():
            raise InvalidArgument(f'point {int(np.argmin(norms))} is zero')
        unit = self.points / norms[:, None]
        cosines = np.abs(unit @ unit.T)
        np.fill_diagonal(cosines, 0.0)
        i, j = np.unravel_index(np.argmax(cosines), cosines.shape)
        if cosines[i, j] >= 1 - tol:
            raise InvalidArgument(
                f'points {min(i, j)} and {max(i, j)} are parallel (|cosine| = {cosines[i, j]})'
            )
        return self


def lift_dataset(ds: Dataset, beta: float) -> Dataset:
    """Append the coordinate ``beta`` to every point, which plays the role of a bias

    >>> lift_dataset(Dataset([[3.0, 4.0]]), 1.0).points
    array([[3., 4., 1.]])
    """
    if not beta > 0:
        raise InvalidArgument(f'beta must be positive, was {beta}')
    column = np.full((len(ds), 1), float(beta))
    return Dataset(np.hstack([ds.points, column]), ds.names)


def synth_sphere(rng: Rng, n: int, dim: int, radius: float = 1.0) -> Dataset:
    """``n`` points drawn uniformly on the sphere of radius ``radius`` in ``R^dim``"""
    n, dim = ensure_count(n, 'n'), ensure_count(dim, 'dim')
    if not radius > 0:
        raise InvalidArgument(f'radius must be positive, was {radius}')
    g = rng.normal(n * dim).reshape(n, dim)
    return Dataset(radius * g / np.linalg.norm(g, axis=1, keepdims=True))


def synth_pair(angle: float, dim: int = 2) -> Dataset:
    """Two unit vectors of ``R^dim`` at the given angle

    >>> ds = synth_pair(np.pi / 3, 8)
    >>> ds.points.shape, round(float(ds.points[0] @ ds.points[1]), 14)
    ((2, 8), 0.5)
    """
    dim = ensure_count(dim, 'dim', minimum=2)
    if not 0 < angle < np.pi:
        raise InvalidArgument(f'angle must be in (0, pi), was {angle}')
    points = np.zeros((2, dim))
    points[0, 0] = 1.0
    points[1, 0], points[1, 1] = np.cos(angle), np.sin(angle)
    return Dataset(points, ('x1', 'x2'))


# --------------------------------------------------------------------------------------
# Configurations


def width_schedule(
    pattern: Union[str, Sequence[int]], m: int, l: int
) -> Tuple[int, ...]:
    """Width factors ``gamma_1..gamma_{l-1}`` for a named pattern, or an explicit list

    >>> width_schedule('quadratic', 4, 4)
    (1, 4, 9)
    >>> width_schedule('linear', 8, 5)
    (1, 2, 3, 4)
    >>> width_schedule([2, 2], 8, 4)
    Traceback (most recent call last):
      ...
    ntkeoc.util.InvalidArgument: need 3 width factors for depth 4, got 2
    """
    ensure_count(m, 'm')
    l = ensure_count(l, 'l', minimum=2)
    ks = range(1, l)
    if isinstance(pattern, str):
        if pattern == 'constant':
            return tuple(1 for _ in ks)
        elif pattern == 'linear':
            return tuple(ks)
        elif pattern == 'quadratic':
            return tuple(k * k for k in ks)
        raise InvalidArgument(
            f'unknown width pattern {pattern!r}, expected one of {WIDTH_PATTERNS} or a list'
        )
    gammas = tuple(ensure_count(g, 'width factor') for g in pattern)
    if len(gammas) != l - 1:
        raise InvalidArgument(f'need {l - 1} width factors for depth {l}, got {len(gammas)}')
    return gammas


def mk_config(
    depth: int,
    width: int,
    pattern: Union[str, Sequence[int]] = DFLT_PATTERN,
    *,
    input_dim: int,
    output_dim: int = DFLT_OUTPUT_DIM,
    q: float = 0.0,
    a: float = 1.0,
    b: float = 1.0,
) -> MlpConfig:
    return MlpConfig(
        depth=depth,
        width=width,
        width_factors=width_schedule(pattern, width, depth),
        input_dim=input_dim,
        output_dim=output_dim,
        q=q,
        a=a,
        b=b,
    )


@dataclass(frozen=True)
class ExperimentSpec:
    """What to run: the experiment kind, the networks (one per base width in
    ``widths``), the dataset and the Monte Carlo budget"""

    kind: str
    depth: int
    widths: Tuple[int, ...]
    dataset: Dataset
    pattern: Union[str, Tuple[int, ...]] = DFLT_PATTERN
    q: float = 0.0
    a: float = 1.0
    b: float = 1.0
    output_dim: int = DFLT_OUTPUT_DIM
    trials: int = DFLT_TRIALS
    seed: int = DFLT_SEED
    workers: int = DFLT_WORKERS
    inner_draws: int = DFLT_INNER_DRAWS

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise InvalidArgument(
                f'unknown experiment {self.kind!r}, expected one of {EXPERIMENT_KINDS}'
            )
        widths = (self.widths,) if np.isscalar(self.widths) else tuple(self.widths)
        if not widths:
            raise InvalidArgument('need at least one width')
        object.__setattr__(self, 'widths', tuple(ensure_count(m, 'm') for m in widths))
        if not isinstance(self.pattern, str):
            object.__setattr__(self, 'pattern', tuple(self.pattern))
        ensure_count(self.trials, 'trials')
        ensure_count(self.workers, 'workers')
        ensure_count(self.inner_draws, 'inner_draws', minimum=2)
        for m in self.widths:
            self.config(m)

    def config(self, m: int) -> MlpConfig:
        return mk_config(
            self.depth,
            m,
            self.pattern,
            input_dim=self.dataset.dim,
            output_dim=self.output_dim,
            q=self.q,
            a=self.a,
            b=self.b,
        )

    @property
    def dual_maps(self) -> DualMaps:
        return DualMaps(self.a, self.b)


# --------------------------------------------------------------------------------------
# Statistics


class RunningStats:
    """Single-pass mean and variance (Welford, with Chan's merge for batches),
    elementwise over arrays of a fixed ``shape``.

    >>> s = RunningStats(keep_values=True)
    >>> s.update([1.0, 2.0, 3.0])
    >>> s.count, float(s.mean), float(s.std), s.median()
    (3, 2.0, 1.0, 2.0)
    """

    def __init__(self, shape=(), *, keep_values=False):
        self.count = 0
        self.mean = np.zeros(shape)
        self._m2 = np.zeros(shape)
        self._values = [] if keep_values else None

    def add(self, x):
        self.update(np.asarray(x, dtype=np.float64)[None, ...])

    def update(self, batch):
        batch = np.asarray(batch, dtype=np.float64)
        n_b = len(batch)
        if n_b == 0:
            return
        mean_b = batch.mean(axis=0)
        m2_b = ((batch - mean_b) ** 2).sum(axis=0)
        n = self.count + n_b
        delta = mean_b - self.mean
        self.mean = self.mean + delta * (n_b / n)
        self._m2 = self._m2 + m2_b + delta**2 * (self.count * n_b / n)
        self.count = n
        if self._values is not None:
            self._values.extend(batch)

    @property
    def variance(self):
        if self.count < 2:
            return np.zeros_like(self._m2)
        return self._m2 / (self.count - 1)

    @property
    def std(self):
        return np.sqrt(self.variance)

    @property
    def standard_error(self):
        return self.std / np.sqrt(max(self.count, 1))

    def median(self) -> float:
        if not self._values:
            raise InvalidArgument('no values kept to take a median of')
        return float(np.median(self._values))


@dataclass(frozen=True)
class StatSummary:
    """Aggregate of one cell of a sweep: a layer index or a width as ``key``"""

    key: int
    mean: float
    std: float
    median: float
    count: int


def summarize(cells: Mapping[int, Iterable[float]]) -> List[StatSummary]:
    """Mean, sample standard deviation, median and count of every cell, in key order

    >>> summarize({2: [1.0, 2.0, 3.0], 3: [5.0]})
    [StatSummary(key=2, mean=2.0, std=1.0, median=2.0, count=3), StatSummary(key=3, mean=5.0, std=0.0, median=5.0, count=1)]
    """
    out = []
    for key in sorted(cells):
        stats = RunningStats(keep_values=True)
        stats.update(list(cells[key]))
        if stats.count == 0:
            raise InvalidArgument(f'cell {key} has no values')
        out.append(
            StatSummary(
                key, float(stats.mean), float(stats.std), stats.median(), stats.count
            )
        )
    return out


def loglog_slope(keys: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of ``log(values)`` against ``log(keys)``

    >>> round(loglog_slope([1, 2, 4, 8], [3, 12, 48, 192]), 12)
    2.0
    """
    keys, values = np.asarray(keys, dtype=float), np.asarray(values, dtype=float)
    if len(keys) < 2 or (keys <= 0).any() or (values <= 0).any():
        raise InvalidArgument('need at least two positive points to fit a log-log slope')
    return float(np.polyfit(np.log(keys), np.log(values), 1)[0])


@dataclass
class ExperimentResult:
    """Rows per output cell, trial failures, acceptance checks and scalar findings.

    ``value_stat`` says which statistic of a row (``'mean'`` or ``'median'``) is
    reported as its value. ``columns`` holds extra per-row columns of some cells,
    each a list aligned with the cell's rows.
    """

    kind: str
    value_stat: str
    cells: Dict[str, List[StatSummary]] = field(default_factory=dict)
    columns: Dict[str, Dict[str, List[float]]] = field(default_factory=dict)
    failures: int = 0
    failure_reasons: List[str] = field(default_factory=list)
    checks: Dict[str, bool] = field(default_factory=dict)
    findings: Dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.checks.values())


# --------------------------------------------------------------------------------------
# Trials


def trial_rng(seed: int, t: int) -> Rng:
    return Rng(seed).child(t)


def trial_parameter(cfg: MlpConfig, seed: int, t: int, cell: int = 0) -> Parameter:
    """The parameter of trial ``t`` for the ``cell``-th network of a sweep"""
    return init_parameter(cfg, trial_rng(seed, t).child(THETA_STREAM).child(cell))


@dataclass(frozen=True)
class TrialFailure:
    reason: str


def _run_trials(fn: Callable, trials: int, workers: int = 1) -> list:
    """``[fn(t) for t in range(trials)]``, possibly computed by a thread pool"""
    if workers <= 1:
        return [fn(t) for t in range(trials)]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(fn, range(trials)))


def _split_failures(outcomes, result: ExperimentResult, context: str) -> list:
    ok = []
    for t, outcome in enumerate(outcomes):
        if isinstance(outcome, TrialFailure):
            reason = f'{context}, trial {t}: {outcome.reason}'
            logger.warning(reason)
            result.failures += 1
            result.failure_reasons.append(reason)
        else:
            ok.append(outcome)
    if not ok:
        raise InvalidArgument(f'{context}: all {len(outcomes)} trials failed')
    return ok


# --------------------------------------------------------------------------------------
# Conditional expectations over one layer


def _draw_chunk_size(rows: int, cols: int) -> int:
    return max(1, min(DFLT_DRAW_CHUNK, DFLT_DRAW_ELEMENTS // (rows * cols)))


def _layer_draws(cfg: MlpConfig, k: int, draws: int, rng: Rng):
    """Yield batches of ``m^{q/2} A_k`` for fresh draws of ``A_k``"""
    rows, cols = cfg.widths[k], cfg.widths[k - 1]
    for lo, hi in chunk_indices(_draw_chunk_size(rows, cols), draws):
        c = hi - lo
        A = cfg.init_std * rng.normal(c * rows * cols).reshape(c, rows, cols)
        yield cfg.scale * A


def estimate_fwd_expectation(
    cfg: MlpConfig,
    theta: Parameter,
    t1: ForwardTrace,
    t2: ForwardTrace,
    k: int,
    draws: int = DFLT_INNER_DRAWS,
    rng: Union[int, Rng] = DFLT_SEED,
) -> Tuple[float, float]:
    """Monte Carlo mean and standard error of ``X_k`` over ``A_{k-1}``, the earlier
    layers fixed. Its exact value is ``tau_{k-1} tau'_{k-1} rho_map(rho_{k-1})``."""
    if not 2 <= k <= cfg.depth:
        raise InvalidArgument(f'need 2 <= k <= {cfg.depth}, got {k}')
    draws = ensure_count(draws, 'draws', minimum=2)
    rng = rng if isinstance(rng, Rng) else Rng(rng)
    v1, v2 = t1.x(k - 1), t2.x(k - 1)
    inv_width = 1 / cfg.widths[k - 1]
    stats = RunningStats()
    for V in _layer_draws(cfg, k - 1, draws, rng):
        y1 = phi(V @ v1, cfg.a, cfg.b)
        y2 = phi(V @ v2, cfg.a, cfg.b)
        stats.update(inv_width * np.einsum('cj,cj->c', y1, y2))
    return float(stats.mean), float(stats.standard_error)


def estimate_bwd_expectation(
    cfg: MlpConfig,
    theta: Parameter,
    t1: ForwardTrace,
    t2: ForwardTrace,
    k1s: Sequence[int],
    k2: int,
    draws: int = DFLT_INNER_DRAWS,
    rng: Union[int, Rng] = DFLT_SEED,
) -> Tuple[np.ndarray, np.ndarray]:
    """Monte Carlo means and standard errors of ``X'_{k1,k2}`` over ``A_{k2-1}``, for
    every ``k1`` of ``k1s`` from the same draws, the other layers fixed.

    Uses ``B_{k1,k2} = D_{x'_{k2}} m^{q/2} A_{k2-1} B_{k1,k2-1}``, where only ``x'_{k2}``
    and ``A_{k2-1}`` change with the draw.
    """
    if not 3 <= k2 <= cfg.depth:
        raise InvalidArgument(f'need 3 <= k2 <= {cfg.depth}, got {k2}')
    k1s = list(k1s)
    if not k1s or not all(2 <= k1 < k2 for k1 in k1s):
        raise InvalidArgument(f'need 2 <= k1 < k2 = {k2} for every k1, got {k1s}')
    draws = ensure_count(draws, 'draws', minimum=2)
    rng = rng if isinstance(rng, Rng) else Rng(rng)
    B1 = backprop_chain(cfg, theta, t1, k2 - 1)
    B2 = B1 if t2 is t1 else backprop_chain(cfg, theta, t2, k2 - 1)
    v1, v2 = t1.x(k2 - 1), t2.x(k2 - 1)
    inv_sqrt_width = cfg.widths[k2 - 1] ** -0.5
    stats = RunningStats(len(k1s))
    for V in _layer_draws(cfg, k2 - 1, draws, rng):
        d1 = inv_sqrt_width * phi_prime(V @ v1, cfg.a, cfg.b)
        d2 = inv_sqrt_width * phi_prime(V @ v2, cfg.a, cfg.b)
        samples = np.stack(
            [
                np.einsum(
                    'cj,cj,cjr,cjr->c', d1, d2, V @ B1[k1].values, V @ B2[k1].values
                )
                for k1 in k1s
            ],
            axis=1,
        )
        stats.update(samples)
    return stats.mean, stats.standard_error


def gia_bound(delta: float, rho: float, norm1: float, norm2: float) -> float:
    """Bound on the distance between ``E X'_{k1,k2}`` and ``rho_prime(rho) X'_{k1,k2-1}``,
    where ``rho`` is the cosine at layer ``k2 - 1`` and the norms are the operator norms
    of the two ``B_{k1,k2-1}``

    >>> round(gia_bound(1.0, 0.0, 1.0, 1.0) * np.pi, 12)
    8.0
    """
    if rho <= -1:
        return np.inf
    return delta * (8 / np.pi) * np.sqrt((1 - rho) / (1 + rho)) * norm1 * norm2


@dataclass(frozen=True)
class GiaCell:
    """One ``(k1, k2)`` comparison of one gia trial"""

    error: float
    se: float
    bound: float
    inconclusive: bool
    violation: bool

    @property
    def ratio(self) -> float:
        return self.error / self.bound if self.bound > 0 else float('nan')


# --------------------------------------------------------------------------------------
# Experiments


def _check_kind(spec: ExperimentSpec, kind: str):
    if spec.kind != kind:
        raise InvalidArgument(f'a {spec.kind!r} spec given to the {kind!r} experiment')


def _trial_pair(spec: ExperimentSpec, t: int) -> Tuple[int, int]:
    if len(spec.dataset) == 2:
        return 0, 1
    return trial_rng(spec.seed, t).child(PAIR_STREAM).index_pair(len(spec.dataset))


def _icd_trial(spec: ExperimentSpec, cfg: MlpConfig, cell: int, d: DualMaps, t: int):
    i, j = _trial_pair(spec, t)
    theta = trial_parameter(cfg, spec.seed, t, cell)
    x1, x2 = spec.dataset.points[i], spec.dataset.points[j]
    try:
        stats = pair_stats(forward(cfg, theta, x1), forward(cfg, theta, x2))
    except DegenerateInput as e:
        return TrialFailure(f'points {i}, {j}: {e}')
    rho1 = stats.rho(1)
    if abs(rho1) >= 1:
        return TrialFailure(f'points {i}, {j} are parallel')
    limit_z = (1 - rho_iterates(d, rho1, cfg.depth)) / 2
    errors = {}
    for k in range(2, cfg.depth + 1):
        if stats.z(k) == 0:
            return TrialFailure(f'points {i}, {j}: cosine 1 at layer {k}')
        if limit_z[k - 1] <= 0:
            return TrialFailure(f'points {i}, {j}: limiting cosine 1 at layer {k}')
        errors[k] = abs(stats.w(k) - limit_z[k - 1] ** -0.5)
    logger.debug(f'icd m={cfg.width} trial {t}: last layer error {errors[cfg.depth]}')
    return errors


def run_icd_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Error ``|w_k - omega_k|`` between the empirical inverse cosine distance of a pair
    of points at layer ``k`` and its infinite-width limit, for ``k = 2..l``.

    One output cell per width, ``icd_m<width>``, with one row per layer. Pairs are the
    two points of a two-point dataset, or a fresh random pair per trial otherwise.
    """
    _check_kind(spec, 'icd')
    if len(spec.dataset) < 2:
        raise InvalidArgument('the icd experiment needs at least two points')
    result = ExperimentResult('icd', 'mean')
    d = spec.dual_maps
    for cell, m in enumerate(spec.widths):
        cfg = spec.config(m)
        name = f'icd_m{m}'
        outcomes = _run_trials(
            lambda t: _icd_trial(spec, cfg, cell, d, t), spec.trials, spec.workers
        )
        ok = _split_failures(outcomes, result, name)
        rows = summarize({k: [e[k] for e in ok] for k in range(2, cfg.depth + 1)})
        result.cells[name] = rows
        logger.info(f'{name}: {len(ok)} trials, last layer mean error {rows[-1].mean}')
        _check_icd_growth(spec, name, rows, result)
    return result


def _check_icd_growth(spec, name, rows, result):
    if not isinstance(spec.pattern, str):
        return
    tail = [r for r in rows if r.key >= ICD_GROWTH_MIN_LAYER]
    if len(tail) < 2 or any(r.mean <= 0 for r in tail):
        return
    slope = loglog_slope([r.key for r in tail], [r.mean for r in tail])
    expected, tol = ICD_GROWTH_EXPONENTS[spec.pattern]
    result.findings[f'{name}_growth_exponent'] = slope
    result.checks[f'{name}_growth_exponent'] = abs(slope - expected) <= tol


def run_concentration_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Spectral norm of ``K(theta) - K_inf`` for every width of the sweep.

    One output cell, ``concentration``, with one row per width, reported by median.
    """
    _check_kind(spec, 'concentration')
    spec.dataset.validate_no_parallel()
    result = ExperimentResult('concentration', 'median')
    K_inf = limiting_ntk_matrix(
        spec.dual_maps, spec.dataset, spec.depth, spec.output_dim
    ).values
    cells = {}
    for cell, m in enumerate(spec.widths):
        cfg = spec.config(m)

        def trial(t):
            theta = trial_parameter(cfg, spec.seed, t, cell)
            K = ntk_matrix(cfg, theta, spec.dataset).values
            try:
                return spectral_norm(K - K_inf)
            except NumericFailure as e:
                raise NumericFailure(
                    f'concentration m={m}, trial {t}: {e}', e.last_iterate
                ) from e

        cells[m] = _run_trials(trial, spec.trials, spec.workers)
        logger.info(f'concentration m={m}: median error {np.median(cells[m])}')
    rows = summarize(cells)
    result.cells['concentration'] = rows
    medians = {r.key: r.median for r in rows}
    lo, hi = CONCENTRATION_LOG2_RATIO
    for m in spec.widths:
        if 4 * m in medians and medians[4 * m] > 0:
            log2_ratio = float(np.log2(medians[m] / medians[4 * m]))
            result.findings[f'log2_ratio_m{m}_m{4 * m}'] = log2_ratio
            result.checks[f'concentration_m{m}_m{4 * m}'] = lo <= log2_ratio <= hi
    return result


def _gia_trial(spec: ExperimentSpec, cfg: MlpConfig, cell: int, d: DualMaps, t: int):
    theta = trial_parameter(cfg, spec.seed, t, cell).head()
    x1, x2 = spec.dataset.points
    t1, t2 = forward(cfg, theta, x1), forward(cfg, theta, x2)
    try:
        stats = pair_stats(t1, t2)
    except DegenerateInput as e:
        return TrialFailure(str(e))
    inner = trial_rng(spec.seed, t).child(INNER_STREAM).child(cell)
    outcome = {}
    for k2 in range(3, cfg.depth + 1):
        k1s = list(range(2, k2))
        means, ses = estimate_bwd_expectation(
            cfg, theta, t1, t2, k1s, k2, spec.inner_draws, inner.child(k2)
        )
        rho = stats.rho(k2 - 1)
        B1 = backprop_chain(cfg, theta, t1, k2 - 1)
        B2 = backprop_chain(cfg, theta, t2, k2 - 1)
        for k1, mean, se in zip(k1s, means, ses):
            target = rho_prime(d, rho) * bwd_inner(B1[k1], B2[k1])
            bound = gia_bound(
                d.delta, rho, spectral_norm(B1[k1].values), spectral_norm(B2[k1].values)
            )
            error = abs(mean - target)
            if bound == 0:
                # no slack: the estimate must match the independent value up to noise
                inconclusive = False
            else:
                inconclusive = bool(se > bound)
            slack = bound + GIA_SE_MULTIPLIER * se
            violation = not inconclusive and bool(error > slack)
            outcome[k1, k2] = GiaCell(error, float(se), bound, inconclusive, violation)
    return outcome


def _gia_columns(ok: list, k1: int, k2s) -> Dict[str, List[float]]:
    def mean_ratio(k2):
        ratios = [o[k1, k2].ratio for o in ok if o[k1, k2].bound > 0]
        return float(np.mean(ratios)) if ratios else float('nan')

    return {
        'SE': [float(np.mean([o[k1, k2].se for o in ok])) for k2 in k2s],
        'Bound': [float(np.mean([o[k1, k2].bound for o in ok])) for k2 in k2s],
        'Ratio': [mean_ratio(k2) for k2 in k2s],
        'Inconclusive': [sum(o[k1, k2].inconclusive for o in ok) for k2 in k2s],
        'Violations': [sum(o[k1, k2].violation for o in ok) for k2 in k2s],
    }


def run_gia_experiment(spec: ExperimentSpec) -> ExperimentResult:
    """Distance between ``E X'_{k1,k2}`` over ``A_{k2-1}`` and ``rho_prime(rho_{k2-1})
    X'_{k1,k2-1}`` (its value if backward weights were independent of forward ones),
    against its bound, for all ``2 <= k1 < k2 <= l``.

    A cell whose inner standard error exceeds its bound is inconclusive. Otherwise it's
    a violation if the distance exceeds the bound by more than three standard errors.
    Where the bound is zero (always, for a linear activation) the distance itself must
    stay within three standard errors.
    Output cells ``gia_m<width>_k<k1>`` have one row per ``k2``, with extra columns for
    the mean inner standard error, the mean bound, the mean error to bound ratio and the
    inconclusive and violation counts over trials.
    """
    _check_kind(spec, 'gia')
    if len(spec.dataset) != 2:
        raise InvalidArgument(
            f'the gia experiment needs a two-point dataset, got {len(spec.dataset)} points'
        )
    result = ExperimentResult('gia', 'mean')
    d = spec.dual_maps
    violations = inconclusive = evaluated = 0
    max_ratio = 0.0
    for cell, m in enumerate(spec.widths):
        cfg = spec.config(m)
        outcomes = _run_trials(
            lambda t: _gia_trial(spec, cfg, cell, d, t), spec.trials, spec.workers
        )
        ok = _split_failures(outcomes, result, f'gia_m{m}')
        for k1 in range(2, cfg.depth):
            k2s = range(k1 + 1, cfg.depth + 1)
            name = f'gia_m{m}_k{k1}'
            result.cells[name] = summarize(
                {k2: [o[k1, k2].error for o in ok] for k2 in k2s}
            )
            result.columns[name] = _gia_columns(ok, k1, k2s)
        for o in ok:
            for c in o.values():
                evaluated += 1
                inconclusive += c.inconclusive
                violations += c.violation
                if c.bound > 0 and not c.inconclusive:
                    max_ratio = max(max_ratio, c.ratio)
        logger.info(f'gia m={m}: {violations} violations, {inconclusive} inconclusive')
    result.findings.update(
        violations=violations,
        violation_rate=violations / evaluated if evaluated else 0.0,
        inconclusive=inconclusive,
        max_error_to_bound=max_ratio,
    )
    result.checks['gia_no_violations'] = violations == 0
    if d.delta == 0:
        result.checks['gia_linear_within_3se'] = violations == 0
    return result


experiment_runners = {
    'icd': run_icd_experiment,
    'concentration': run_concentration_experiment,
    'gia': run_gia_experiment,
}


def run_experiment(spec: ExperimentSpec) -> ExperimentResult:
    return experiment_runners[spec.kind](spec)
