"""Command line tools: describe a configuration, run the experiments, dump kernels.

Every command takes the same configuration keys, read from a JSON document
(``--config``) and overridden by flags. Run

    ntkeoc icd --config sweep.json --trials 400 --out results/

to write one ``<cell>.csv`` file (columns ``Step,Value,Std``) per sweep cell, and a
``manifest.json`` holding the resolved configuration, next to them. ``gia`` cells
carry more columns after those: ``SE,Bound,Ratio,Inconclusive,Violations``.
"""
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from functools import partial
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import List, Optional, Tuple, Union

import argh
import numpy as np
import pandas as pd
from i2 import Sig
from lined import Pipeline

from ntkeoc.experiments import (
    EXPERIMENT_KINDS,
    WIDTH_PATTERNS,
    Dataset,
    ExperimentResult,
    ExperimentSpec,
    lift_dataset,
    mk_config,
    run_experiment,
    synth_pair,
    synth_sphere,
    trial_parameter,
)
from ntkeoc.kernel import ntk_matrix
from ntkeoc.limit import DualMaps, limiting_ntk_matrix
from ntkeoc.numerics import Rng, spectral_norm
from ntkeoc.util import (
    DATASET_STREAM,
    DFLT_DEPTH,
    DFLT_FORMAT,
    DFLT_INNER_DRAWS,
    DFLT_INPUT_DIM,
    DFLT_N_POINTS,
    DFLT_OUT_DIR,
    DFLT_OUTPUT_DIM,
    DFLT_PATTERN,
    DFLT_SEED,
    DFLT_TRIALS,
    DFLT_WIDTH,
    DFLT_WORKERS,
    CsvFiles,
    DatasetParseError,
    InvalidArgument,
    JsonFiles,
    MatrixFiles,
    NtkEocError,
    ensure_count,
    read_csv_points,
    read_idx_images,
)

logger = logging.getLogger(__name__)

DATASET_FORMATS = ('csv', 'idx')
COMMAND_KINDS = EXPERIMENT_KINDS + ('kernel',)
MANIFEST_KEY = 'manifest.json'


class ChecksFailed(NtkEocError):
    """A run completed but some of its acceptance checks failed"""


def _version() -> str:
    try:
        return version('ntkeoc')
    except PackageNotFoundError:
        return 'unknown'


# --------------------------------------------------------------------------------------
# Datasets


def _reader(fmt: str):
    if fmt == 'csv':
        return read_csv_points
    elif fmt == 'idx':
        return read_idx_images
    raise InvalidArgument(
        f'unknown dataset format {fmt!r}, expected one of {DATASET_FORMATS}'
    )


def _first(points: np.ndarray, n: int) -> np.ndarray:
    return points[:n]


def _normalize(points: np.ndarray, fmt: str) -> np.ndarray:
    norms = np.linalg.norm(points, axis=1)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        i = int(zero[0])
        record, where = (i + 1, f'line {i + 1}') if fmt == 'csv' else (i, f'record {i}')
        raise DatasetParseError(
            f"{where} is the zero vector, which can't be normalized", record
        )
    return points / norms[:, None]


def load_dataset(
    path,
    format: str = DFLT_FORMAT,
    *,
    normalize: bool = False,
    lift_beta: Optional[float] = None,
    limit_n: Optional[int] = None,
) -> Dataset:
    """Read points from a CSV file (one point per line) or an IDX image file, then
    keep the first ``limit_n``, scale them to unit norm and lift them, as asked.

    >>> import io
    >>> load_dataset(io.StringIO('3,4\\n0,2\\n'), normalize=True, lift_beta=1.0).points
    array([[0.6, 0.8, 1. ],
           [0. , 1. , 1. ]])
    """
    steps = [_reader(format)]
    if limit_n is not None:
        steps.append(partial(_first, n=ensure_count(limit_n, 'limit_n')))
    if normalize:
        steps.append(partial(_normalize, fmt=format))
    steps.append(Dataset)
    if lift_beta is not None:
        steps.append(partial(lift_dataset, beta=lift_beta))
    return Pipeline(*steps)(path)


# --------------------------------------------------------------------------------------
# Configuration


def _widths(m) -> Tuple[int, ...]:
    if isinstance(m, str):
        m = [s for s in m.split(',') if s.strip()]
    elif np.isscalar(m):
        m = [m]
    try:
        return tuple(ensure_count(int(x), 'm') for x in m)
    except (TypeError, ValueError) as e:
        if isinstance(e, InvalidArgument):
            raise
        raise InvalidArgument(f'm must be a width or a list of widths, was {m!r}') from e


@dataclass
class RunConfig:
    """Everything a run needs, as JSON-compatible keys.

    ``m`` may be a single base width or a list of them (one sweep cell each);
    ``gammas`` (explicit width factors) takes precedence over ``pattern``. Without a
    ``dataset`` file, ``icd`` and ``gia`` use two unit vectors at ``angle`` and the other
    commands use ``n_points`` random unit vectors, all of dimension ``m0``.

    >>> cfg = RunConfig(kind='icd', m='8,32', l=4)
    >>> cfg.m
    (8, 32)
    >>> RunConfig.from_sources(None, mu=2)
    Traceback (most recent call last):
      ...
    ntkeoc.util.InvalidArgument: unknown configuration keys: ['mu']
    """

    kind: Optional[str] = None
    l: int = DFLT_DEPTH
    m: Union[int, Tuple[int, ...]] = DFLT_WIDTH
    m0: Optional[int] = None
    ml: int = DFLT_OUTPUT_DIM
    q: float = 0.0
    a: float = 1.0
    b: float = 1.0
    pattern: str = DFLT_PATTERN
    gammas: Optional[List[int]] = None
    trials: int = DFLT_TRIALS
    seed: int = DFLT_SEED
    dataset: Optional[str] = None
    format: str = DFLT_FORMAT
    normalize: bool = False
    lift: Optional[float] = None
    limit_n: Optional[int] = None
    angle: float = np.pi / 2
    n_points: int = DFLT_N_POINTS
    workers: int = DFLT_WORKERS
    inner_draws: int = DFLT_INNER_DRAWS
    out: str = DFLT_OUT_DIR
    check: bool = False
    _dataset: Optional[Dataset] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        for key, allowed in [
            ('kind', COMMAND_KINDS + (None,)),
            ('format', DATASET_FORMATS),
            ('pattern', WIDTH_PATTERNS),
        ]:
            value = getattr(self, key)
            if value not in allowed:
                raise InvalidArgument(
                    f'unknown {key} {value!r}, expected one of {allowed}'
                )
        self.m = _widths(self.m)
        if self.gammas is not None:
            self.gammas = [int(g) for g in self.gammas]
        ensure_count(self.trials, 'trials')
        ensure_count(self.workers, 'workers')
        ensure_count(self.n_points, 'n_points')
        ensure_count(self.inner_draws, 'inner_draws', minimum=2)
        if self.seed < 0:
            raise InvalidArgument(f'seed must be nonnegative, was {self.seed}')
        for m in self.m:
            self.mlp_config(m, self.m0 or DFLT_INPUT_DIM)

    @classmethod
    def from_sources(cls, config=None, **overrides) -> 'RunConfig':
        """Keys of the JSON file ``config``, updated with the non-None ``overrides``"""
        known = set(Sig(cls).names)
        data = {}
        if config is not None:
            try:
                data = json.loads(Path(config).read_text())
            except json.JSONDecodeError as e:
                raise InvalidArgument(f'{config} is not valid JSON: {e}') from e
            if not isinstance(data, dict):
                raise InvalidArgument(f'{config} must hold a JSON object')
        data.update({k: v for k, v in overrides.items() if v is not None})
        unknown = sorted(set(data) - known)
        if unknown:
            raise InvalidArgument(f'unknown configuration keys: {unknown}')
        return cls(**data)

    @property
    def width_pattern(self):
        return self.gammas if self.gammas is not None else self.pattern

    def mlp_config(self, m: int, input_dim: int):
        return mk_config(
            self.l,
            m,
            self.width_pattern,
            input_dim=input_dim,
            output_dim=self.ml,
            q=self.q,
            a=self.a,
            b=self.b,
        )

    def load_dataset(self) -> Dataset:
        if self._dataset is None:
            self._dataset = self._mk_dataset()
        return self._dataset

    def _mk_dataset(self) -> Dataset:
        if self.dataset is not None:
            ds = load_dataset(
                self.dataset,
                self.format,
                normalize=self.normalize,
                lift_beta=self.lift,
                limit_n=self.limit_n,
            )
            if self.m0 is not None and ds.dim != self.m0:
                raise InvalidArgument(
                    f'{self.dataset} has points of dimension {ds.dim}, but m0 = {self.m0}'
                )
            return ds
        dim = self.m0 or DFLT_INPUT_DIM
        if self.m0 is not None and self.lift is not None:
            dim -= 1
        if self.kind in ('icd', 'gia'):
            ds = synth_pair(self.angle, dim)
        else:
            ds = synth_sphere(Rng(self.seed).child(DATASET_STREAM), self.n_points, dim)
        if self.lift is not None:
            ds = lift_dataset(ds, self.lift)
        return ds

    def experiment_spec(self) -> ExperimentSpec:
        return ExperimentSpec(
            kind=self.kind,
            depth=self.l,
            widths=self.m,
            dataset=self.load_dataset(),
            pattern=self.width_pattern,
            q=self.q,
            a=self.a,
            b=self.b,
            output_dim=self.ml,
            trials=self.trials,
            seed=self.seed,
            workers=self.workers,
            inner_draws=self.inner_draws,
        )

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if not k.startswith('_')}
        d['m'] = list(self.m)
        return d


# --------------------------------------------------------------------------------------
# Outputs


def result_frame(rows, value_stat: str, columns=None) -> pd.DataFrame:
    """``Step,Value,Std`` per row, followed by any extra ``columns`` of the cell"""
    df = pd.DataFrame(
        {
            'Step': [r.key for r in rows],
            'Value': [getattr(r, value_stat) for r in rows],
            'Std': [r.std for r in rows],
        }
    )
    for name, values in (columns or {}).items():
        df[name] = values
    return df


def manifest(cfg: RunConfig, **extra) -> dict:
    return {'config': cfg.to_dict(), 'seed': cfg.seed, 'version': _version(), **extra}


def write_result(result: ExperimentResult, cfg: RunConfig) -> List[str]:
    """Write a CSV file per cell and the run manifest into ``cfg.out``"""
    csv_store, json_store = CsvFiles(cfg.out), JsonFiles(cfg.out)
    written = []
    for name, rows in result.cells.items():
        key = f'{name}.csv'
        csv_store[key] = result_frame(
            rows, result.value_stat, result.columns.get(name)
        )
        written.append(key)
    json_store[MANIFEST_KEY] = manifest(
        cfg,
        kind=result.kind,
        failures=result.failures,
        failure_reasons=result.failure_reasons,
        checks={k: bool(v) for k, v in result.checks.items()},
        findings={k: float(v) for k, v in result.findings.items()},
    )
    written.append(MANIFEST_KEY)
    return written


def _report(result: ExperimentResult, cfg: RunConfig, written: List[str]) -> str:
    lines = [f'wrote {Path(cfg.out) / key}' for key in written]
    if result.failures:
        lines.append(f'{result.failures} failed trials (reasons in {MANIFEST_KEY})')
    lines += [f'{k}: {v:.6g}' for k, v in result.findings.items()]
    lines += [f'check {k}: {"ok" if v else "FAILED"}' for k, v in result.checks.items()]
    return '\n'.join(lines)


# --------------------------------------------------------------------------------------
# Commands

_OPTIONS = {
    'config': (('--config',), dict(type=str, help='JSON file of configuration keys')),
    'm': (('-m', '--m'), dict(type=str, help='base width, or comma-separated widths')),
    'l': (('-l', '--l'), dict(type=int, help='depth')),
    'a': (('-a', '--a'), dict(type=float, help='coefficient of s in the activation')),
    'b': (('-b', '--b'), dict(type=float, help='coefficient of |s| in the activation')),
    'q': (('-q', '--q'), dict(type=float, help='scaling exponent')),
    'm0': (('--m0',), dict(type=int, help='input dimension')),
    'ml': (('--ml',), dict(type=int, help='output dimension')),
    'pattern': (('--pattern',), dict(type=str, choices=WIDTH_PATTERNS)),
    'seed': (('--seed',), dict(type=int)),
    'trials': (('--trials',), dict(type=int)),
    'out': (('--out',), dict(type=str, help='output directory')),
    'dataset': (('--dataset',), dict(type=str, help='dataset file')),
    'format': (('--format',), dict(type=str, choices=DATASET_FORMATS)),
    'lift': (('--lift',), dict(type=float, help='append this coordinate to every point')),
    'limit_n': (('--limit-n',), dict(type=int, help='use only the first points')),
    'angle': (('--angle',), dict(type=float, help='angle of the synthetic pair')),
    'n_points': (('--n-points',), dict(type=int, help='size of the synthetic dataset')),
    'workers': (('--workers',), dict(type=int, help='threads running trials')),
    'inner_draws': (('--inner-draws',), dict(type=int)),
}
_MLP_OPTIONS = ('config', 'm', 'l', 'a', 'b', 'q', 'm0', 'ml', 'pattern')
_DATA_OPTIONS = ('seed', 'out', 'dataset', 'format', 'lift', 'limit_n', 'angle', 'n_points')
_RUN_OPTIONS = _MLP_OPTIONS + _DATA_OPTIONS + ('trials', 'workers', 'inner_draws')


def _declare(names):
    def decorator(func):
        for name in reversed(names):
            flags, kwargs = _OPTIONS[name]
            func = argh.arg(*flags, **kwargs)(func)
        return func

    return decorator


def configure_logging(verbose: bool = False):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.WARNING,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
    )


def _flags(**kwargs) -> dict:
    """Command line values that override configuration keys: the ones given"""
    return {k: v for k, v in kwargs.items() if v is not None and v is not False}


@_declare(_MLP_OPTIONS)
def describe(
    *,
    config=None,
    m=None,
    l=None,
    a=None,
    b=None,
    q=None,
    m0=None,
    ml=None,
    pattern=None,
    verbose=False,
):
    """Print the widths, the activation constants and the parameter count"""
    configure_logging(verbose)
    cfg = RunConfig.from_sources(
        config, **_flags(m=m, l=l, a=a, b=b, q=q, m0=m0, ml=ml, pattern=pattern)
    )
    lines = []
    for width in cfg.m:
        info = cfg.mlp_config(width, cfg.m0 or DFLT_INPUT_DIM).describe()
        lines += [
            f'm = {width}',
            f'  widths: {",".join(map(str, info["widths"]))}',
            f'  sigma: {info["sigma"]:.12g}',
            f'  delta: {info["delta"]:.12g}',
            f'  kappa: {info["kappa"]:.12g}',
            f'  parameters: {info["n_params"]}',
        ]
    return '\n'.join(lines)


def _run(kind: str, options: dict) -> str:
    configure_logging(options.pop('verbose', False))
    options.pop('kind', None)
    config = options.pop('config', None)
    cfg = RunConfig.from_sources(config, **_flags(**options), kind=kind)
    result = run_experiment(cfg.experiment_spec())
    written = write_result(result, cfg)
    report = _report(result, cfg, written)
    if cfg.check and not result.passed:
        raise ChecksFailed(report)
    return report


def _mk_experiment_command(kind: str, doc: str):
    @_declare(_RUN_OPTIONS)
    def command(
        *,
        config=None,
        m=None,
        l=None,
        a=None,
        b=None,
        q=None,
        m0=None,
        ml=None,
        pattern=None,
        seed=None,
        out=None,
        dataset=None,
        format=None,
        lift=None,
        limit_n=None,
        angle=None,
        n_points=None,
        trials=None,
        workers=None,
        inner_draws=None,
        normalize=False,
        check=False,
        verbose=False,
    ):
        return _run(kind, dict(locals()))

    command.__name__ = command.__qualname__ = kind
    command.__doc__ = doc
    return command


icd = _mk_experiment_command(
    'icd', 'Inverse cosine distance error per layer against its infinite-width limit'
)
concentration = _mk_experiment_command(
    'concentration', 'Spectral distance between the kernel matrix and its limit, per width'
)
gia = _mk_experiment_command(
    'gia', 'Gradient independence error of backprop inner products against its bound'
)


@_declare(_MLP_OPTIONS + _DATA_OPTIONS)
def kernel(
    *,
    config=None,
    m=None,
    l=None,
    a=None,
    b=None,
    q=None,
    m0=None,
    ml=None,
    pattern=None,
    seed=None,
    out=None,
    dataset=None,
    format=None,
    lift=None,
    limit_n=None,
    angle=None,
    n_points=None,
    normalize=False,
    verbose=False,
):
    """Write the kernel matrix of a dataset at initialization, and its limit, as CSV"""
    options = dict(locals())
    configure_logging(options.pop('verbose'))
    cfg = RunConfig.from_sources(options.pop('config'), **_flags(**options), kind='kernel')
    ds = cfg.load_dataset()
    store = MatrixFiles(cfg.out)
    json_store = JsonFiles(cfg.out)
    K_inf = limiting_ntk_matrix(DualMaps(cfg.a, cfg.b), ds, cfg.l, cfg.ml).values
    store['limit_kernel.csv'] = K_inf
    lines, distances = ['wrote ' + str(Path(cfg.out) / 'limit_kernel.csv')], {}
    for cell, width in enumerate(cfg.m):
        mlp = cfg.mlp_config(width, ds.dim)
        K = ntk_matrix(mlp, trial_parameter(mlp, cfg.seed, 0, cell), ds).values
        key = f'kernel_m{width}.csv'
        store[key] = K
        distances[key] = spectral_norm(K - K_inf)
        lines += [f'wrote {Path(cfg.out) / key}', f'  ||K - K_inf|| = {distances[key]:.6g}']
    json_store[MANIFEST_KEY] = manifest(cfg, kind='kernel', distances=distances)
    return '\n'.join(lines)


commands = [describe, icd, concentration, gia, kernel]


def main(argv=None):
    parser = argh.ArghParser(prog='ntkeoc', description=__doc__.splitlines()[0])
    parser.add_commands(commands)
    try:
        parser.dispatch(argv=argv, output_file=sys.stdout)
    except ChecksFailed as e:
        print(e)
        print('ntkeoc: some checks failed', file=sys.stderr)
        sys.exit(1)
    except (NtkEocError, OSError) as e:
        print(f'ntkeoc: {e}', file=sys.stderr)
        sys.exit(2)


if __name__ == '__main__':
    main()
