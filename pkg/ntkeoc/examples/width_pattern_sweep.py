"""Sweep the inverse cosine distance experiment over width patterns, widths, depths
and activations, keeping one JSON summary per parameter combination.

Combinations already in the store are skipped, so an interrupted sweep can be run
again to complete it.

    python -m ntkeoc.examples.width_pattern_sweep params.json --store results/

where ``params.json`` is a list of parameter dicts, as made by ``params_product``.
"""

import itertools
import json
import logging
import os
import re
from dataclasses import asdict
from functools import partial
from pathlib import Path
from typing import MutableMapping, Optional, Sequence, Union

from lkj import get_watermarked_dir

from ntkeoc.experiments import ExperimentSpec, run_icd_experiment, synth_pair
from ntkeoc.util import DFLT_INPUT_DIM, DFLT_SEED, InvalidArgument, JsonFiles

logger = logging.getLogger(__name__)

PARAM_NAMES = ('pattern', 'm', 'l', 'a', 'b', 'trials')
DFLT_ANGLE = 1.5707963267948966  # pi / 2: the pair starts orthogonal

IntList = Sequence[int]
FloatList = Sequence[float]


KEY_TEMPLATE = 'icd_{pattern}_m{m}_l{l}_a{a}_b{b}_t{trials}'
KEY_PATTERN = re.compile(
    r'icd_(?P<pattern>[a-z]+)_m(?P<m>\d+)_l(?P<l>\d+)'
    r'_a(?P<a>[^_]+)_b(?P<b>[^_]+)_t(?P<trials>\d+)'
)
PARAM_TYPES = {'pattern': str, 'm': int, 'l': int, 'a': float, 'b': float, 'trials': int}


def params_to_key(params: dict, ext='.json') -> str:
    """Store key of one sweep combination. Widths, depth and trials are written as
    ints and ``a``, ``b`` as floats, so equal combinations get equal keys.

    >>> params_to_key(dict(pattern='linear', m=4, l=8, a=0, b=1, trials=50))
    'icd_linear_m4_l8_a0.0_b1.0_t50.json'
    >>> params = dict(pattern='constant', m=16, l=32, a=1, b=-0.5, trials=100)
    >>> params_to_key(params, ext='')
    'icd_constant_m16_l32_a1.0_b-0.5_t100'
    """
    typed = {name: PARAM_TYPES[name](params[name]) for name in PARAM_NAMES}
    return KEY_TEMPLATE.format(**typed) + ext


def key_to_params(key: str, ext='.json') -> dict:
    """Parameters of a store key, typed as ``run_sweep`` takes them. Inverse of
    ``params_to_key``

    >>> key_to_params('icd_linear_m4_l8_a0.0_b1.0_t50.json')
    {'pattern': 'linear', 'm': 4, 'l': 8, 'a': 0.0, 'b': 1.0, 'trials': 50}
    """
    if ext and key.endswith(ext):
        key = key[: -len(ext)]
    match = KEY_PATTERN.fullmatch(key)
    if match is None:
        raise InvalidArgument(f'not a sweep key: {key!r}')
    return {name: PARAM_TYPES[name](match[name]) for name in PARAM_NAMES}


def params_product(
    save_to_filepath: Optional[str] = None,
    *,
    pattern: Sequence[str] = ('constant', 'linear', 'quadratic'),
    m: IntList = (16,),
    l: IntList = (32,),
    a: FloatList = (0.0,),
    b: FloatList = (1.0,),
    trials: IntList = (100,),
):
    """List the parameter dicts of every combination of the given values

    >>> [p['pattern'] for p in params_product(pattern=('linear', 'quadratic'))]
    ['linear', 'quadratic']
    """
    params = [
        dict(zip(PARAM_NAMES, p))
        for p in itertools.product(pattern, m, l, a, b, trials)
    ]
    if save_to_filepath:
        Path(save_to_filepath).write_text(json.dumps(params, indent=2))
    return params


def run_sweep(
    pattern: str,
    m: int,
    l: int,
    a: float = 0.0,
    b: float = 1.0,
    trials: int = 100,
    *,
    seed: int = DFLT_SEED,
    angle: float = DFLT_ANGLE,
) -> dict:
    """Summary of the icd experiment for one combination: one row per layer"""
    spec = ExperimentSpec(
        kind='icd',
        depth=int(l),
        widths=(int(m),),
        dataset=synth_pair(angle, DFLT_INPUT_DIM),
        pattern=pattern,
        a=float(a),
        b=float(b),
        trials=int(trials),
        seed=seed,
    )
    result = run_icd_experiment(spec)
    (rows,) = result.cells.values()
    return {
        'rows': [asdict(r) for r in rows],
        'failures': result.failures,
        'findings': result.findings,
        'checks': result.checks,
    }


def dflt_store_dir() -> str:
    return get_watermarked_dir(
        'ntkeoc/width_pattern_sweeps', make_dir=partial(os.makedirs, exist_ok=True)
    )


def _get_params_list(params_list: Union[str, Sequence[dict]]) -> Sequence[dict]:
    if isinstance(params_list, str):
        params_list = json.loads(Path(params_list).read_text())
    return params_list


def _get_store(store: Union[str, MutableMapping, None]) -> MutableMapping:
    if store is None:
        store = dflt_store_dir()
    if isinstance(store, str):
        store = JsonFiles(store)
    return store


def run_sweeps(
    params_list: Union[str, Sequence[dict]],
    store: Union[str, MutableMapping, None] = None,
    *,
    seed: int = DFLT_SEED,
    print_progress: bool = True,
    overwrite: bool = False,
):
    """Run ``run_sweep`` on every parameter dict not already in ``store``"""
    params_list = list(_get_params_list(params_list))
    store = _get_store(store)
    n = len(params_list)
    for i, params in enumerate(params_list, 1):
        key = params_to_key(params)
        if key in store and not overwrite:
            logger.debug(f'{key} is already stored')
            continue
        print_progress and print(f'{i}/{n}: {key}')
        store[key] = run_sweep(**params, seed=seed)
    return store


if __name__ == '__main__':
    import argh

    argh.dispatch_command(run_sweeps)
