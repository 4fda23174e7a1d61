"""Utils for ntkeoc"""
import io
import json
import os
import re
import struct
from functools import partial
from itertools import count, islice
from typing import Iterator, Tuple

import numpy as np
import pandas as pd
from dol import Files, Pipe, wrap_kvs

DFLT_SEED = 0
DFLT_TRIALS = 100
DFLT_WORKERS = 1
DFLT_QUAD_ORDER = 200
DFLT_POWER_TOL = 1e-9
DFLT_POWER_MAX_ITER = 10_000
DFLT_JACOBIAN_BUDGET = 10**8
DFLT_INNER_DRAWS = 10_000
DFLT_DRAW_CHUNK = 256
DFLT_DRAW_ELEMENTS = 2**22
DFLT_PARALLEL_TOL = 1e-9
DFLT_OUTPUT_DIM = 1
DFLT_INPUT_DIM = 2
DFLT_PATTERN = 'quadratic'
DFLT_DEPTH = 8
DFLT_WIDTH = 16
DFLT_N_POINTS = 4
DFLT_OUT_DIR = 'ntkeoc_out'
DFLT_FORMAT = 'csv'
DFLT_CSV_FLOAT_FORMAT = '%.17g'

IDX_UBYTE_3D_MAGIC = 0x00000803
# child of the run seed that synthetic datasets are drawn from, clear of trial indices
DATASET_STREAM = 2**32
_PANDAS_ERROR_LINE = re.compile(r'line (\d+)')


class NtkEocError(Exception):
    """Base of all errors raised by ntkeoc"""


class InvalidArgument(NtkEocError, ValueError):
    """A precondition of an operation does not hold"""


class NumericFailure(NtkEocError, ArithmeticError):
    """An iterative computation did not converge.

    :param last_iterate: the iterate the computation stopped at
    """

    def __init__(self, msg, last_iterate=None):
        super().__init__(msg)
        self.last_iterate = last_iterate


class DegenerateInput(NtkEocError, ValueError):
    """An activation has zero norm, so its cosines are undefined"""

    def __init__(self, msg, layer=None):
        super().__init__(msg)
        self.layer = layer


class DivergentMap(NtkEocError, ArithmeticError):
    """A map was evaluated where its value is infinite"""


class DatasetParseError(NtkEocError, ValueError):
    """A dataset file could not be turned into points"""

    def __init__(self, msg, record=None):
        super().__init__(msg)
        self.record = record


def ensure_count(x, name: str, minimum: int = 1) -> int:
    """Return ``x`` as an int, raising ``InvalidArgument`` if it's not an integer >= minimum

    >>> ensure_count(3, 'rows')
    3
    >>> ensure_count(0, 'rows')
    Traceback (most recent call last):
      ...
    ntkeoc.util.InvalidArgument: rows must be an integer >= 1, was 0
    """
    if isinstance(x, (bool, np.bool_)) or int(x) != x or x < minimum:
        raise InvalidArgument(f'{name} must be an integer >= {minimum}, was {x}')
    return int(x)


def chunk_indices(chk_size, end_idx, start_idx=0) -> Iterator[Tuple[int, int]]:
    """Yields lower and upper integer bounds of consecutive chunks covering
    ``[start_idx, end_idx)``. The last chunk is shorter if ``chk_size`` doesn't divide the range.

    >>> list(chunk_indices(5, 12))
    [(0, 5), (5, 10), (10, 12)]
    >>> list(chunk_indices(4, 8, start_idx=2))
    [(2, 6), (6, 8)]
    >>> list(chunk_indices(3, 0))
    []
    """
    chk_size = ensure_count(chk_size, 'chk_size')
    bounds = zip(count(start_idx, chk_size), count(start_idx + chk_size, chk_size))
    n_chunks = max(0, -(-(end_idx - start_idx) // chk_size))
    for bt, tt in islice(bounds, n_chunks):
        yield bt, min(tt, end_idx)


# --------------------------------------------------------------------------------------
# Reading points


def read_csv_points(src) -> np.ndarray:
    """Read one point per line, comma-separated decimals, into an ``(n, dim)`` float array.
    Blank lines are skipped, but still count in the line numbers errors report.

    :param src: a filepath or a file-like object

    >>> read_csv_points(io.StringIO('1,0\\n\\n0,1\\n'))
    array([[1., 0.],
           [0., 1.]])
    """
    try:
        df = pd.read_csv(src, header=None, dtype=str, skip_blank_lines=False)
    except pd.errors.EmptyDataError as e:
        raise DatasetParseError(f'no points found in {src}') from e
    except pd.errors.ParserError as e:
        match = _PANDAS_ERROR_LINE.search(str(e))
        line = int(match.group(1)) if match else None
        raise DatasetParseError(f"couldn't parse {src}: {e}", record=line) from e
    blank = df.isna().all(axis=1).to_numpy()
    points = df.apply(pd.to_numeric, errors='coerce').to_numpy(dtype=float)
    bad = np.flatnonzero(np.isnan(points).any(axis=1) & ~blank)
    if bad.size:
        line = int(bad[0]) + 1
        raise DatasetParseError(
            f'line {line} of {src} has missing or non-numeric fields', record=line
        )
    points = points[~blank]
    if len(points) == 0:
        raise DatasetParseError(f'no points found in {src}')
    return points


def read_idx_images(src) -> np.ndarray:
    """Read a 3-D unsigned-byte IDX file (the MNIST image format) into an
    ``(n, rows * cols)`` array of floats scaled to ``[0, 1]``.

    >>> header = struct.pack('>IIII', IDX_UBYTE_3D_MAGIC, 2, 2, 2)
    >>> read_idx_images(io.BytesIO(header + bytes([0, 255, 51, 0, 255, 255, 0, 0])))
    array([[0. , 1. , 0.2, 0. ],
           [1. , 1. , 0. , 0. ]])
    """
    if isinstance(src, (str, os.PathLike)):
        with open(src, 'rb') as f:
            b = f.read()
    else:
        b = src.read()
    if len(b) < 16:
        raise DatasetParseError(f'{src} is too short to hold an IDX header', record=0)
    magic, n, rows, cols = struct.unpack('>IIII', b[:16])
    if magic != IDX_UBYTE_3D_MAGIC:
        raise DatasetParseError(
            f'bad IDX magic {magic:#010x} in {src} (expected {IDX_UBYTE_3D_MAGIC:#010x})',
            record=0,
        )
    expected = n * rows * cols
    if len(b) - 16 < expected:
        complete = (len(b) - 16) // max(rows * cols, 1)
        raise DatasetParseError(
            f'{src} declares {n} records but record {complete} is truncated',
            record=complete,
        )
    data = np.frombuffer(b, dtype=np.uint8, count=expected, offset=16)
    return data.reshape(n, rows * cols).astype(np.float64) / 255.0


# --------------------------------------------------------------------------------------
# Writing outputs


class AtomicFiles(Files):
    """Files store whose writes go to a temporary file that is then renamed over the target"""

    def __init__(self, rootdir, *args, **kwargs):
        rootdir = os.fspath(rootdir)
        os.makedirs(rootdir, exist_ok=True)
        super().__init__(rootdir, *args, **kwargs)
        self._out_dir = rootdir

    def __setitem__(self, k, v):
        tmp_key = f'{k}.tmp'
        super().__setitem__(tmp_key, v)
        os.replace(os.path.join(self._out_dir, tmp_key), os.path.join(self._out_dir, k))


JsonFiles = wrap_kvs(
    AtomicFiles,
    data_of_obj=Pipe(lambda obj: json.dumps(obj, indent=2, sort_keys=True), str.encode),
    obj_of_data=json.loads,
)


def df_to_csv_bytes(df: pd.DataFrame, *, header=True) -> bytes:
    return df.to_csv(
        index=False, header=header, float_format=DFLT_CSV_FLOAT_FORMAT, lineterminator='\n'
    ).encode()


CsvFiles = wrap_kvs(
    AtomicFiles,
    data_of_obj=df_to_csv_bytes,
    obj_of_data=Pipe(io.BytesIO, pd.read_csv),
)

# matrices as header-less CSV, one row per line
MatrixFiles = wrap_kvs(
    AtomicFiles,
    data_of_obj=Pipe(pd.DataFrame, partial(df_to_csv_bytes, header=False)),
    obj_of_data=Pipe(
        io.BytesIO, partial(pd.read_csv, header=None), pd.DataFrame.to_numpy
    ),
)
