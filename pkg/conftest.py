import pathlib

import pytest


def pytest_ignore_collect(collection_path):
    root_dir = pathlib.Path(__file__).parent.resolve()
    doc_dirs = [root_dir / name for name in ('docsrc', 'docs')]
    if any(d == collection_path or d in collection_path.parents for d in doc_dirs):
        return True


def pytest_addoption(parser):
    parser.addoption(
        '--run-slow',
        action='store_true',
        default=False,
        help='also run the full-scale experiment checks (tens of minutes)',
    )


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: full-scale experiment checks')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--run-slow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --run-slow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _numpy_legacy_scalar_repr(request):
    # Doctests show numpy scalars as plain numbers (numpy < 2 repr);
    # numpy >= 2 prints them as np.float64(...). Only affects doctest items.
    if not isinstance(request.node, pytest.DoctestItem):
        yield
        return
    import numpy as np

    saved = np.get_printoptions()
    np.set_printoptions(legacy='1.25')
    try:
        yield
    finally:
        np.set_printoptions(**saved)
