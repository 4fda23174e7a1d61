# Sphinx configuration for the ntkeoc docs.
# Project metadata is read from setup.cfg so the version is kept in one place.

import os
import sys
from configparser import ConfigParser
from pathlib import Path

sys.path.insert(0, os.path.abspath('..'))

setup_cfg = ConfigParser()
setup_cfg.read(Path(__file__).resolve().parent.parent / 'setup.cfg')
metadata = setup_cfg['metadata']

project = metadata['name']
author = metadata.get('author', '')
copyright = metadata.get('copyright', author)
release = metadata.get('version', '')
version = '.'.join(release.split('.')[:2])

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.doctest',
    'sphinx.ext.mathjax',  # kernel formulas in docstrings
    'sphinx.ext.napoleon',
    'sphinx.ext.viewcode',
]

autodoc_member_order = 'bysource'
autodoc_default_options = {'members': True, 'undoc-members': False}
napoleon_numpy_docstring = True

# the doctests build arrays, so keep numpy in the namespace
doctest_global_setup = 'import numpy as np'

templates_path = ['_templates']
exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']

html_theme = 'alabaster'
html_static_path = ['_static']
html_title = f'{project} {release}'
