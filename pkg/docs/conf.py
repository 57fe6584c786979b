# -*- coding: utf-8 -*-
#
# Sphinx configuration for the lfrt documentation.

# -- Path setup --------------------------------------------------------------

import os
import sys
sys.path.insert(0, os.path.abspath('..'))

from lfrt._version import get_versions

# -- Project information -----------------------------------------------------

project = 'lfrt'
copyright = '2026, lfrt developers'
author = 'lfrt developers'

# The full version, including alpha/beta/rc tags
release = get_versions()['version']
# The short X.Y version
version = '.'.join(release.split('.')[:2])

# -- General configuration ---------------------------------------------------

# numpydoc-style docstrings are rendered by napoleon
extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.mathjax',
    'sphinx.ext.napoleon',
]
napoleon_google_docstring = False

source_suffix = '.rst'
master_doc = 'index'
language = None
exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']
pygments_style = 'sphinx'

# -- Options for HTML output -------------------------------------------------

html_theme = 'sphinx_rtd_theme'
htmlhelp_basename = 'lfrtdoc'

# -- Options for manual page output ------------------------------------------

man_pages = [
    (master_doc, 'lfrt', 'lfrt Documentation', [author], 1)
]
