"""
lfrt
Low-light light-field restoration: a transformer restoration network on a numpy autodiff engine, with noise calibration and synthesis.
"""

from . import errors
from . import automation
from . import config
from . import lightfield
from . import tensor
from . import gradcheck
from . import layers
from . import network
from . import complexity
from . import noise
from . import losses
from . import training

from ._version import get_versions
__version__ = get_versions()['version']
del get_versions
