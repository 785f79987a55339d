"""Layer-wise MI and stability regularization for small transformers."""

from ._core import *  # noqa: F401,F403
from ._core import lab  # noqa: F401

__version__ = "0.1.0"
