"""Privacy accounting and correlated-noise design for decentralized SGD."""

__version__ = "0.1.0"

from .errors import DpmeshError, InputError, NumericError, OutOfMemory  # noqa: F401
from .kernels import BACKEND  # noqa: F401
