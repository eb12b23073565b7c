"""Kernel backend selection.

The compiled extension ``dpmesh._ckernels`` is used when it imports; otherwise,
or when ``DPMESH_PURE_PYTHON`` is set to a non-empty value other than ``0``,
the numpy fallback in ``dpmesh._kernels_py`` is used. ``BACKEND`` names the
active choice.
"""

import os

from . import _kernels_py

_force_py = os.environ.get("DPMESH_PURE_PYTHON", "") not in ("", "0")

try:
    if _force_py:
        raise ImportError("pure-python backend requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"

cholesky_psd = _impl.cholesky_psd
max_sign_quadform = _impl.max_sign_quadform
pattern_abs_sums = _impl.pattern_abs_sums
toeplitz_gram = _impl.toeplitz_gram


def backends():
    """Mapping of every importable backend name to its module."""
    found = {"python": _kernels_py}
    try:
        from . import _ckernels

        found["cython"] = _ckernels
    except ImportError:
        pass
    return found
