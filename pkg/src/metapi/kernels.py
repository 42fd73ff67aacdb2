"""Backend selection for the numeric hot loops.

The compiled extension is used when it imports; otherwise the pure-Python
versions in :mod:`metapi._pykernels` are used. Setting the environment
variable ``METAPI_PURE_PYTHON=1`` forces the fallback.
"""

import os

from metapi import _pykernels

BACKEND = "python"

if os.environ.get("METAPI_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from metapi import _ckernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels
else:
    _impl = _pykernels

ruben_series = _impl.ruben_series
reml_fixed_point = _impl.reml_fixed_point

__all__ = ["BACKEND", "ruben_series", "reml_fixed_point"]
