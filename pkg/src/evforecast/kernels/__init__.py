"""LSTM layer recurrence kernels.

The compiled extension is used when it was built; otherwise the numpy
implementation is loaded. Set ``EVFORECAST_KERNEL=python`` to force the
fallback.
"""
import os

from . import _lstm_py

BACKENDS = {"python": _lstm_py}

_FORCE_PYTHON = os.environ.get("EVFORECAST_KERNEL", "").lower() == "python"

if not _FORCE_PYTHON:
    # not even imported when forced off, e.g. on CPUs the build flags do not suit
    try:
        from . import _lstm_ext
    except ImportError:
        pass
    else:
        BACKENDS["cython"] = _lstm_ext

BACKEND = "cython" if "cython" in BACKENDS else "python"

_impl = BACKENDS[BACKEND]
layer_forward = _impl.layer_forward
layer_backward = _impl.layer_backward


def get_backend(name=None):
    """Return the kernel module for ``name`` (default: the active one)."""
    if name is None:
        return _impl
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"kernel backend {name!r} unavailable; have {sorted(BACKENDS)}") from None
