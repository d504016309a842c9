"""Backend selection for the hyperparameter kernels.

The compiled extension ``anomography._kernels`` is used when it was built;
otherwise, or when ``ANOMOGRAPHY_PURE_PYTHON=1`` is set, the numpy
implementation in :mod:`anomography._kernels_py` is used.  Both expose the same
three functions with the same semantics.
"""

import importlib
import os

from . import _kernels_py

__all__ = ["eps_argmax", "eps_objective", "eps_score", "IMPL", "get_backend", "compiled_available"]


def compiled_available():
    try:
        importlib.import_module("anomography._kernels")
    except ImportError:
        return False
    return True


def get_backend(name=None):
    """Return the kernel module ``"compiled"`` or ``"python"`` (default: auto)."""
    if name == "python":
        return _kernels_py
    if name == "compiled":
        return importlib.import_module("anomography._kernels")
    if name is not None:
        raise ValueError(f"unknown kernel backend {name!r}")
    if os.environ.get("ANOMOGRAPHY_PURE_PYTHON", "") not in ("", "0"):
        return _kernels_py
    try:
        return importlib.import_module("anomography._kernels")
    except ImportError:
        return _kernels_py


_impl = get_backend()
IMPL = _impl.IMPL
eps_argmax = _impl.eps_argmax
eps_objective = _impl.eps_objective
eps_score = _impl.eps_score
