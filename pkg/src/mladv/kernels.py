"""Kernel backend selection.

The compiled extension is used when it imports; otherwise, or when the
environment variable ``MLADV_PURE_PYTHON`` is set to a non-empty value, the
numpy implementation is used. Both expose identical functions.
"""

import contextlib
import importlib
import os

from . import _kernels_py as _py
from ._kernels_py import (  # noqa: F401  (constants shared by both backends)
    ACT_IDENTITY,
    ACT_RELU,
    ACT_SIGMOID,
    ACT_TANH,
    DIST_L2,
    DIST_SQUARED,
    OPT_ADAM,
    OPT_GD,
    OPT_NORMALIZED,
    SELECT_COUNT,
    SELECT_TAU,
    TAU_UNDEFINED,
)

_EXPORTS = ("forward", "input_vjp", "objective", "tau_b", "descend")


def load_backend(name):
    """Return the kernel module for ``"cython"`` or ``"python"``."""
    if name == "python":
        return _py
    if name == "cython":
        return importlib.import_module("mladv._kernels")
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends():
    names = ["python"]
    try:
        load_backend("cython")
    except ImportError:
        pass
    else:
        names.insert(0, "cython")
    return names


if os.environ.get("MLADV_PURE_PYTHON"):
    BACKEND = "python"
else:
    BACKEND = available_backends()[0]


def _bind(name):
    global BACKEND
    impl = load_backend(name)
    g = globals()
    for fn in _EXPORTS:
        g[fn] = getattr(impl, fn)
    BACKEND = name


@contextlib.contextmanager
def use_backend(name):
    """Temporarily route every kernel call through ``name``."""
    previous = BACKEND
    _bind(name)
    try:
        yield load_backend(name)
    finally:
        _bind(previous)


_bind(BACKEND)
