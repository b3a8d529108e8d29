"""Kernel backend selection.

The compiled extension is used when importable; ``TOLGP_BACKEND=python``
forces the numpy fallback and ``TOLGP_BACKEND=cython`` makes a missing
extension an import error.
"""
from __future__ import annotations

import contextlib
import os

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_choice = os.environ.get("TOLGP_BACKEND", "auto").lower()
if _choice not in ("auto", "cython", "python"):
    raise ImportError(f"TOLGP_BACKEND must be auto, cython or python, got {_choice!r}")
if _choice == "cython" and _ckernels is None:
    raise ImportError("TOLGP_BACKEND=cython but tolgp._ckernels is not built")

kernels = _pykernels if (_choice == "python" or _ckernels is None) else _ckernels
name = "python" if kernels is _pykernels else "cython"


def available() -> list[str]:
    return ["python"] + (["cython"] if _ckernels is not None else [])


def use(backend: str):
    """Switch the active backend globally."""
    global kernels, name
    if backend == "auto":
        backend = "cython" if _ckernels is not None else "python"
    if backend == "cython":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not available")
        kernels, name = _ckernels, "cython"
    elif backend == "python":
        kernels, name = _pykernels, "python"
    else:
        raise ValueError(f"unknown backend {backend!r}")


@contextlib.contextmanager
def using(backend: str):
    previous = name
    use(backend)
    try:
        yield
    finally:
        use(previous)
