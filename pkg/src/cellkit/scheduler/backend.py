"""Kernel backend selection: compiled extension when importable, else pure Python.

Set CELLKIT_PURE=1 to force the pure-Python kernel (used by the benchmark
and by backend-equality tests).
"""

from __future__ import annotations

import os

from . import _pykernel as pure_kernel

_compiled = None
if os.environ.get("CELLKIT_PURE") != "1":
    try:
        from . import _kernel as _compiled  # type: ignore[attr-defined]
    except ImportError:
        _compiled = None

compiled_kernel = _compiled


def active_kernel():
    return compiled_kernel if compiled_kernel is not None else pure_kernel


def backend_name() -> str:
    return active_kernel().BACKEND
