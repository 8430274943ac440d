"""Selects the kernel implementation at import time.

The compiled ``_core`` extension is preferred. Set ``WIMA_PURE_PYTHON=1`` to
force the numpy fallback, or call :func:`use` at runtime.
"""

import os
from contextlib import contextmanager

from . import _fallback

try:
    from . import _core
except ImportError:  # extension not built
    _core = None

if _core is not None and os.environ.get("WIMA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    kernels = _core
else:
    kernels = _fallback

BACKEND = kernels.NAME


def available() -> dict:
    """Map backend name to kernel module for every backend that can be imported."""
    out = {"python": _fallback}
    if _core is not None:
        out["cython"] = _core
    return out


def set_backend(name: str) -> None:
    global kernels, BACKEND
    try:
        kernels = available()[name]
    except KeyError:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(available())}") from None
    BACKEND = name


@contextmanager
def use(name: str):
    previous = BACKEND
    set_backend(name)
    try:
        yield kernels
    finally:
        set_backend(previous)
