"""Kernel backend selection.

The compiled extension is preferred when it imported cleanly; otherwise the
numpy kernels are used. `STRUCTSA_BACKEND` (auto | compiled | python) forces
a choice, `set_backend`/`using` override it programmatically, and
`STRUCTSA_THREADS` caps the compiled kernels' parallelism (default 1).
Either backend produces identical results for a fixed input up to floating
point reassociation, and each one is bit-deterministic across runs and
thread counts.
"""

from __future__ import annotations

import os
from contextlib import contextmanager

from . import _kernels_np

try:
    from . import _kernels as _kernels_compiled
except ImportError:
    _kernels_compiled = None

ENV_BACKEND = "STRUCTSA_BACKEND"
ENV_THREADS = "STRUCTSA_THREADS"

_MODULES = {"python": _kernels_np}
if _kernels_compiled is not None:
    _MODULES["compiled"] = _kernels_compiled

_forced = None


def available():
    """Backend names usable in this process."""
    return tuple(sorted(_MODULES))


def name():
    """Name of the backend that `get()` would return."""
    if _forced is not None:
        return _forced
    requested = os.environ.get(ENV_BACKEND, "auto").strip().lower() or "auto"
    if requested == "auto":
        return "compiled" if "compiled" in _MODULES else "python"
    if requested not in _MODULES:
        raise ValueError(
            f"{ENV_BACKEND}={requested!r} is not available; choices: auto, " + ", ".join(available())
        )
    return requested


def get():
    """Active kernel module."""
    return _MODULES[name()]


def set_backend(backend_name):
    """Force a backend by name, or None to restore env/auto selection."""
    global _forced
    if backend_name is not None and backend_name not in _MODULES:
        raise ValueError(f"backend {backend_name!r} is not available; choices: " + ", ".join(available()))
    _forced = backend_name


@contextmanager
def using(backend_name):
    previous = _forced
    set_backend(backend_name)
    try:
        yield get()
    finally:
        set_backend(previous)


def thread_count():
    """Parallelism cap from STRUCTSA_THREADS (positive integer, default 1)."""
    raw = os.environ.get(ENV_THREADS, "1").strip() or "1"
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"{ENV_THREADS} must be a positive integer, got {raw!r}") from None
    if value < 1:
        raise ValueError(f"{ENV_THREADS} must be >= 1, got {value}")
    return value
