"""Backend selection for the adapter hot kernels.

``NANOVOICE_KERNELS`` picks the backend at import: ``auto`` (default: compiled
if the extension imports, else numpy), ``compiled`` (fail if unavailable) or
``python``.  :func:`use` switches at runtime, mainly for tests and benchmarks.
"""

import os

from . import _kernels_py

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = {"python": _kernels_py}
if _ckernels is not None:
    BACKENDS["compiled"] = _ckernels


def _select(name):
    if name == "auto":
        return BACKENDS.get("compiled", _kernels_py)
    if name not in BACKENDS:
        raise ImportError(f"kernel backend {name!r} is not available (have: {sorted(BACKENDS)})")
    return BACKENDS[name]


backend = _select(os.environ.get("NANOVOICE_KERNELS", "auto"))


def use(name):
    """Switch the active backend; returns the previous backend name."""
    global backend
    previous = backend.NAME
    backend = _select(name)
    return previous


def compiled_available():
    return _ckernels is not None
