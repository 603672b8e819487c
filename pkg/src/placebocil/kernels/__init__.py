"""Selection kernels with a compiled fast path.

The Cython module is used when it was built and ``PLACEBOCIL_PURE_PYTHON``
is unset; otherwise the NumPy versions are used. ``BACKEND`` names the
active one.
"""

from __future__ import annotations

import os

from . import _pykernels

_want_pure = os.environ.get("PLACEBOCIL_PURE_PYTHON", "").strip() not in ("", "0")

try:
    if _want_pure:
        raise ImportError("pure python requested")
    from . import _ckernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _pykernels
    BACKEND = "python"

cosine_matrix = _impl.cosine_matrix
score_matrix = _impl.score_matrix
greedy_select = _impl.greedy_select
herding_order = _impl.herding_order


def compiled_available() -> bool:
    try:
        from . import _ckernels  # noqa: F401
    except ImportError:
        return False
    return True


def get_backend(name: str):
    """Return the kernel module for ``"python"`` or ``"cython"``."""
    if name == "python":
        return _pykernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


__all__ = [
    "BACKEND",
    "compiled_available",
    "cosine_matrix",
    "get_backend",
    "greedy_select",
    "herding_order",
    "score_matrix",
]
