"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
versions are used.  Set ``CAPPLAN_PURE_PYTHON=1`` to force the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("CAPPLAN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

viterbi_path = _impl.viterbi_path
count_marginals = _impl.count_marginals
count_transitions = _impl.count_transitions


def compiled_available() -> bool:
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return False
    return True
