"""Kernel backend selection.

The hot numeric kernels (softmax, layer norm, relation-aware attention
contractions) exist twice: a numba @njit version and a pure-numpy version.
``CONVSQL_BACKEND=numpy`` forces the numpy path; ``numba`` (or unset, when
numba imports cleanly) uses the jitted path.
"""

import os

NUMPY = "numpy"
NUMBA = "numba"


def _numba_available() -> bool:
    try:
        import numba  # noqa: F401
    except Exception:
        return False
    return True


def _detect() -> str:
    choice = os.environ.get("CONVSQL_BACKEND", "").strip().lower()
    if choice == NUMPY:
        return NUMPY
    if choice == NUMBA:
        if not _numba_available():
            raise RuntimeError("CONVSQL_BACKEND=numba but numba is not importable")
        return NUMBA
    if choice == "":
        return NUMBA if _numba_available() else NUMPY
    raise RuntimeError(f"unknown CONVSQL_BACKEND value: {choice!r} (expected 'numba' or 'numpy')")


ACTIVE = _detect()
