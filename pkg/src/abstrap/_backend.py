"""Kernel backend selection.

Hot loops (Markov-chain sampling, forward-backward, Viterbi) ship in two
flavours: a numba ``@njit`` kernel and a pure-numpy reference. The numba path
is used when numba imports cleanly, unless ``ABSTRAP_DISABLE_NUMBA`` is set to
a truthy value before the package is imported.
"""
import os

_FLAG = os.environ.get("ABSTRAP_DISABLE_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError("numba disabled by ABSTRAP_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]) and not kwargs:
            return args[0]

        def decorator(func):
            return func

        return decorator


BACKENDS = ("numba", "numpy") if HAVE_NUMBA else ("numpy",)
DEFAULT_BACKEND = BACKENDS[0]


def resolve(backend=None):
    """Return a valid backend name, defaulting to the environment selection."""
    if backend is None:
        return DEFAULT_BACKEND
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is unavailable")
    return backend
