"""Simulation and analysis of quasiparticle trapping in Andreev bound states."""
from ._backend import BACKENDS, DEFAULT_BACKEND, HAVE_NUMBA

__version__ = "0.1.0"
__all__ = ["BACKENDS", "DEFAULT_BACKEND", "HAVE_NUMBA", "__version__"]
