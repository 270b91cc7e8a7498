"""orlab: output-randomization defenses, the attacks they face, and a
reproducible desk-scale evaluation harness."""

from . import analysis, attacks, data, defense, harness, kernels, nn
from .accel import NUMBA_ENABLED

__version__ = "0.1.0"

__all__ = ["analysis", "attacks", "data", "defense", "harness", "kernels",
           "nn", "NUMBA_ENABLED", "__version__"]
