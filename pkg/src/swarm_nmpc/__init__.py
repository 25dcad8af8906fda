"""Decentralized robust NMPC for multi-agent navigation."""
import warnings

from numba.core.errors import NumbaExperimentalFeatureWarning

__version__ = "0.1.0"

# compiled kernels take the dynamics as first-class function arguments
warnings.filterwarnings("ignore", category=NumbaExperimentalFeatureWarning)
