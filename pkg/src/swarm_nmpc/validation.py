"""Input validation helpers shared by the public entry points."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

__all__ = ["check_vector", "check_square", "check_states", "check_input_sequence"]


def check_vector(v, dim: int, name: str = "vector") -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (dim,):
        raise ValueError(f"{name} must have shape ({dim},), got {v.shape}")
    if not np.isfinite(v).all():
        raise ValueError(f"{name} must be finite")
    return v


def check_square(M, name: str = "matrix") -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be square, got shape {M.shape}")
    if not np.isfinite(M).all():
        raise ValueError(f"{name} must be finite")
    return M


def check_states(X, n_agents: int, n: int) -> np.ndarray:
    """Validate a stack of joint states, one row per agent, as ``(n_agents, n)``."""
    X = check_array(X, dtype=float, ensure_2d=True)
    if X.shape != (n_agents, n):
        raise ValueError(f"expected states of shape ({n_agents}, {n}), got {X.shape}")
    return X


def check_input_sequence(U, n_seg: int, m: int) -> np.ndarray:
    U = np.asarray(U, dtype=float)
    if U.shape != (n_seg, m):
        raise ValueError(f"input sequence must have shape ({n_seg}, {m}), got {U.shape}")
    if not np.isfinite(U).all():
        raise ValueError("input sequence must be finite")
    return np.ascontiguousarray(U)
