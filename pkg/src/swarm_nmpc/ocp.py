"""Cost functions, terminal ingredients and closed-form admissibility checks."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.stats import qmc

from .dynamics import ErrorDynamics, rk4_step
from .validation import check_square, check_vector

__all__ = [
    "FhocpConfig",
    "CostConstants",
    "DisturbanceBoundReport",
    "TerminalRegionReport",
    "running_cost",
    "terminal_cost",
    "cost_constants",
    "xi_constant",
    "disturbance_bound_rhs",
    "check_disturbance_bound",
    "terminal_controller",
    "project_input",
    "verify_terminal_region",
    "linearize",
    "design_terminal_ingredients",
    "ultimate_bounds",
]


def _check_symmetric(M, name, strict):
    if not np.allclose(M, M.T, rtol=0, atol=1e-12 * max(1.0, np.abs(M).max())):
        raise ValueError(f"{name} must be symmetric")
    lam = np.linalg.eigvalsh(M).min()
    if strict and not lam > 0:
        raise ValueError(f"{name} must be positive definite (min eigenvalue {lam:.3g})")
    if not strict and lam < -1e-12:
        raise ValueError(f"{name} must be positive semi-definite (min eigenvalue {lam:.3g})")


@dataclass(frozen=True)
class FhocpConfig:
    """Weights, horizon and terminal ingredients of one agent's FHOCP.

    The horizon is split into ``T_p / h`` input segments; each segment is
    integrated with ``n_sub`` RK4 steps.
    """

    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    h: float
    T_p: float
    eps_psi: float
    eps_omega: float
    K: np.ndarray
    n_sub: int = 10

    def __post_init__(self):
        Q = check_square(self.Q, "Q")
        R = check_square(self.R, "R")
        P = check_square(self.P, "P")
        K = np.atleast_2d(np.asarray(self.K, dtype=float))
        if P.shape != Q.shape:
            raise ValueError("P and Q must have the same shape")
        if K.shape != (R.shape[0], Q.shape[0]):
            raise ValueError(f"K must be {R.shape[0]}x{Q.shape[0]}, got {K.shape}")
        _check_symmetric(Q, "Q", strict=False)
        _check_symmetric(R, "R", strict=True)
        _check_symmetric(P, "P", strict=True)
        if not 0 < self.h < self.T_p:
            raise ValueError("need 0 < h < T_p")
        n_seg = self.T_p / self.h
        if abs(n_seg - round(n_seg)) > 1e-9:
            raise ValueError("T_p must be an integer multiple of h")
        if not self.eps_psi > self.eps_omega > 0:
            raise ValueError("need eps_psi > eps_omega > 0")
        if int(self.n_sub) < 1:
            raise ValueError("n_sub must be a positive integer")
        for name, M in (("Q", Q), ("R", R), ("P", P), ("K", K)):
            M = M.copy()
            M.setflags(write=False)
            object.__setattr__(self, name, M)
        object.__setattr__(self, "n_sub", int(self.n_sub))

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def m(self) -> int:
        return self.R.shape[0]

    @property
    def n_seg(self) -> int:
        return int(round(self.T_p / self.h))

    @property
    def dt(self) -> float:
        return self.h / self.n_sub


def running_cost(cfg: FhocpConfig, e, u) -> float:
    e = check_vector(e, cfg.n, "e")
    u = check_vector(u, cfg.m, "u")
    return float(e @ cfg.Q @ e + u @ cfg.R @ u)


def terminal_cost(cfg: FhocpConfig, e) -> float:
    e = check_vector(e, cfg.n, "e")
    return float(e @ cfg.P @ e)


def project_input(u, u_max: float) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    nrm = np.linalg.norm(u)
    if nrm > u_max:
        return u * (u_max / nrm)
    return u


def terminal_controller(cfg: FhocpConfig, e, u_max: float) -> np.ndarray:
    """Linear feedback ``K e`` projected onto the input ball."""
    e = check_vector(e, cfg.n, "e")
    return project_input(cfg.K @ e, u_max)


@dataclass(frozen=True)
class CostConstants:
    L_F: float
    L_V: float
    rho: float
    xi: float


def xi_constant(L_F: float, L_V: float, L_g: float, h: float, T_p: float) -> float:
    """Disturbance gain in the optimal-cost decrease inequality."""
    return (math.expm1(L_g * h) / L_g) * (
        (L_V + L_F / L_g) * math.expm1(L_g * (T_p - h)) + L_V
    )


def cost_constants(cfg: FhocpConfig, L_g: float, e_sup: float,
                   psi_sup: Optional[float] = None, L_V: Optional[float] = None) -> CostConstants:
    """Lipschitz constants of the costs and the decrease-inequality constants.

    ``e_sup`` bounds ``|e|`` over the admissible error set. ``psi_sup`` bounds
    ``|e|`` over the level set ``V <= eps_psi`` and defaults to the exact value
    ``sqrt(eps_psi / lambda_min(P))``. Passing ``L_V`` overrides the derived
    value (published constants are used this way).
    """
    sig_q = float(np.linalg.norm(cfg.Q, 2))
    sig_p = float(np.linalg.norm(cfg.P, 2))
    if psi_sup is None:
        psi_sup = math.sqrt(cfg.eps_psi / np.linalg.eigvalsh(cfg.P).min())
    L_F = 2.0 * sig_q * e_sup
    if L_V is None:
        L_V = 2.0 * sig_p * psi_sup
    rho = float(min(np.linalg.eigvalsh(cfg.Q).min(), np.linalg.eigvalsh(cfg.R).min()))
    return CostConstants(L_F, float(L_V), max(rho, 0.0), xi_constant(L_F, L_V, L_g, cfg.h, cfg.T_p))


def disturbance_bound_rhs(eps_psi: float, eps_omega: float, L_V: float, L_g: float,
                          h: float, T_p: float) -> float:
    denom = (L_V / L_g) * math.expm1(L_g * h) * math.exp(L_g * (T_p - h))
    return (eps_psi - eps_omega) / denom


@dataclass(frozen=True)
class DisturbanceBoundReport:
    rhs: float
    w_max: float
    satisfied: bool


def check_disturbance_bound(cfg: FhocpConfig, L_g: float, w_max: float,
                            constants: CostConstants) -> DisturbanceBoundReport:
    rhs = disturbance_bound_rhs(cfg.eps_psi, cfg.eps_omega, constants.L_V, L_g, cfg.h, cfg.T_p)
    return DisturbanceBoundReport(rhs, float(w_max), bool(w_max <= rhs))


def ultimate_bounds(cfg: FhocpConfig) -> dict:
    lam = np.linalg.eigvalsh(cfg.P)
    return {
        "ultimate_bound_lambda_min": math.sqrt(cfg.eps_omega / lam.min()),
        "ultimate_bound_lambda_max": math.sqrt(cfg.eps_omega / lam.max()),
    }


@dataclass(frozen=True)
class TerminalRegionReport:
    samples: int
    input_margin: float      # min over samples of u_max - |K e| (>= 0 means no saturation)
    decrease_worst: float    # max of dV/dt + F along sampled points (<= 0 required)
    reach_worst: float       # max over samples of min_s V(e(s)) - eps_omega (<= 0 required)
    invariance_worst: float  # max over Omega-boundary samples of max_s V(e(s)) - eps_omega

    @property
    def input_ok(self) -> bool:
        return self.input_margin >= 0

    @property
    def decrease_ok(self) -> bool:
        return self.decrease_worst <= 0

    @property
    def reach_ok(self) -> bool:
        return self.reach_worst <= 0

    @property
    def invariance_ok(self) -> bool:
        return self.invariance_worst <= 0

    @property
    def ok(self) -> bool:
        return self.input_ok and self.decrease_ok and self.reach_ok and self.invariance_ok


def _level_set_points(P: np.ndarray, level: float, count: int, seed: int, boundary_share=0.5):
    n = P.shape[0]
    sob = qmc.Halton(d=n + 1, scramble=True, seed=seed).random(count)
    from scipy.stats import norm

    z = norm.ppf(np.clip(sob[:, :n], 1e-12, 1 - 1e-12))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    radius = np.ones(count)
    n_b = int(round(boundary_share * count))
    radius[n_b:] = sob[n_b:, n] ** (1.0 / n)
    # e^T P e = level * radius^2
    L = np.linalg.cholesky(P)
    pts = linalg.solve_triangular(L.T, (z * (math.sqrt(level) * radius)[:, None]).T, lower=False).T
    return pts


def verify_terminal_region(cfg: FhocpConfig, ed: ErrorDynamics, u_max: float,
                           samples: int = 256, seed: int = 0) -> TerminalRegionReport:
    """Sampled check of the terminal ingredients on ``Psi = {V <= eps_psi}``.

    For every sample: input admissibility of ``K e`` before saturation, the
    sign of ``dV/dt + F`` under the saturated feedback, and whether the
    closed-loop rollout over ``[0, h]`` enters ``Omega``. Points on the
    boundary of ``Omega`` are rolled out as well to test that it is not left.
    """
    dt = cfg.dt
    in_margin = np.inf
    dec = -np.inf
    reach = -np.inf
    inv = -np.inf

    def closed_loop(e, _u):
        return ed(e, terminal_controller(cfg, e, u_max))

    def roll(e):
        vals = [terminal_cost(cfg, e)]
        for _ in range(cfg.n_sub):
            e = rk4_step(closed_loop, e, None, dt)
            vals.append(terminal_cost(cfg, e))
        return np.array(vals[1:])

    for e in _level_set_points(cfg.P, cfg.eps_psi, samples, seed):
        raw = cfg.K @ e
        in_margin = min(in_margin, u_max - float(np.linalg.norm(raw)))
        u = project_input(raw, u_max)
        vdot = float(2.0 * e @ cfg.P @ ed(e, u))
        dec = max(dec, vdot + running_cost(cfg, e, u))
        reach = max(reach, float(roll(e).min()) - cfg.eps_omega)
    for e in _level_set_points(cfg.P, cfg.eps_omega, max(samples // 4, 8), seed + 1, 1.0):
        inv = max(inv, float(roll(e).max()) - cfg.eps_omega)
    return TerminalRegionReport(samples, in_margin, dec, reach, inv)


def linearize(ed: ErrorDynamics, step: float = 1e-6):
    """Central-difference Jacobians of ``g`` at ``(e, u) = (0, 0)``."""
    n, m = ed.model.n, ed.model.m
    A = np.zeros((n, n))
    B = np.zeros((n, m))
    e0, u0 = np.zeros(n), np.zeros(m)
    for i in range(n):
        d = np.zeros(n)
        d[i] = step
        A[:, i] = (ed(e0 + d, u0) - ed(e0 - d, u0)) / (2 * step)
    for i in range(m):
        d = np.zeros(m)
        d[i] = step
        B[:, i] = (ed(e0, u0 + d) - ed(e0, u0 - d)) / (2 * step)
    return A, B


def _stabilizable(A, B, tol=1e-9) -> bool:
    n = A.shape[0]
    for lam in np.linalg.eigvals(A):
        if lam.real >= -tol:
            M = np.hstack([A - lam * np.eye(n), B])
            if np.linalg.matrix_rank(M, tol=1e-8) < n:
                return False
    return True


def design_terminal_ingredients(ed: ErrorDynamics, Q, R, h: float, T_p: float, u_max: float,
                                scale: float = 1.1, omega_ratio: float = 0.05,
                                samples: int = 128, n_sub: int = 10,
                                psi_hi: float = 1e3, iters: int = 40) -> FhocpConfig:
    """LQR terminal cost and gain on the linearization at the goal.

    ``P`` is the Riccati solution times ``scale`` (>= 1 leaves slack in the
    decrease condition), ``eps_psi`` is the largest level found by bisection
    whose sampled verification passes, and ``eps_omega = omega_ratio * eps_psi``.
    Raises ``ValueError`` when the linearization is not stabilizable.
    """
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    A, B = linearize(ed)
    if not _stabilizable(A, B):
        raise ValueError("linearization at the goal is not stabilizable; "
                         "supply P, K and the terminal levels explicitly")
    # regularise a singular Q so the Riccati equation has a stabilizing solution
    Qr = Q + 1e-8 * np.eye(Q.shape[0])
    X = linalg.solve_continuous_are(A, B, Qr, R)
    K = -np.linalg.solve(R, B.T @ X)
    P = scale * X
    P = 0.5 * (P + P.T)

    def cfg_for(level):
        return FhocpConfig(Q, R, P, h, T_p, level, omega_ratio * level, K, n_sub)

    lo, hi = 0.0, psi_hi
    for _ in range(iters):
        mid = 0.5 * (lo + hi) if hi < np.inf else 2 * lo
        if verify_terminal_region(cfg_for(mid), ed, u_max, samples).ok:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-6 * hi:
            break
    if lo == 0.0:
        raise ValueError("no terminal level passed verification")
    return cfg_for(lo)
