"""Independent reference computations used by the tests.

Nothing here imports the code under test beyond plain data containers, so a
bug in the package cannot be mirrored by its oracle.
"""
from __future__ import annotations

import itertools
from fractions import Fraction

import mpmath
import numpy as np
from scipy.integrate import solve_ivp


# ------------------------------------------------------------------ set algebra

def grid_points(lo: Fraction, hi: Fraction, step: Fraction):
    """All multiples of ``step`` in ``[lo, hi]`` plus both endpoints."""
    pts = {lo, hi}
    k = -(-lo // step)
    while k * step <= hi:
        pts.add(k * step)
        k += 1
    return pts


def sumset_bounds(a, b, step=Fraction(1, 8)):
    """Hull of ``{x + y}`` by enumerating rational points of both intervals."""
    sums = [x + y for x, y in itertools.product(grid_points(*a, step), grid_points(*b, step))]
    return min(sums), max(sums)


def erosion_bounds(a, b, step=Fraction(1, 8)):
    """``{x : x + y in a for all y in b}`` scanned over a rational grid.

    Returns ``None`` for an empty result. The scan covers a window wide enough
    to contain any candidate, with the endpoints of the closed-form answer
    added to the grid so exact endpoints are representable.
    """
    blo, bhi = b
    lo, hi = a[0] - blo, a[1] - bhi
    window = grid_points(min(a[0], lo) - 2, max(a[1], hi) + 2, step) | {lo, hi}
    ok = [x for x in window if a[0] <= x + blo and x + bhi <= a[1]]
    if not ok:
        return None
    return min(ok), max(ok)


# ------------------------------------------------------------------ dynamics

def unicycle_rhs(t, x, u):
    return [u[0] * np.cos(x[2]), u[0] * np.sin(x[2]), u[1]]


def reference_solution(x0, u, T, rhs=unicycle_rhs):
    """High-accuracy adaptive solve of a constant-input ODE at ``T``."""
    sol = solve_ivp(rhs, (0.0, T), np.asarray(x0, float), args=(np.asarray(u, float),),
                    method="DOP853", rtol=1e-12, atol=1e-13)
    return sol.y[:, -1]


# ------------------------------------------------------------------ FHOCP on the 1-D integrator

def integrator_grid_search(e0, h, q, r, p, eps_omega, u_max, resolution=1e-3):
    """Exhaustive minimum of the two-segment integrator FHOCP.

    Dynamics ``de/dt = u`` integrate exactly, so ``e1 = e0 + h u1`` and
    ``e2 = e1 + h u2``. The objective is the trapezoid rule on the three nodes
    plus ``r u^2`` held per segment plus ``p e2^2``, subject to
    ``|u_j| <= u_max`` and ``p e2^2 <= eps_omega``. Returns the minimum.
    """
    u = np.arange(-u_max, u_max + resolution / 2, resolution)
    u1 = u[:, None]
    u2 = u[None, :]
    e1 = e0 + h * u1
    e2 = e1 + h * u2
    run = 0.5 * h * (q * e0 ** 2 + q * e1 ** 2) + 0.5 * h * (q * e1 ** 2 + q * e2 ** 2)
    J = run + h * r * (u1 ** 2 + u2 ** 2) + p * e2 ** 2
    J = np.where(p * e2 ** 2 <= eps_omega, J, np.inf)
    return float(J.min())


def integrator_objective(e0, U, h, q, r, p, eps_omega, mu):
    """Cost plus ``mu (1 - eps/V)^2`` for ``V = p e_T^2 > eps``; no state constraints."""
    e = [e0]
    for u in U:
        e.append(e[-1] + h * u)
    cost = 0.0
    for j in range(len(U)):
        cost += 0.5 * h * (q * e[j] ** 2 + q * e[j + 1] ** 2) + h * r * U[j] ** 2
    V = p * e[-1] ** 2
    cost += V
    pen = (1 - eps_omega / V) ** 2 if V > eps_omega else 0.0
    return cost + mu * pen


def integrator_gradient(e0, U, h, q, r, p, eps_omega, mu):
    """Analytic gradient of ``integrator_objective`` with respect to ``U``."""
    N = len(U)
    e = [e0]
    for u in U:
        e.append(e[-1] + h * u)
    # trapezoid: interior nodes carry weight h, end nodes h/2; d e_k / d u_j = h for k > j
    dJ_de = np.zeros(N + 1)
    for k in range(N + 1):
        w = 0.5 * h if k in (0, N) else h
        dJ_de[k] = 2 * w * q * e[k]
    V = p * e[-1] ** 2
    dJ_de[N] += 2 * p * e[-1]
    if V > eps_omega:
        b = 1 - eps_omega / V
        dJ_de[N] += mu * 2 * b * eps_omega / V ** 2 * 2 * p * e[-1]
    g = np.zeros(N)
    for j in range(N):
        g[j] = 2 * h * r * U[j] + h * dJ_de[j + 1:].sum()
    return g


# ------------------------------------------------------------------ theorem constants

def disturbance_bound_mp(eps_psi, eps_omega, L_V, L_g, h, T_p, dps=50):
    """``(eps_psi - eps_omega) / ((L_V / L_g) (e^{L_g h} - 1) e^{L_g (T_p - h)})``."""
    with mpmath.workdps(dps):
        num = mpmath.mpf(eps_psi) - mpmath.mpf(eps_omega)
        Lg = mpmath.mpf(L_g)
        den = (mpmath.mpf(L_V) / Lg) * (mpmath.exp(Lg * h) - 1) * mpmath.exp(Lg * (mpmath.mpf(T_p) - h))
        return num / den


# ------------------------------------------------------------------ plan admissibility

def audit_plan(plan, state_tol: float, terminal_tol: float) -> dict:
    """Re-check the four admissibility clauses from the fields of a Plan alone.

    Clauses: inputs are one constant vector per segment; every input lies in
    the ``u_max`` ball; every shooting node lies in the constraint set
    tightened by ``delta(s)``; the last node lies in the terminal set. State
    clauses allow ``state_tol`` (absolute distance); the terminal clause allows
    ``terminal_tol`` relative to ``eps_omega``.
    """
    cs = plan.snapshot
    U = np.asarray(plan.inputs)
    E = np.asarray(plan.errors)
    n_seg = U.shape[0]
    out = {}
    out["piecewise_constant"] = bool(U.ndim == 2 and E.shape[0] == n_seg * plan.n_sub + 1)
    out["input_ball"] = bool(np.all(np.linalg.norm(U, axis=1) <= plan.u_max * (1 + 1e-12)))
    p = cs.pos_dims
    worst = -np.inf
    w_max, L = plan.schedule.w_max, plan.schedule.lipschitz
    for j in range(1, n_seg + 1):
        k = j * plan.n_sub
        s = k * plan.dt
        d = (w_max / L) * np.expm1(L * s)
        pos = E[k, :p] + np.asarray(plan.x_des)[:p]
        for jj, (r_j, traj) in cs.in_range.items():
            worst = max(worst, cs.radius + r_j + cs.eps + d - np.linalg.norm(pos - traj[k]))
        for jj, traj in cs.neighbors.items():
            worst = max(worst, np.linalg.norm(pos - traj[k]) - (cs.sensing_range - cs.eps - d))
        for ob in cs.obstacles:
            worst = max(worst, cs.radius + ob.radius + cs.eps + d - np.linalg.norm(pos - ob.center))
        worst = max(worst, np.linalg.norm(pos - cs.workspace.center)
                    - (cs.workspace.radius - cs.radius - cs.eps - d))
    out["tightened_state"] = bool(worst <= state_tol)
    out["worst_state_violation"] = float(worst)
    eT = E[-1]
    V = float(eT @ np.asarray(plan.P) @ eT)
    out["terminal"] = bool(V <= plan.eps_omega * (1 + terminal_tol))
    out["terminal_ratio"] = V / plan.eps_omega
    out["ok"] = all(out[k] for k in ("piecewise_constant", "input_ball", "tightened_state",
                                      "terminal"))
    return out
