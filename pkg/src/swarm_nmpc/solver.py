"""Single-shooting solver for one agent's finite-horizon problem.

Inputs are piecewise constant on the sampling grid. State constraints are
handled by a quadratic penalty whose weight grows until the violation
tolerance is met; the inner problem is solved by a spectral projected-gradient
method with a non-monotone line search, projecting each input segment onto the
input ball. The inner solver differentiates the penalized objective with the
discrete adjoint of the RK4 rollout; a central finite-difference gradient is
exposed for cross-checking.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numba
import numpy as np

from ._nbtypes import EVALUATE_SIG, FD_GRAD_SIG, SPG_SIG, VALUE_GRAD_SIG
from .constraints import ConstraintSet, TighteningSchedule
from .dynamics import ErrorDynamics, IntegrationDiverged, rollout
from .ocp import FhocpConfig, terminal_controller
from .validation import check_input_sequence, check_vector

__all__ = [
    "Plan",
    "SolverSettings",
    "PenaltyBreakdown",
    "solve_fhocp",
    "warm_start_shift",
    "objective_gradient",
    "adjoint_gradient",
    "penalized_objective",
    "discretized_cost",
    "project_inputs",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SolverSettings:
    max_outer: int = 6
    max_inner: int = 150
    mu_init: float = 10.0
    mu_growth: float = 10.0
    mu_cap: float = 1e6
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40
    memory: int = 5
    stationarity_tol: float = 1e-6
    # relative objective progress over ``memory`` iterations below which to stop
    ftol: float = 1e-7
    violation_tol: float = 1e-3
    # terminal tolerance is relative to eps_omega
    terminal_tol: float = 0.01
    fd_step: float = 1e-6
    # "substeps" checks constraints at every integrator step, "nodes" only at segment ends
    constraint_grid: str = "substeps"
    # beyond the first segment, state-constraint violations are weighted by
    # (l / (l + delta(s) - delta(h)))^2
    length_scale: float = 0.01
    # the penalty aims this far inside every state constraint, so that the
    # small residual violation of a penalty solution stays on the safe side
    backoff: float = 1e-3
    # when to retry from a hold-still seed and from the feedback rollout:
    # "unsafe" if the plan breaks an untightened constraint, "infeasible" if
    # it also misses the tightened ones, "off" never
    restarts: str = "infeasible"

    def __post_init__(self):
        for name in ("max_outer", "max_inner", "mu_init", "mu_growth", "mu_cap",
                     "armijo", "backtrack", "max_backtracks", "memory",
                     "stationarity_tol", "ftol", "violation_tol", "terminal_tol", "fd_step",
                     "length_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.mu_growth <= 1 or self.backtrack >= 1:
            raise ValueError("need mu_growth > 1 and backtrack < 1")
        if self.constraint_grid not in ("substeps", "nodes"):
            raise ValueError("constraint_grid must be 'substeps' or 'nodes'")
        if self.restarts not in ("unsafe", "infeasible", "off"):
            raise ValueError("restarts must be 'unsafe', 'infeasible' or 'off'")


@dataclass(frozen=True)
class Plan:
    """Open-loop solution of one agent at solve time ``t_k``.

    ``errors`` holds the nominal error trajectory at every integrator step
    (``n_seg * n_sub + 1`` rows); shooting nodes are every ``n_sub``-th row.
    """

    owner: int
    t_k: float
    inputs: np.ndarray
    errors: np.ndarray
    x_des: np.ndarray
    n_sub: int
    dt: float
    cost: float
    penalized: float
    mu: float
    max_violation: float
    terminal_violation: float
    margins_ok: bool
    terminal_ok: bool
    status: str = "solved"
    snapshot: Optional[ConstraintSet] = field(default=None, repr=False, compare=False)
    # inputs the solve was seeded with, kept so a round can be replayed
    seed_inputs: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    # problem data an auditor needs: input bound, tightening and terminal set
    u_max: Optional[float] = field(default=None, compare=False)
    schedule: Optional[TighteningSchedule] = field(default=None, repr=False, compare=False)
    P: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    eps_omega: Optional[float] = field(default=None, compare=False)

    @property
    def feasible(self) -> bool:
        return self.margins_ok and self.terminal_ok

    @property
    def nodes(self) -> np.ndarray:
        return self.errors[:: self.n_sub]

    @property
    def states(self) -> np.ndarray:
        return self.errors + self.x_des

    @property
    def h(self) -> float:
        return self.n_sub * self.dt


@dataclass(frozen=True)
class PenaltyBreakdown:
    cost: float
    penalty: float
    max_violation: float
    terminal_violation: float

    def total(self, mu: float) -> float:
        return self.cost + mu * self.penalty


@numba.njit(cache=True)
def _quad(M, v):
    acc = 0.0
    for i in range(v.shape[0]):
        row = 0.0
        for j in range(v.shape[0]):
            row += M[i, j] * v[j]
        acc += v[i] * row
    return acc


@numba.njit(cache=True)
def _add_matvec(out, c, M, v):
    # out += c * M v
    for i in range(M.shape[0]):
        row = 0.0
        for j in range(M.shape[1]):
            row += M[i, j] * v[j]
        out[i] += c * row


@numba.njit(cache=True)
def _forward(field, U, e0, x_des, n_sub, dt, stages):
    """RK4 rollout; if ``stages`` has rows, the first three stage slopes of
    every step are stored there for the adjoint pass."""
    n_seg = U.shape[0]
    n = e0.shape[0]
    keep = stages.shape[0] > 0
    traj = np.empty((n_seg * n_sub + 1, n))
    e = e0.copy()
    y = np.empty(n)
    traj[0] = e
    idx = 1
    for j in range(n_seg):
        u = U[j]
        for _ in range(n_sub):
            for i in range(n):
                y[i] = e[i] + x_des[i]
            k1 = field(y, u)
            for i in range(n):
                y[i] = e[i] + 0.5 * dt * k1[i] + x_des[i]
            k2 = field(y, u)
            for i in range(n):
                y[i] = e[i] + 0.5 * dt * k2[i] + x_des[i]
            k3 = field(y, u)
            for i in range(n):
                y[i] = e[i] + dt * k3[i] + x_des[i]
            k4 = field(y, u)
            for i in range(n):
                e[i] += (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            traj[idx] = e
            if keep:
                stages[idx - 1, 0] = k1
                stages[idx - 1, 1] = k2
                stages[idx - 1, 2] = k3
            idx += 1
    return traj


@numba.njit(cache=True)
def _dist(px, c, p):
    acc = 0.0
    for i in range(p):
        d = px[i] - c[i]
        acc += d * d
    return math.sqrt(acc)


@numba.njit(cache=True)
def _hinge(v, wk, dist, px, c, sign, gp):
    # accumulate d(wk * v^2)/dp into gp, where v = const + sign * |p - c|
    if dist > 0.0:
        f = 2.0 * wk * v * sign / dist
        for i in range(gp.shape[0]):
            gp[i] += f * (px[i] - c[i])


@numba.njit(cache=True)
def _term(v, d, wk, backoff, dist, px, c, sign, gp):
    # v is the tightened violation; the untightened one (v - d) keeps the
    # remaining weight so that rounds with unreachable tightening still
    # respect the nominal constraint
    pen = 0.0
    vt = v + backoff
    if vt > 0:
        pen += wk * vt * vt
        _hinge(vt, wk, dist, px, c, sign, gp)
    vn = v - d + backoff
    wn = 1.0 - wk
    if vn > 0 and wn > 0:
        pen += wn * vn * vn
        _hinge(vn, wn, dist, px, c, sign, gp)
    return pen


@numba.njit(cache=True)
def _sample_penalty(px, k, d, wk, sep_pos, sep_thr, nb_pos, nb_thr, obs_c, obs_thr,
                    ws_c, ws_thr, backoff, gp):
    p = px.shape[0]
    pen = 0.0
    worst = 0.0
    for q in range(sep_thr.shape[0]):
        c = sep_pos[q, k]
        dist = _dist(px, c, p)
        v = sep_thr[q] + d - dist
        worst = max(worst, v)
        pen += _term(v, d, wk, backoff, dist, px, c, -1.0, gp)
    for q in range(nb_thr.shape[0]):
        c = nb_pos[q, k]
        dist = _dist(px, c, p)
        v = dist - (nb_thr[q] - d)
        worst = max(worst, v)
        pen += _term(v, d, wk, backoff, dist, px, c, 1.0, gp)
    for q in range(obs_thr.shape[0]):
        c = obs_c[q]
        dist = _dist(px, c, p)
        v = obs_thr[q] + d - dist
        worst = max(worst, v)
        pen += _term(v, d, wk, backoff, dist, px, c, -1.0, gp)
    dist = _dist(px, ws_c, p)
    v = dist - (ws_thr - d)
    worst = max(worst, v)
    pen += _term(v, d, wk, backoff, dist, px, ws_c, 1.0, gp)
    return pen, worst


@numba.njit(cache=True)
def _terms(traj, U, x_des, n_sub, dt, Q, R, P, eps_omega, pos_dims,
           sep_pos, sep_thr, nb_pos, nb_thr, obs_c, obs_thr, ws_c, ws_thr,
           delta, weight, stride, backoff, mu, G):
    """Cost, penalty, worst violation and relative terminal violation.

    Direct derivatives of ``cost + mu * penalty`` with respect to each
    trajectory sample are added to ``G`` when it has rows.
    """
    grad = G.shape[0] > 0
    n_seg = U.shape[0]
    T = traj.shape[0]
    h = n_sub * dt
    cost = 0.0
    for j in range(n_seg):
        cost += 0.5 * h * (_quad(Q, traj[j * n_sub]) + _quad(Q, traj[(j + 1) * n_sub])
                           + 2.0 * _quad(R, U[j]))
    eT = traj[T - 1]
    vT = _quad(P, eT)
    cost += vT
    if grad:
        for j in range(1, n_seg + 1):
            c = h if j < n_seg else 0.5 * h
            _add_matvec(G[j * n_sub], 2.0 * c, Q, traj[j * n_sub])
        _add_matvec(G[T - 1], 2.0, P, eT)

    pen = 0.0
    worst = 0.0
    px = np.empty(pos_dims)
    gp = np.zeros(pos_dims)
    for k in range(stride, T, stride):
        for i in range(pos_dims):
            px[i] = traj[k, i] + x_des[i]
            gp[i] = 0.0
        p, w = _sample_penalty(px, k, delta[k], weight[k], sep_pos, sep_thr, nb_pos, nb_thr,
                               obs_c, obs_thr, ws_c, ws_thr, backoff, gp)
        pen += p
        worst = max(worst, w)
        if grad:
            for i in range(pos_dims):
                G[k, i] += mu * gp[i]
    # relative terminal violation; the penalty uses the bounded form 1 - eps/V,
    # which has the same zero set but cannot swamp the state constraints
    tv = 0.0
    if vT > eps_omega:
        tv = vT / eps_omega - 1.0
        b = 1.0 - eps_omega / vT
        pen += b * b
        if grad:
            _add_matvec(G[T - 1], mu * 4.0 * b * eps_omega / (vT * vT), P, eT)
    return cost, pen, worst, tv


@numba.njit(EVALUATE_SIG, cache=True)
def _evaluate(field, U, e0, x_des, n_sub, dt, Q, R, P, eps_omega, pos_dims,
              sep_pos, sep_thr, nb_pos, nb_thr, obs_c, obs_thr, ws_c, ws_thr,
              delta, weight, stride, backoff):
    traj = _forward(field, U, e0, x_des, n_sub, dt, np.empty((0, 3, e0.shape[0])))
    cost, pen, worst, tv = _terms(traj, U, x_des, n_sub, dt, Q, R, P, eps_omega, pos_dims,
                                  sep_pos, sep_thr, nb_pos, nb_thr, obs_c, obs_thr, ws_c,
                                  ws_thr, delta, weight, stride, backoff, 1.0,
                                  np.empty((0, e0.shape[0])))
    return cost, pen, worst, tv, traj


@numba.njit(cache=True)
def _vjp(jac, y, u, a, gx, gu, gy):
    # gx += a A, gu += a B, gy = a A for (A, B) = jac(y, u)
    A, B = jac(y, u)
    n, m = B.shape
    for i in range(n):
        acc = 0.0
        for r in range(n):
            acc += a[r] * A[r, i]
        gy[i] = acc
        gx[i] += acc
    for i in range(m):
        acc = 0.0
        for r in range(n):
            acc += a[r] * B[r, i]
        gu[i] += acc


@numba.njit(VALUE_GRAD_SIG, cache=True)
def _value_grad(field, jac, U, e0, x_des, n_sub, dt, Q, R, P, eps_omega, pos_dims,
                sep_pos, sep_thr, nb_pos, nb_thr, obs_c, obs_thr, ws_c, ws_thr,
                delta, weight, stride, backoff, mu):
    """Penalized objective and its exact gradient by the discrete adjoint of RK4."""
    n = e0.shape[0]
    m = U.shape[1]
    T = U.shape[0] * n_sub + 1
    stages = np.empty((T - 1, 3, n))
    traj = _forward(field, U, e0, x_des, n_sub, dt, stages)
    G = np.zeros_like(traj)
    cost, pen, worst, tv = _terms(traj, U, x_des, n_sub, dt, Q, R, P, eps_omega, pos_dims,
                                  sep_pos, sep_thr, nb_pos, nb_thr, obs_c, obs_thr, ws_c,
                                  ws_thr, delta, weight, stride, backoff, mu, G)
    h = n_sub * dt
    gU = np.zeros_like(U)
    for j in range(U.shape[0]):
        _add_matvec(gU[j], 2.0 * h, R, U[j])
    lam = G[T - 1].copy()
    gx = np.empty(n)
    gu = np.empty(m)
    gy = np.empty(n)
    y = np.empty(n)
    a = np.empty(n)
    for s in range(T - 2, -1, -1):
        u = U[s // n_sub]
        for i in range(m):
            gu[i] = 0.0
        for i in range(n):
            gx[i] = lam[i]
        # stage 4 at x + dt k3
        for i in range(n):
            y[i] = traj[s, i] + x_des[i] + dt * stages[s, 2, i]
            a[i] = (dt / 6.0) * lam[i]
        _vjp(jac, y, u, a, gx, gu, gy)
        # stage 3 at x + dt/2 k2; its slope feeds stage 4 with factor dt
        for i in range(n):
            y[i] = traj[s, i] + x_des[i] + 0.5 * dt * stages[s, 1, i]
            a[i] = (dt / 3.0) * lam[i] + dt * gy[i]
        _vjp(jac, y, u, a, gx, gu, gy)
        for i in range(n):
            y[i] = traj[s, i] + x_des[i] + 0.5 * dt * stages[s, 0, i]
            a[i] = (dt / 3.0) * lam[i] + 0.5 * dt * gy[i]
        _vjp(jac, y, u, a, gx, gu, gy)
        for i in range(n):
            y[i] = traj[s, i] + x_des[i]
            a[i] = (dt / 6.0) * lam[i] + 0.5 * dt * gy[i]
        _vjp(jac, y, u, a, gx, gu, gy)
        j = s // n_sub
        for i in range(m):
            gU[j, i] += gu[i]
        for i in range(n):
            lam[i] = gx[i] + G[s, i]
    return cost + mu * pen, gU


@numba.njit(FD_GRAD_SIG, cache=True)
def _fd_gradient(field, U, e0, x_des, n_sub, dt, Q, R, P, eps_omega, pos_dims,
                 sep_pos, sep_thr, nb_pos, nb_thr, obs_c, obs_thr, ws_c, ws_thr,
                 delta, weight, stride, backoff, mu, step):
    g = np.empty_like(U)
    W = U.copy()
    for j in range(U.shape[0]):
        for i in range(U.shape[1]):
            base = W[j, i]
            W[j, i] = base + step
            c1, p1, _, _, _ = _evaluate(field, W, e0, x_des, n_sub, dt, Q, R, P, eps_omega,
                                        pos_dims, sep_pos, sep_thr, nb_pos, nb_thr, obs_c,
                                        obs_thr, ws_c, ws_thr, delta, weight, stride, backoff)
            W[j, i] = base - step
            c2, p2, _, _, _ = _evaluate(field, W, e0, x_des, n_sub, dt, Q, R, P, eps_omega,
                                        pos_dims, sep_pos, sep_thr, nb_pos, nb_thr, obs_c,
                                        obs_thr, ws_c, ws_thr, delta, weight, stride, backoff)
            W[j, i] = base
            g[j, i] = ((c1 + mu * p1) - (c2 + mu * p2)) / (2.0 * step)
    return g


def project_inputs(U: np.ndarray, u_max: float) -> np.ndarray:
    nrm = np.linalg.norm(U, axis=1, keepdims=True)
    scale = np.where(nrm > u_max, u_max / np.maximum(nrm, 1e-300), 1.0)
    return U * scale


class _Problem:
    """Arrays of one FHOCP instance bound for repeated compiled evaluation."""

    def __init__(self, cfg: FhocpConfig, ed: ErrorDynamics, cs: ConstraintSet,
                 ts: TighteningSchedule, e0, u_max: float, settings: SolverSettings):
        self.cfg, self.ed, self.cs, self.ts = cfg, ed, cs, ts
        self.u_max = float(u_max)
        self.settings = settings
        self.e0 = check_vector(e0, cfg.n, "e0")
        T = cfg.n_seg * cfg.n_sub + 1
        if cs.n_samples is not None and cs.n_samples < T:
            raise ValueError(f"constraint snapshot covers {cs.n_samples} samples, need {T}")
        if abs(cs.dt - cfg.dt) > 1e-12:
            raise ValueError("constraint snapshot and config use different time steps")
        arr = cs.arrays()
        if arr["sep_pos"].shape[1] < T:
            arr["sep_pos"] = np.zeros((arr["sep_pos"].shape[0], T, cs.pos_dims))
            arr["nb_pos"] = np.zeros((arr["nb_pos"].shape[0], T, cs.pos_dims))
        self.delta = np.asarray(ts.delta(cfg.dt * np.arange(T)), dtype=float)
        # constraint scaling: the applied first segment carries full weight; beyond
        # it, violations count less where the tightening has grown large
        ell = settings.length_scale
        grown = np.maximum(self.delta - self.delta[min(cfg.n_sub, T - 1)], 0.0)
        self.weight = (ell / (ell + grown)) ** 2
        self.stride = 1 if settings.constraint_grid == "substeps" else cfg.n_sub
        self.field = ed.model.field
        self.jac = ed.model.jacobian
        if settings.violation_tol > cs.eps / 10:
            raise ValueError("violation tolerance must not exceed eps / 10")
        c1 = lambda a: np.array(a, dtype=float, order="C").reshape(-1)
        c = lambda a: np.array(a, dtype=float, order="C")
        p = cs.pos_dims
        self.args = (
            c1(self.e0), c1(ed.x_des), int(cfg.n_sub), float(cfg.dt),
            c(cfg.Q), c(cfg.R), c(cfg.P), float(cfg.eps_omega), int(p),
            c(arr["sep_pos"]).reshape(-1, T if arr["sep_pos"].size == 0 else arr["sep_pos"].shape[1], p),
            c1(arr["sep_thr"]),
            c(arr["nb_pos"]).reshape(-1, T if arr["nb_pos"].size == 0 else arr["nb_pos"].shape[1], p),
            c1(arr["nb_thr"]), c(arr["obs_c"]).reshape(-1, p), c1(arr["obs_thr"]),
            c1(arr["ws_c"]), float(arr["ws_thr"]), c1(self.delta), c1(self.weight),
            int(self.stride), float(settings.backoff),
        )

    def evaluate(self, U):
        U = np.array(U, dtype=float, order="C")
        cost, pen, worst, tv, traj = _evaluate(self.field, U, *self.args)
        if not (math.isfinite(cost) and math.isfinite(pen)):
            raise IntegrationDiverged("non-finite objective in FHOCP rollout")
        return PenaltyBreakdown(cost, pen, worst, tv), traj

    def objective(self, U, mu):
        bd, _ = self.evaluate(U)
        return bd.total(mu)

    def value_grad(self, U, mu):
        U = np.array(U, dtype=float, order="C")
        f, g = _value_grad(self.field, self.jac, U, *self.args, float(mu))
        if not math.isfinite(f):
            raise IntegrationDiverged("non-finite objective in FHOCP rollout")
        return f, g

    def fd_gradient(self, U, mu):
        U = np.array(U, dtype=float, order="C")
        return _fd_gradient(self.field, U, *self.args, float(mu), float(self.settings.fd_step))

    def nominal_violation(self, traj, upto: int) -> float:
        """Largest untightened violation over samples ``1..upto`` of ``traj``."""
        a = self.args
        x_des, p = a[1], a[8]
        pos = traj[1: upto + 1, :p] + x_des[:p]
        k = np.arange(1, upto + 1)
        worst = 0.0
        if a[10].size:
            d = np.linalg.norm(pos[None] - a[9][:, k], axis=2)
            worst = max(worst, float((a[10][:, None] - d).max()))
        if a[12].size:
            d = np.linalg.norm(pos[None] - a[11][:, k], axis=2)
            worst = max(worst, float((d - a[12][:, None]).max()))
        if a[14].size:
            d = np.linalg.norm(pos[None] - a[13][:, None], axis=2)
            worst = max(worst, float((a[14][:, None] - d).max()))
        d = np.linalg.norm(pos - a[15], axis=1)
        worst = max(worst, float((d - a[16]).max()))
        return worst

    def feasible(self, bd: PenaltyBreakdown):
        st = self.settings
        return bd.max_violation <= st.violation_tol, bd.terminal_violation <= st.terminal_tol


@numba.njit(cache=True)
def _project_rows(U, u_max):
    out = U.copy()
    for j in range(U.shape[0]):
        nrm = math.sqrt(np.sum(U[j] * U[j]))
        if nrm > u_max:
            out[j] = U[j] * (u_max / nrm)
    return out


@numba.njit(SPG_SIG, cache=True)
def _spg_kernel(field, jac, U0, args, mu, u_max, max_inner, memory, armijo, backtrack,
                max_backtracks, stat_tol, ftol):
    """Spectral projected gradient with a non-monotone Armijo search.

    Stops on a small projected gradient, on relative progress of the best
    value below ``ftol`` across ``memory`` iterations, or after ``max_inner``
    iterations. A stall reached away from the best iterate first restarts
    from it with a fresh step and window. Returns the best iterate seen.
    """
    U = _project_rows(U0, u_max)
    f, g = _value_grad(field, jac, U, args[0], args[1], args[2], args[3], args[4], args[5], args[6], args[7], args[8], args[9], args[10], args[11], args[12], args[13], args[14], args[15], args[16], args[17], args[18], args[19], args[20], mu)
    hist = np.full(max_inner + 1, -np.inf)
    hist[0] = f
    best = np.full(max_inner + 1, np.inf)
    best[0] = f
    Ubest = U.copy()
    pg = _project_rows(U - g, u_max) - U
    lam = 1.0 / max(np.abs(pg).max(), 1e-12)
    it = 0
    base = 0
    restarted = False
    while it < max_inner:
        if np.abs(pg).max() <= stat_tol:
            break
        if it - base >= memory and best[it - memory] - best[it] <= ftol * max(1.0, abs(best[it])):
            if restarted or f <= best[it]:
                break
            U = Ubest.copy()
            f, g = _value_grad(field, jac, U, args[0], args[1], args[2], args[3], args[4], args[5], args[6], args[7], args[8], args[9], args[10], args[11], args[12], args[13], args[14], args[15], args[16], args[17], args[18], args[19], args[20], mu)
            pg = _project_rows(U - g, u_max) - U
            lam = 1.0 / max(np.abs(pg).max(), 1e-12)
            base = it
            hist[it] = f
            restarted = True
            continue
        lam = min(max(lam, 1e-10), 1e10)
        d = _project_rows(U - lam * g, u_max) - U
        gd = np.sum(g * d)
        if gd >= 0:
            break
        fref = hist[max(base, it - memory + 1): it + 1].max()
        alpha = 1.0
        ok = False
        for _ in range(max_backtracks):
            Un = U + alpha * d
            c, p, _, _, _ = _evaluate(field, Un, args[0], args[1], args[2], args[3], args[4], args[5], args[6], args[7], args[8], args[9], args[10], args[11], args[12], args[13], args[14], args[15], args[16], args[17], args[18], args[19], args[20])
            if c + mu * p <= fref + armijo * alpha * gd:
                ok = True
                break
            alpha *= backtrack
        if not ok:
            break
        fn, gn = _value_grad(field, jac, Un, args[0], args[1], args[2], args[3], args[4], args[5], args[6], args[7], args[8], args[9], args[10], args[11], args[12], args[13], args[14], args[15], args[16], args[17], args[18], args[19], args[20], mu)
        s_ = Un - U
        y = gn - g
        sy = np.sum(s_ * y)
        lam = np.sum(s_ * s_) / sy if sy > 0 else 1e10
        U, f, g = Un, fn, gn
        it += 1
        hist[it] = f
        best[it] = min(best[it - 1], f)
        if f < best[it - 1]:
            Ubest = U.copy()
            restarted = False
        pg = _project_rows(U - g, u_max) - U
    return Ubest, it


def _spg(prob: _Problem, U, mu):
    st = prob.settings
    U, _ = _spg_kernel(prob.field, prob.jac, np.array(U, dtype=float, order="C"), prob.args,
                       float(mu), prob.u_max, int(st.max_inner), int(st.memory),
                       float(st.armijo), float(st.backtrack), int(st.max_backtracks),
                       float(st.stationarity_tol), float(st.ftol))
    if not np.isfinite(U).all():
        raise IntegrationDiverged("non-finite iterate in FHOCP solve")
    return U


def feedback_guess(cfg: FhocpConfig, ed: ErrorDynamics, e0, u_max: float) -> np.ndarray:
    """Piecewise-constant rollout of the terminal feedback, used as a cold start."""
    U = np.zeros((cfg.n_seg, cfg.m))
    e = np.asarray(e0, dtype=float)
    for j in range(cfg.n_seg):
        U[j] = terminal_controller(cfg, e, u_max)
        e = rollout(ed, e, U[j:j + 1], cfg.n_sub, cfg.dt)[-1]
    return U


def _make_plan(prob: _Problem, U, mu, owner, t_k, status, seed=None) -> Plan:
    bd, traj = prob.evaluate(U)
    margins_ok, terminal_ok = prob.feasible(bd)
    U = U.copy()
    U.setflags(write=False)
    traj.setflags(write=False)
    return Plan(owner=owner, t_k=float(t_k), inputs=U, errors=traj, x_des=prob.ed.x_des,
                n_sub=prob.cfg.n_sub, dt=prob.cfg.dt, cost=bd.cost,
                penalized=bd.total(mu), mu=mu, max_violation=bd.max_violation,
                terminal_violation=bd.terminal_violation, margins_ok=bool(margins_ok),
                terminal_ok=bool(terminal_ok), status=status, snapshot=prob.cs,
                seed_inputs=seed, u_max=prob.u_max, schedule=prob.ts, P=prob.cfg.P,
                eps_omega=prob.cfg.eps_omega)


def solve_fhocp(cfg: FhocpConfig, ed: ErrorDynamics, cs: ConstraintSet, ts: TighteningSchedule,
                e0, u_max: float, warm: Optional[Plan] = None,
                settings: Optional[SolverSettings] = None, t_k: float = 0.0) -> Plan:
    """Solve one agent's FHOCP from the measured error ``e0``.

    Never raises on infeasibility: the returned plan carries ``margins_ok`` and
    ``terminal_ok`` flags and ``status`` is ``"infeasible"`` when the penalty
    schedule ends without meeting the tolerances.
    """
    st = settings or SolverSettings()
    prob = _Problem(cfg, ed, cs, ts, e0, u_max, st)
    if warm is not None:
        if warm.owner != cs.owner:
            raise ValueError("warm start belongs to a different agent")
        U0 = check_input_sequence(warm.inputs, cfg.n_seg, cfg.m)
    else:
        U0 = feedback_guess(cfg, ed, prob.e0, u_max)
    U0 = project_inputs(U0, u_max)

    U, mu, status = _penalty_schedule(prob, U0)
    best = _Candidate(prob, U, U0, mu, status)
    retry = {"unsafe": best.unsafe_horizon, "off": False,
             "infeasible": best.unsafe_horizon or best.status != "solved"}[st.restarts]
    if retry:
        # a stuck local solve is retried from holding still and from the feedback rollout
        seeds = [np.zeros_like(U0)]
        if warm is not None:
            seeds.append(project_inputs(feedback_guess(cfg, ed, prob.e0, u_max), u_max))
        for S in seeds:
            Us, mus, sts = _penalty_schedule(prob, S)
            cand = _Candidate(prob, Us, S, mus, sts)
            if cand.key < best.key:
                best = cand
    return _make_plan(prob, best.U, best.mu, cs.owner, t_k, best.status,
                      seed=None if warm is None else np.asarray(warm.inputs).copy())


def _penalty_schedule(prob: _Problem, U0):
    st = prob.settings
    U, mu = U0, st.mu_init
    status = "infeasible"
    for outer in range(st.max_outer):
        U = _spg(prob, U, mu)
        bd, _ = prob.evaluate(U)
        m_ok, t_ok = prob.feasible(bd)
        logger.debug("agent %s mu=%.3g cost=%.6g penalty=%.6g viol=%.3g term=%.3g",
                     prob.cs.owner, mu, bd.cost, bd.penalty, bd.max_violation,
                     bd.terminal_violation)
        if m_ok and t_ok:
            status = "solved"
            break
        if mu * st.mu_growth > st.mu_cap:
            break
        mu *= st.mu_growth
    # never hand back something worse than the seed at the final weight
    if status != "solved" and prob.objective(U0, mu) < prob.objective(U, mu):
        U = U0
        bd, _ = prob.evaluate(U)
        m_ok, t_ok = prob.feasible(bd)
        status = "solved" if (m_ok and t_ok) else "infeasible"
    return U, mu, status


class _Candidate:
    """One multi-start result, ranked by status, applied-segment safety, objective."""

    def __init__(self, prob: _Problem, U, seed, mu, status):
        self.U, self.seed, self.mu, self.status = U, seed, mu, status
        bd, traj = prob.evaluate(U)
        tol = prob.settings.violation_tol
        breach = prob.nominal_violation(traj, prob.cfg.n_sub)
        self.unsafe_horizon = prob.nominal_violation(traj, traj.shape[0] - 1) > tol
        # a breach on the applied segment is ranked by its size; among plans that
        # miss the tightened set anyway, the penalty only measures how far off an
        # unattainable target they are, so the rest is ranked by cost
        self.key = (status != "solved", breach > tol, breach if breach > tol else 0.0,
                    bool(self.unsafe_horizon),
                    bd.total(mu) if status == "solved" else bd.cost)


def warm_start_shift(prev: Plan, cfg: FhocpConfig, ed: ErrorDynamics, e0, u_max: float,
                     t_k: Optional[float] = None) -> Plan:
    """Shift ``prev`` by one segment and append the terminal feedback.

    The appended input is the feedback evaluated where the shifted inputs
    leave the nominal state from ``e0``. The returned plan is re-rolled from
    ``e0``; its cost fields are filled but no constraints are evaluated.
    """
    e0 = check_vector(e0, cfg.n, "e0")
    head = np.asarray(prev.inputs[1:], dtype=float)
    if head.shape[0]:
        end = rollout(ed, e0, head, cfg.n_sub, cfg.dt)[-1]
    else:
        end = e0
    tail = terminal_controller(cfg, end, u_max)
    U = np.vstack([head, tail[None, :]])
    traj = rollout(ed, e0, U, cfg.n_sub, cfg.dt)
    cost = discretized_cost(cfg, traj, U)
    U.setflags(write=False)
    traj.setflags(write=False)
    return replace(prev, t_k=prev.t_k + cfg.h if t_k is None else float(t_k), inputs=U,
                   errors=traj, cost=cost, penalized=cost, mu=0.0, max_violation=float("nan"),
                   terminal_violation=float("nan"), margins_ok=False, terminal_ok=False,
                   status="candidate", snapshot=None)


def discretized_cost(cfg: FhocpConfig, errors: np.ndarray, U: np.ndarray) -> float:
    """Trapezoidal running cost on shooting nodes plus the terminal cost."""
    nodes = errors[:: cfg.n_sub]
    q = np.einsum("ki,ij,kj->k", nodes, cfg.Q, nodes)
    r = np.einsum("ki,ij,kj->k", U, cfg.R, U)
    run = 0.5 * cfg.h * np.sum(q[:-1] + q[1:] + 2.0 * r)
    return float(run + nodes[-1] @ cfg.P @ nodes[-1])


def penalized_objective(cfg, ed, cs, ts, e0, u_max, inputs, settings=None) -> PenaltyBreakdown:
    prob = _Problem(cfg, ed, cs, ts, e0, u_max, settings or SolverSettings())
    U = check_input_sequence(inputs, cfg.n_seg, cfg.m)
    return prob.evaluate(U)[0]


def objective_gradient(cfg, ed, cs, ts, e0, u_max, inputs, mu: float,
                       settings: Optional[SolverSettings] = None) -> np.ndarray:
    """Central finite-difference gradient of the penalized objective."""
    prob = _Problem(cfg, ed, cs, ts, e0, u_max, settings or SolverSettings())
    U = check_input_sequence(inputs, cfg.n_seg, cfg.m)
    return prob.fd_gradient(U, float(mu))


def adjoint_gradient(cfg, ed, cs, ts, e0, u_max, inputs, mu: float,
                     settings: Optional[SolverSettings] = None) -> np.ndarray:
    """Exact gradient of the penalized objective, as used by the inner solver."""
    prob = _Problem(cfg, ed, cs, ts, e0, u_max, settings or SolverSettings())
    U = check_input_sequence(inputs, cfg.n_seg, cfg.m)
    return prob.value_grad(U, float(mu))[1]
