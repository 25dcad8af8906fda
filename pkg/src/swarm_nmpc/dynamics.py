"""Agent models, disturbances, error coordinates and RK4 integration."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numba
import numpy as np

from ._nbtypes import ROLLOUT_SIG
from .geom import Ball

__all__ = [
    "IntegrationDiverged",
    "DynamicsModel",
    "ErrorDynamics",
    "DisturbanceModel",
    "unicycle",
    "single_integrator",
    "linear_model",
    "eval_error_field",
    "rk4_step",
    "integrate",
    "rollout",
    "estimate_lipschitz",
    "sample_disturbance",
    "fd_jacobian",
]


class IntegrationDiverged(ArithmeticError):
    """A non-finite state appeared during integration."""


@dataclass(frozen=True)
class DynamicsModel:
    """Nominal vector field ``dx/dt = f(x, u)``.

    ``field`` must be a numba ``njit`` function of ``(x, u)`` returning a new
    array; it is called both from Python and from compiled rollouts.
    ``lipschitz`` is the configured state Lipschitz constant over admissible
    inputs and is authoritative for constraint tightening. The first
    ``pos_dims`` state coordinates are the agent's position.
    """

    name: str
    n: int
    m: int
    field: Callable
    lipschitz: float
    u_max: float
    pos_dims: int
    # njit ``(x, u) -> (df/dx, df/du)``; a finite-difference one is built if omitted
    jacobian: Optional[Callable] = None

    def __post_init__(self):
        if self.jacobian is None:
            object.__setattr__(self, "jacobian", fd_jacobian(self.field, self.n, self.m))
        if not self.lipschitz > 0:
            raise ValueError("Lipschitz constant must be positive")
        if not self.u_max > 0:
            raise ValueError("input bound must be positive")
        if not 0 < self.pos_dims <= self.n:
            raise ValueError("pos_dims must be in [1, n]")
        f0 = np.asarray(self.field(np.zeros(self.n), np.zeros(self.m)))
        if f0.shape != (self.n,):
            raise ValueError(f"field returns shape {f0.shape}, expected ({self.n},)")
        if np.any(f0 != 0):
            raise ValueError("field must satisfy f(0, 0) = 0")

    def __call__(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape != (self.n,) or u.shape != (self.m,):
            raise ValueError(
                f"expected x of shape ({self.n},) and u of shape ({self.m},), "
                f"got {x.shape} and {u.shape}"
            )
        return self.field(x, u)


@numba.njit(cache=True)
def _unicycle_field(x, u):
    out = np.empty(3)
    out[0] = u[0] * math.cos(x[2])
    out[1] = u[0] * math.sin(x[2])
    out[2] = u[1]
    return out


@numba.njit(cache=True)
def _unicycle_jacobian(x, u):
    A = np.zeros((3, 3))
    B = np.zeros((3, 2))
    c, s = math.cos(x[2]), math.sin(x[2])
    A[0, 2] = -u[0] * s
    A[1, 2] = u[0] * c
    B[0, 0] = c
    B[1, 0] = s
    B[2, 1] = 1.0
    return A, B


def unicycle(lipschitz: float = 15.0, u_max: float = 15.0) -> DynamicsModel:
    """Planar unicycle with state ``(x, y, theta)`` and input ``(v, omega)``."""
    return DynamicsModel("unicycle", 3, 2, _unicycle_field, lipschitz, u_max, 2,
                         _unicycle_jacobian)


@numba.njit(cache=True)
def _integrator_field(x, u):
    return u.copy()


@numba.njit(cache=True)
def _integrator_jacobian(x, u):
    return np.zeros((x.shape[0], x.shape[0])), np.eye(x.shape[0])


def single_integrator(dim: int = 1, lipschitz: float = 1.0, u_max: float = 1.0) -> DynamicsModel:
    """``dx/dt = u``. The true Lipschitz constant is zero, so ``lipschitz`` is
    whatever positive upper bound the caller wants the tightening to use."""
    return DynamicsModel("single_integrator", dim, dim, _integrator_field, lipschitz, u_max, dim,
                         _integrator_jacobian)


def linear_model(A, B, u_max: float = 1.0, lipschitz: Optional[float] = None,
                 pos_dims: Optional[int] = None) -> DynamicsModel:
    A = np.ascontiguousarray(A, dtype=float)
    B = np.ascontiguousarray(B, dtype=float)
    n, m = B.shape
    if A.shape != (n, n):
        raise ValueError("A must be n x n with n = B.shape[0]")
    if lipschitz is None:
        lipschitz = max(float(np.linalg.norm(A, 2)), 1e-12)

    @numba.njit
    def _linear_field(x, u):
        return A @ x + B @ u

    @numba.njit
    def _linear_jacobian(x, u):
        return A.copy(), B.copy()

    return DynamicsModel("linear", n, m, _linear_field, lipschitz, u_max, pos_dims or n,
                         _linear_jacobian)


def fd_jacobian(field: Callable, n: int, m: int, step: float = 1e-7) -> Callable:
    """Compiled central-difference Jacobians of an njit vector field."""

    @numba.njit
    def _jac(x, u):
        A = np.empty((n, n))
        B = np.empty((n, m))
        xp = x.copy()
        for i in range(n):
            xp[i] = x[i] + step
            fp = field(xp, u)
            xp[i] = x[i] - step
            fm = field(xp, u)
            xp[i] = x[i]
            A[:, i] = (fp - fm) / (2.0 * step)
        up = u.copy()
        for i in range(m):
            up[i] = u[i] + step
            fp = field(x, up)
            up[i] = u[i] - step
            fm = field(x, up)
            up[i] = u[i]
            B[:, i] = (fp - fm) / (2.0 * step)
        return A, B

    return _jac


@dataclass(frozen=True)
class ErrorDynamics:
    """``g(e, u) = f(e + x_des, u)``; shares the model's Lipschitz constant."""

    model: DynamicsModel
    x_des: np.ndarray

    def __post_init__(self):
        x_des = np.asarray(self.x_des, dtype=float).copy()
        if x_des.shape != (self.model.n,):
            raise ValueError("goal dimension does not match the model")
        x_des.setflags(write=False)
        object.__setattr__(self, "x_des", x_des)

    @property
    def lipschitz(self) -> float:
        return self.model.lipschitz

    def __call__(self, e, u) -> np.ndarray:
        return eval_error_field(self, e, u)


def eval_error_field(ed: ErrorDynamics, e, u) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    if e.shape != (ed.model.n,):
        raise ValueError(f"error vector has shape {e.shape}, expected ({ed.model.n},)")
    return ed.model(e + ed.x_des, u)


def rk4_step(field: Callable, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    k1 = field(x, u)
    k2 = field(x + 0.5 * dt * k1, u)
    k3 = field(x + 0.5 * dt * k2, u)
    k4 = field(x + dt * k3, u)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate(field: Callable, x0, inputs, t0: float, t1: float, dt: float,
              seg_len: Optional[float] = None,
              disturbance: Optional[Callable[[float], np.ndarray]] = None):
    """Fixed-step RK4 from ``t0`` to ``t1`` under a piecewise-constant input.

    ``inputs`` is either a single input vector or an ``(N, m)`` array whose row
    ``j`` is active on ``[t0 + j*seg_len, t0 + (j+1)*seg_len)``. If
    ``disturbance`` is given, ``disturbance(t)`` is added to the field and held
    constant over each step. Returns ``(times, states)`` sampled every ``dt``.
    """
    if not t1 > t0:
        raise ValueError("t1 must exceed t0")
    if not dt > 0:
        raise ValueError("dt must be positive")
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    if inputs.shape[0] > 1 and seg_len is None:
        raise ValueError("seg_len is required for multi-segment schedules")
    n_steps = int(round((t1 - t0) / dt))
    if not math.isclose(n_steps * dt, t1 - t0, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError("(t1 - t0) must be an integer multiple of dt")

    x = np.asarray(x0, dtype=float).copy()
    out = np.empty((n_steps + 1, x.shape[0]))
    out[0] = x
    times = t0 + dt * np.arange(n_steps + 1)
    # divergence is reported below, so overflow warnings add nothing
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            t = times[k]
            if inputs.shape[0] == 1:
                u = inputs[0]
            else:
                # small offset keeps exact segment boundaries in the later segment
                j = min(int((t - t0 + 1e-9 * dt) // seg_len), inputs.shape[0] - 1)
                u = inputs[j]
            if disturbance is None:
                x = rk4_step(field, x, u, dt)
            else:
                w = np.asarray(disturbance(t), dtype=float)
                x = rk4_step(lambda y, v: field(y, v) + w, x, u, dt)
            if not np.isfinite(x).all():
                raise IntegrationDiverged(f"non-finite state at t={t + dt:.6g}")
            out[k + 1] = x
    return times, out


@numba.njit(ROLLOUT_SIG, cache=True)
def _rollout_kernel(field, e0, x_des, inputs, n_sub, dt):
    n_seg = inputs.shape[0]
    n = e0.shape[0]
    out = np.empty((n_seg * n_sub + 1, n))
    e = e0.copy()
    out[0] = e
    idx = 1
    for j in range(n_seg):
        u = inputs[j]
        for _ in range(n_sub):
            k1 = field(e + x_des, u)
            k2 = field(e + 0.5 * dt * k1 + x_des, u)
            k3 = field(e + 0.5 * dt * k2 + x_des, u)
            k4 = field(e + dt * k3 + x_des, u)
            e = e + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            out[idx] = e
            idx += 1
    return out


def rollout(ed: ErrorDynamics, e0, inputs, n_sub: int, dt: float) -> np.ndarray:
    """Nominal error trajectory under piecewise-constant ``inputs``.

    Each input row is held for ``n_sub`` RK4 steps of size ``dt``. Returns all
    ``N * n_sub + 1`` samples.
    """
    traj = _rollout_kernel(ed.model.field, np.array(e0, dtype=float), np.array(ed.x_des),
                           np.array(inputs, dtype=float, ndmin=2), int(n_sub), float(dt))
    if not np.isfinite(traj).all():
        raise IntegrationDiverged("non-finite state in nominal rollout")
    return traj


def estimate_lipschitz(model: DynamicsModel, region: Ball, input_bound: float,
                       samples: int = 2000, seed: int = 0) -> float:
    """Largest sampled ``|f(x,u) - f(x',u)| / |x - x'|`` over ``region``.

    This is a lower bound on the true constant and only a diagnostic.
    """
    if samples < 2:
        raise ValueError("need at least two samples")
    if region.dim != model.n:
        raise ValueError("region must live in the model's state space")
    rng = np.random.default_rng(seed)

    def ball_points(k, dim, radius):
        d = rng.standard_normal((k, dim))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d * radius * rng.random((k, 1)) ** (1.0 / dim)

    xs = region.center + ball_points(samples, model.n, region.radius)
    xps = region.center + ball_points(samples, model.n, region.radius)
    us = ball_points(samples, model.m, input_bound)
    best = 0.0
    for x, xp, u in zip(xs, xps, us):
        gap = np.linalg.norm(x - xp)
        if gap == 0:
            continue
        best = max(best, float(np.linalg.norm(model.field(x, u) - model.field(xp, u)) / gap))
    return best


@dataclass(frozen=True)
class DisturbanceModel:
    """Bounded additive disturbance ``w(t)``.

    Modes: ``"sinusoidal"`` (``w_max * sin(2t)`` along the all-ones direction),
    ``"uniform"`` (uniform in the ball, keyed by seed and time), ``"constant"``
    (``w_max`` along ``direction``) and ``"zero"``. ``per_coordinate`` applies
    the sinusoid to every coordinate unscaled, so the norm can reach
    ``sqrt(n) * w_max``; it is off by default to keep the norm bound.
    """

    w_max: float
    mode: str = "sinusoidal"
    seed: int = 0
    stream: int = 0
    direction: Optional[tuple] = None
    per_coordinate: bool = False

    _MODES = ("sinusoidal", "uniform", "constant", "zero")

    def __post_init__(self):
        if self.w_max < 0:
            raise ValueError("disturbance bound must be non-negative")
        if self.mode not in self._MODES:
            raise ValueError(f"unknown disturbance mode {self.mode!r}")
        if self.mode == "constant" and self.direction is None:
            raise ValueError("constant mode needs a direction")


def sample_disturbance(dm: DisturbanceModel, t: float, dim: int) -> np.ndarray:
    if dm.w_max == 0 or dm.mode == "zero":
        return np.zeros(dim)
    if dm.mode == "sinusoidal":
        amp = dm.w_max * math.sin(2.0 * t)
        if dm.per_coordinate:
            return np.full(dim, amp)
        return np.full(dim, amp / math.sqrt(dim))
    if dm.mode == "constant":
        d = np.asarray(dm.direction, dtype=float)
        if d.shape != (dim,):
            raise ValueError("disturbance direction has the wrong dimension")
        return dm.w_max * d / np.linalg.norm(d)
    # uniform: keyed on time so draws do not depend on call order
    key = int(round(t * 1e6))
    rng = np.random.default_rng((dm.seed, dm.stream, key))
    d = rng.standard_normal(dim)
    d /= np.linalg.norm(d)
    return dm.w_max * rng.random() ** (1.0 / dim) * d
