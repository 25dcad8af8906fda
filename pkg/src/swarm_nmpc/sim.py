"""Closed-loop simulation, trace metrics and post-hoc theorem audits."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional

import numpy as np

from .constraints import (
    Scenario,
    TighteningSchedule,
    Violation,
    check_collision_free_configuration,
    check_feasible_goal,
    untightened_margins,
)
from .coord import PlanRegistry, RoundOrder, step_round
from .dynamics import (
    DisturbanceModel,
    DynamicsModel,
    IntegrationDiverged,
    integrate,
    sample_disturbance,
)
from .ocp import CostConstants, FhocpConfig, ultimate_bounds
from .solver import Plan, SolverSettings

__all__ = [
    "InfeasibleConfiguration",
    "StrictModeViolation",
    "SimTrace",
    "Metrics",
    "run_closed_loop",
    "compute_metrics",
    "iss_decrease_check",
    "gronwall_audit",
    "gronwall_trial",
    "feasibility_transitions",
]

logger = logging.getLogger(__name__)

MARGIN_KINDS = ("interagent", "neighbor", "obstacle", "boundary")


class InfeasibleConfiguration(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class StrictModeViolation(RuntimeError):
    """Realized constraint violation in strict mode; ``trace`` holds the run so far."""

    def __init__(self, t, agent, kind, value):
        self.t, self.agent, self.kind, self.value = t, agent, kind, value
        self.trace = None
        super().__init__(f"t={t:.4f} agent {agent}: {kind} margin {value:.6g} < 0")


@dataclass
class SimTrace:
    """Closed-loop record sampled on the integrator grid.

    Per-agent arrays are indexed ``[agent_index, sample]``; ``ids`` gives the
    agent order. ``plans[k]`` holds the plans solved at round ``k``. Input,
    cost and feasibility columns at a sample refer to the round whose first
    segment covers it; the final sample repeats the last round.
    """

    ids: tuple
    times: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    errors: np.ndarray
    j_star: np.ndarray
    margins: np.ndarray          # (agents, samples, 4) untightened, eps-buffered
    feasible: np.ndarray
    disturbances: np.ndarray
    plans: List[Dict[int, Plan]]
    n_sub: int
    h: float
    diverged: bool = False
    halted: Optional[str] = None

    @property
    def rounds(self) -> int:
        return len(self.plans)

    def index(self, agent_id: int) -> int:
        return self.ids.index(agent_id)


@dataclass(frozen=True)
class Metrics:
    min_interagent_distance: float
    max_neighbor_distance: float
    min_obstacle_distance: float
    max_boundary_excursion: float
    min_boundary_margin: float
    final_error_norms: dict
    final_position_errors: dict
    ultimate_bound_lambda_min: dict
    ultimate_bound_lambda_max: dict
    iss_violations: int
    feasible_round_fraction: float
    feasible_to_infeasible_transitions: int
    rounds: int
    diverged: bool

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _cfg_for(cfgs, i) -> FhocpConfig:
    return cfgs[i] if isinstance(cfgs, Mapping) else cfgs


def _initial_checks(sc: Scenario):
    starts = {a.id: a.start for a in sc.agents}
    _, bad = check_collision_free_configuration(sc, starts)
    bad = list(bad)
    for a in sc.agents:
        for j in a.neighbors:
            d = float(np.linalg.norm(a.position(a.start) - sc.agent(j).position(sc.agent(j).start)))
            if not d < a.sensing_range:
                bad.append(Violation("connectivity", (a.id, j), d, a.sensing_range))
    _, bad_goal = check_feasible_goal(sc)
    bad += [replace_kind(v, "goal-" + v.kind) for v in bad_goal]
    if bad:
        raise InfeasibleConfiguration(bad)


def replace_kind(v: Violation, kind: str) -> Violation:
    return Violation(kind, v.agents, v.value, v.threshold)


def disturbance_models(sc: Scenario, mode: str = "sinusoidal", seed: int = 0,
                       per_coordinate: bool = False, direction=None) -> dict:
    """One disturbance model per agent, each on its own random stream."""
    return {a.id: DisturbanceModel(a.w_max, mode=mode, seed=seed, stream=k,
                                   per_coordinate=per_coordinate, direction=direction)
            for k, a in enumerate(sc.agents)}


def run_closed_loop(sc: Scenario, cfgs, rounds: int, order: Optional[RoundOrder] = None,
                    seed: int = 0, disturbance: str = "sinusoidal",
                    per_coordinate: bool = False, strict: bool = False,
                    settings: Optional[SolverSettings] = None) -> SimTrace:
    """Receding-horizon loop: solve all agents, apply first segments, repeat.

    Raises ``InfeasibleConfiguration`` before simulating if the start or goal
    configuration is invalid. In strict mode a realized constraint violation
    raises ``StrictModeViolation``; otherwise it is only recorded.
    """
    if rounds < 1:
        raise ValueError("need at least one round")
    _initial_checks(sc)
    order = order or RoundOrder.ascending(sc)
    order.check(sc)
    cfg0 = _cfg_for(cfgs, sc.agents[0].id)
    h, n_sub, dt = cfg0.h, cfg0.n_sub, cfg0.dt
    for a in sc.agents:
        c = _cfg_for(cfgs, a.id)
        if abs(c.h - h) > 1e-12 or c.n_sub != n_sub:
            raise ValueError("all agents must share h and n_sub")
    dms = disturbance_models(sc, disturbance, seed, per_coordinate)

    ids = tuple(a.id for a in sc.agents)
    N, S = len(ids), rounds * n_sub + 1
    n_max = max(a.model.n for a in sc.agents)
    m_max = max(a.model.m for a in sc.agents)
    states = np.full((N, S, n_max), np.nan)
    inputs = np.full((N, S, m_max), np.nan)
    dist = np.full((N, S, n_max), np.nan)
    errors = np.full((N, S), np.nan)
    j_star = np.full((N, S), np.nan)
    margins = np.full((N, S, 4), np.nan)
    feasible = np.zeros((N, S), dtype=bool)
    times = dt * np.arange(S)

    registry = PlanRegistry({a.id: a.start.copy() for a in sc.agents})
    for q, a in enumerate(sc.agents):
        states[q, 0, : a.model.n] = a.start
    plans_log = []
    diverged = False
    halted = None
    violation = None
    last = 0

    def record_margins(s):
        pm = untightened_margins(sc, {a.id: states[q, s, : a.model.n] for q, a in enumerate(sc.agents)})
        for q, a in enumerate(sc.agents):
            margins[q, s] = [pm[a.id][k] for k in MARGIN_KINDS]

    record_margins(0)
    for k in range(rounds):
        t_k = k * h
        plans = step_round(registry, order, sc, cfgs, t_k, k=k, settings=settings)
        plans_log.append(plans)
        lo, hi = k * n_sub, (k + 1) * n_sub
        try:
            for q, a in enumerate(sc.agents):
                plan = plans[a.id]
                u = np.asarray(plan.inputs[0])
                dm = dms[a.id]
                n = a.model.n
                _, xs = integrate(a.model.field, registry.states[a.id], u, t_k, t_k + h, dt,
                                  disturbance=lambda t, dm=dm, n=n: sample_disturbance(dm, t, n))
                states[q, lo: hi + 1, :n] = xs
                inputs[q, lo:hi, : a.model.m] = u
                j_star[q, lo:hi] = plan.cost
                feasible[q, lo:hi] = plan.feasible
                dist[q, lo:hi, :n] = [sample_disturbance(dm, t, n) for t in times[lo:hi]]
        except IntegrationDiverged as exc:
            logger.warning("round %d: %s", k, exc)
            diverged = True
            break
        for q, a in enumerate(sc.agents):
            registry.measure(a.id, states[q, hi, : a.model.n])
        for s in range(lo + 1, hi + 1):
            record_margins(s)
        last = hi
        worst = np.nanmin(margins[:, lo + 1: hi + 1, :], axis=1)
        if strict and (worst < 0).any():
            q, c = np.unravel_index(np.argmin(worst), worst.shape)
            halted = f"{MARGIN_KINDS[c]} violation by agent {ids[q]}"
            violation = StrictModeViolation(float(times[hi]), ids[q], MARGIN_KINDS[c],
                                            float(worst[q, c]))
            break

    # the final sample carries the last round's columns
    for q, a in enumerate(sc.agents):
        if last > 0:
            inputs[q, last] = inputs[q, last - 1]
            j_star[q, last] = j_star[q, last - 1]
            feasible[q, last] = feasible[q, last - 1]
            dist[q, last] = dist[q, last - 1]
        errors[q, : last + 1] = np.linalg.norm(states[q, : last + 1, : a.model.n] - a.goal, axis=1)
    keep = slice(0, last + 1)
    trace = SimTrace(ids=ids, times=times[keep], states=states[:, keep], inputs=inputs[:, keep],
                     errors=errors[:, keep], j_star=j_star[:, keep], margins=margins[:, keep],
                     feasible=feasible[:, keep], disturbances=dist[:, keep], plans=plans_log,
                     n_sub=n_sub, h=h, diverged=diverged, halted=halted)
    if violation is not None:
        violation.trace = trace
        raise violation
    return trace


def _pair_distances(sc: Scenario, trace: SimTrace):
    pos = {a.id: trace.states[trace.index(a.id), :, : a.pos_dims] for a in sc.agents}
    inter = np.inf
    neigh = -np.inf
    for ii, a in enumerate(sc.agents):
        for b in sc.agents[ii + 1:]:
            inter = min(inter, float(np.linalg.norm(pos[a.id] - pos[b.id], axis=1).min()))
        for j in a.neighbors:
            neigh = max(neigh, float(np.linalg.norm(pos[a.id] - pos[j], axis=1).max()))
    obs = np.inf
    bnd = -np.inf
    for a in sc.agents:
        for o in sc.obstacles:
            obs = min(obs, float(np.linalg.norm(pos[a.id] - o.center, axis=1).min()))
        r = np.linalg.norm(pos[a.id] - sc.workspace.center, axis=1) + a.radius - sc.workspace.radius
        bnd = max(bnd, float(r.max()))
    return inter, neigh, obs, bnd


def feasibility_transitions(trace: SimTrace) -> list:
    """``(round, agent)`` pairs where a feasible plan is followed by an infeasible one."""
    out = []
    for k in range(1, trace.rounds):
        for i in trace.ids:
            if trace.plans[k - 1][i].feasible and not trace.plans[k][i].feasible:
                out.append((k, i))
    return out


def compute_metrics(trace: SimTrace, sc: Scenario, cfgs,
                    iss_report: Optional[dict] = None) -> Metrics:
    inter, neigh, obs, bnd = _pair_distances(sc, trace)
    final_err = {}
    final_pos = {}
    ub_min, ub_max = {}, {}
    for a in sc.agents:
        q = trace.index(a.id)
        x = trace.states[q, -1, : a.model.n]
        final_err[a.id] = float(np.linalg.norm(x - a.goal))
        final_pos[a.id] = float(np.linalg.norm(a.position(x) - a.position(a.goal)))
        ub = ultimate_bounds(_cfg_for(cfgs, a.id))
        ub_min[a.id] = ub["ultimate_bound_lambda_min"]
        ub_max[a.id] = ub["ultimate_bound_lambda_max"]
    flags = [p.feasible for plans in trace.plans for p in plans.values()]
    return Metrics(
        min_interagent_distance=inter,
        max_neighbor_distance=neigh,
        min_obstacle_distance=obs,
        max_boundary_excursion=bnd,
        min_boundary_margin=float(np.nanmin(trace.margins[:, :, 3])),
        final_error_norms=final_err,
        final_position_errors=final_pos,
        ultimate_bound_lambda_min=ub_min,
        ultimate_bound_lambda_max=ub_max,
        iss_violations=int(iss_report["violations"]) if iss_report else 0,
        feasible_round_fraction=float(np.mean(flags)) if flags else 0.0,
        feasible_to_infeasible_transitions=len(feasibility_transitions(trace)),
        rounds=trace.rounds,
        diverged=trace.diverged,
    )


def iss_decrease_check(trace: SimTrace, constants: Mapping, w_max: Mapping,
                       tol: float = 1e-6, feasible_only: bool = True) -> dict:
    """Per-round check of ``J*(k+1) - J*(k) <= xi*w - rho * int |e|^2``.

    ``constants`` and ``w_max`` map agent id to ``CostConstants`` and the
    disturbance bound. The integral is the trapezoid over the first segment's
    end nodes of round ``k``'s nominal prediction, matching the objective's
    quadrature. Returns counts, the worst slack (lhs - rhs) and the failing
    ``(round, agent)`` pairs.
    """
    checked = 0
    bad = []
    worst = -np.inf
    for k in range(trace.rounds - 1):
        for i in trace.ids:
            p0, p1 = trace.plans[k][i], trace.plans[k + 1][i]
            if feasible_only and not (p0.feasible and p1.feasible):
                continue
            c: CostConstants = constants[i]
            e_a, e_b = p0.nodes[0], p0.nodes[1]
            integral = 0.5 * p0.h * (e_a @ e_a + e_b @ e_b)
            slack = (p1.cost - p0.cost) - (c.xi * w_max[i] - c.rho * integral)
            checked += 1
            worst = max(worst, slack)
            if slack > tol:
                bad.append((k, i, float(slack)))
    return {"checked": checked, "violations": len(bad), "worst_slack": float(worst),
            "failures": bad}


def gronwall_audit(trace: SimTrace, schedules: Mapping) -> dict:
    """Realized versus nominal error over each applied first segment.

    ``schedules`` maps agent id to its ``TighteningSchedule``. The ratio
    ``|e_real - e_nom| / delta(s)`` is collected for ``s`` in ``(0, h]``.
    """
    worst = 0.0
    count = 0
    fails = []
    n_sub = trace.n_sub
    for k, plans in enumerate(trace.plans):
        lo = k * n_sub
        if lo + n_sub >= trace.times.shape[0]:
            break
        for i, plan in plans.items():
            q = trace.index(i)
            n = plan.errors.shape[1]
            real = trace.states[q, lo: lo + n_sub + 1, :n] - plan.x_des
            nom = plan.errors[: n_sub + 1]
            gap = np.linalg.norm(real - nom, axis=1)[1:]
            s = plan.dt * np.arange(1, n_sub + 1)
            d = np.asarray(schedules[i].delta(s))
            for g, dd, ss in zip(gap, d, s):
                count += 1
                if dd > 0:
                    worst = max(worst, g / dd)
                elif g > 0:
                    worst = np.inf
                if g > dd * (1 + 1e-9) + 1e-12:
                    fails.append((k, i, float(ss), float(g), float(dd)))
    return {"samples": count, "max_ratio": float(worst), "violations": len(fails),
            "failures": fails}


def gronwall_trial(model: DynamicsModel, x0, inputs, seg_len: float, dt: float,
                   dm: DisturbanceModel):
    """Open-loop nominal and disturbed runs of the same input schedule.

    Returns ``(s, deviation, delta)`` on the integrator grid, with ``delta``
    built from the model's configured Lipschitz constant.
    """
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    T = inputs.shape[0] * seg_len
    ts, nom = integrate(model.field, x0, inputs, 0.0, T, dt, seg_len=seg_len)
    _, real = integrate(model.field, x0, inputs, 0.0, T, dt, seg_len=seg_len,
                        disturbance=lambda t: sample_disturbance(dm, t, model.n))
    dev = np.linalg.norm(real - nom, axis=1)
    delta = TighteningSchedule(dm.w_max, model.lipschitz).delta(ts)
    return ts, dev, np.asarray(delta)
