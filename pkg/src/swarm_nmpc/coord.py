"""Sequential round-robin solve schedule and the in-process plan registry."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, Mapping, Optional

import numpy as np

from .constraints import (
    ConstraintSet,
    Scenario,
    StalePlanError,
    TighteningSchedule,
    align_prediction,
)
from .ocp import FhocpConfig
from .solver import Plan, SolverSettings, solve_fhocp, warm_start_shift

__all__ = [
    "PlanRegistry",
    "RoundOrder",
    "sensing_query",
    "build_constraint_set",
    "step_round",
    "replay_plan",
]

logger = logging.getLogger(__name__)


@dataclass
class PlanRegistry:
    """Latest published plan and current measured state of every agent.

    ``t`` is the current sampling instant. A plan's tag is its ``t_k``; during
    a round, agents that already solved hold plans tagged ``t`` and the rest
    hold plans tagged ``t - h`` (or none before the first round).
    """

    states: Dict[int, np.ndarray]
    plans: Dict[int, Plan] = field(default_factory=dict)
    t: float = 0.0

    def publish(self, plan: Plan) -> None:
        if plan.t_k > self.t + 1e-9:
            raise StalePlanError(f"agent {plan.owner} published a plan from the future")
        self.plans[plan.owner] = plan

    def tag(self, agent_id: int) -> Optional[float]:
        p = self.plans.get(agent_id)
        return None if p is None else p.t_k

    def measure(self, agent_id: int, state) -> None:
        self.states[agent_id] = np.asarray(state, dtype=float).copy()


@dataclass(frozen=True)
class RoundOrder:
    order: tuple
    policy: str = "fixed"

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(int(i) for i in self.order))
        if len(set(self.order)) != len(self.order):
            raise ValueError("round order must list each agent once")
        if self.policy not in ("fixed", "rotating"):
            raise ValueError("policy must be 'fixed' or 'rotating'")

    @classmethod
    def ascending(cls, sc: Scenario) -> "RoundOrder":
        return cls(tuple(sorted(sc.ids)))

    def at(self, k: int) -> tuple:
        if self.policy == "fixed" or not self.order:
            return self.order
        r = k % len(self.order)
        return self.order[r:] + self.order[:r]

    def check(self, sc: Scenario) -> None:
        if sorted(self.order) != sorted(sc.ids):
            raise ValueError("round order is not a permutation of the scenario's agents")


def sensing_query(registry: PlanRegistry, i: int, sc: Scenario, t: float) -> set:
    """Agents strictly within agent ``i``'s sensing range at time ``t``."""
    if abs(t - registry.t) > 1e-9:
        raise ValueError(f"registry holds states at t={registry.t}, asked for t={t}")
    a = sc.agent(i)
    p = a.position(registry.states[i])
    out = set()
    for b in sc.agents:
        if b.id == i:
            continue
        if np.linalg.norm(p - b.position(registry.states[b.id])) < a.sensing_range:
            out.add(b.id)
    return out


def _predicted_positions(registry: PlanRegistry, sc: Scenario, j: int, t_k: float,
                         dt: float, n_samples: int) -> np.ndarray:
    b = sc.agent(j)
    plan = registry.plans.get(j)
    if plan is None:
        # nobody has planned yet: assume the agent stays where it was measured
        return np.repeat(b.position(registry.states[j])[None, :], n_samples, axis=0)
    if abs(plan.dt - dt) > 1e-12:
        raise ValueError("agents must share the integrator step")
    pos = b.position(plan.states)
    return align_prediction(pos, plan.t_k, t_k, dt, n_samples, j)


def build_constraint_set(registry: PlanRegistry, sc: Scenario, i: int, cfg: FhocpConfig,
                         t_k: float) -> ConstraintSet:
    """Snapshot of agent ``i``'s constraints from the registry at ``t_k``."""
    a = sc.agent(i)
    T = cfg.n_seg * cfg.n_sub + 1
    in_range = {}
    for j in sorted(sensing_query(registry, i, sc, t_k)):
        pos = _predicted_positions(registry, sc, j, t_k, cfg.dt, T)
        pos.setflags(write=False)
        in_range[j] = (sc.agent(j).radius, pos)
    neighbors = {}
    for j in a.neighbors:
        pos = _predicted_positions(registry, sc, j, t_k, cfg.dt, T)
        pos.setflags(write=False)
        neighbors[j] = pos
    return ConstraintSet(owner=i, radius=a.radius, sensing_range=a.sensing_range,
                         x_des=a.goal, pos_dims=a.pos_dims, dt=cfg.dt, in_range=in_range,
                         neighbors=neighbors, obstacles=sc.obstacles, workspace=sc.workspace,
                         eps=sc.eps)


def _cfg_for(cfgs, i) -> FhocpConfig:
    return cfgs[i] if isinstance(cfgs, Mapping) else cfgs


def step_round(registry: PlanRegistry, order: RoundOrder, sc: Scenario, cfgs, t_k: float,
               k: int = 0, settings: Optional[SolverSettings] = None) -> Dict[int, Plan]:
    """Solve every agent once, in order, publishing each plan before the next solve.

    ``cfgs`` is one ``FhocpConfig`` or a mapping from agent id to config.
    Infeasible solves are logged and published like any other plan.
    """
    registry.t = float(t_k)
    out = {}
    for i in order.at(k):
        a = sc.agent(i)
        cfg = _cfg_for(cfgs, i)
        ed = a.error_dynamics
        e0 = registry.states[i] - a.goal
        prev = registry.plans.get(i)
        warm = None
        if prev is not None:
            if prev.t_k > t_k + 1e-9:
                raise StalePlanError(f"agent {i} holds a plan from the future")
            warm = warm_start_shift(prev, cfg, ed, e0, a.u_max, t_k=t_k)
        cs = build_constraint_set(registry, sc, i, cfg, t_k)
        ts = TighteningSchedule(a.w_max, a.model.lipschitz)
        plan = solve_fhocp(cfg, ed, cs, ts, e0, a.u_max, warm=warm, settings=settings, t_k=t_k)
        if not plan.feasible:
            logger.info("t=%.3f agent %d: %s (violation %.3g, terminal %.3g)", t_k, i,
                        plan.status, plan.max_violation, plan.terminal_violation)
        registry.publish(plan)
        out[i] = plan
    return out


def replay_plan(plan: Plan, sc: Scenario, cfgs, settings: Optional[SolverSettings] = None) -> Plan:
    """Re-solve from the snapshot, initial error and seed recorded in ``plan``."""
    if plan.snapshot is None:
        raise ValueError("plan carries no constraint snapshot")
    a = sc.agent(plan.owner)
    cfg = _cfg_for(cfgs, plan.owner)
    ts = TighteningSchedule(a.w_max, a.model.lipschitz)
    warm = None if plan.seed_inputs is None else replace(plan, inputs=plan.seed_inputs)
    return solve_fhocp(cfg, a.error_dynamics, plan.snapshot, ts, plan.errors[0], a.u_max,
                       warm=warm, settings=settings, t_k=plan.t_k)
