"""State constraints of the navigation problem and their tightened versions."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .dynamics import DynamicsModel, ErrorDynamics
from .geom import Ball

__all__ = [
    "AgentSpec",
    "Scenario",
    "Violation",
    "TighteningSchedule",
    "ConstraintSet",
    "StalePlanError",
    "check_collision_free_configuration",
    "check_feasible_goal",
    "check_agent_specs",
    "margin_vector",
    "margin_matrix",
    "align_prediction",
    "untightened_margins",
]

logger = logging.getLogger(__name__)


class StalePlanError(LookupError):
    """A constraint needs a predicted position that no plan provides."""


@dataclass(frozen=True)
class AgentSpec:
    id: int
    radius: float
    sensing_range: float
    neighbors: tuple
    start: np.ndarray
    goal: np.ndarray
    u_max: float
    w_max: float
    model: DynamicsModel

    def __post_init__(self):
        for name in ("start", "goal"):
            v = np.asarray(getattr(self, name), dtype=float).copy()
            if v.shape != (self.model.n,):
                raise ValueError(f"agent {self.id}: {name} must have {self.model.n} entries")
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        object.__setattr__(self, "neighbors", tuple(int(j) for j in self.neighbors))
        if self.radius <= 0 or self.sensing_range <= 0:
            raise ValueError(f"agent {self.id}: radius and sensing range must be positive")
        if self.u_max <= 0 or self.w_max < 0:
            raise ValueError(f"agent {self.id}: need u_max > 0 and w_max >= 0")
        if self.id in self.neighbors:
            raise ValueError(f"agent {self.id} lists itself as a neighbor")

    @property
    def pos_dims(self) -> int:
        return self.model.pos_dims

    def position(self, state) -> np.ndarray:
        return np.asarray(state, dtype=float)[..., : self.pos_dims]

    @property
    def error_dynamics(self) -> ErrorDynamics:
        return ErrorDynamics(self.model, self.goal)


@dataclass(frozen=True)
class Scenario:
    workspace: Ball
    obstacles: tuple
    agents: tuple
    eps: float

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        object.__setattr__(self, "agents", tuple(self.agents))
        if not self.eps > 0:
            raise ValueError("clearance eps must be positive")
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError("agent ids must be unique")
        for a in self.agents:
            if a.pos_dims != self.workspace.dim:
                raise ValueError(f"agent {a.id}: position dimension differs from workspace")
            if not a.radius < self.workspace.radius:
                raise ValueError(f"agent {a.id}: radius must be below the workspace radius")
            unknown = set(a.neighbors) - set(ids)
            if unknown:
                raise ValueError(f"agent {a.id}: unknown neighbors {sorted(unknown)}")
        for ob in self.obstacles:
            if ob.dim != self.workspace.dim:
                raise ValueError("obstacle dimension differs from workspace")

    def agent(self, agent_id: int) -> AgentSpec:
        for a in self.agents:
            if a.id == agent_id:
                return a
        raise KeyError(agent_id)

    @property
    def ids(self) -> list:
        return [a.id for a in self.agents]


@dataclass(frozen=True)
class Violation:
    kind: str  # "pairwise", "obstacle", "boundary", "connectivity", "sensing", "neighbors"
    agents: tuple
    value: float
    threshold: float

    def __str__(self):
        who = ",".join(str(a) for a in self.agents)
        return f"{self.kind}[{who}]: {self.value:.6g} vs {self.threshold:.6g}"


def _positions(sc: Scenario, positions: Mapping) -> dict:
    out = {}
    for a in sc.agents:
        if a.id not in positions:
            raise ValueError(f"no position for agent {a.id}")
        p = np.asarray(positions[a.id], dtype=float)
        out[a.id] = p[: a.pos_dims]
    return out


def check_collision_free_configuration(sc: Scenario, positions: Mapping):
    """Strict collision-free test. ``positions`` maps agent id to a position
    (or full state; extra coordinates are ignored). Returns ``(ok, violations)``."""
    pos = _positions(sc, positions)
    bad = []
    agents = sc.agents
    for ii, a in enumerate(agents):
        for b in agents[ii + 1:]:
            d = float(np.linalg.norm(pos[a.id] - pos[b.id]))
            if not d > a.radius + b.radius:
                bad.append(Violation("pairwise", (a.id, b.id), d, a.radius + b.radius))
        for k, ob in enumerate(sc.obstacles):
            d = float(np.linalg.norm(pos[a.id] - ob.center))
            if not d > a.radius + ob.radius:
                bad.append(Violation("obstacle", (a.id, k), d, a.radius + ob.radius))
        d = float(np.linalg.norm(sc.workspace.center - pos[a.id]))
        if not d < sc.workspace.radius - a.radius:
            bad.append(Violation("boundary", (a.id,), d, sc.workspace.radius - a.radius))
    return not bad, bad


def check_feasible_goal(sc: Scenario):
    ok, bad = check_collision_free_configuration(sc, {a.id: a.goal for a in sc.agents})
    bad = list(bad)
    for a in sc.agents:
        for j in a.neighbors:
            d = float(np.linalg.norm(a.position(a.goal) - sc.agent(j).position(sc.agent(j).goal)))
            if not d < a.sensing_range:
                bad.append(Violation("connectivity", (a.id, j), d, a.sensing_range))
    return not bad, bad


def check_agent_specs(sc: Scenario):
    """Sensing-range and neighbor-set assumptions. Returns ``(ok, violations)``."""
    bad = []
    for a in sc.agents:
        need = 0.0
        for b in sc.agents:
            if b.id != a.id:
                need = max(need, a.radius + b.radius)
        for ob in sc.obstacles:
            need = max(need, a.radius + ob.radius)
        if not a.sensing_range > need:
            bad.append(Violation("sensing", (a.id,), a.sensing_range, need))
        if not a.neighbors:
            bad.append(Violation("neighbors", (a.id,), 0.0, 1.0))
    return not bad, bad


@dataclass(frozen=True)
class TighteningSchedule:
    """``delta(s) = (w_max / L) * (exp(L s) - 1)``, the radius of the error ball
    that nominal predictions must stay clear of at horizon offset ``s``."""

    w_max: float
    lipschitz: float

    def __post_init__(self):
        if self.w_max < 0 or not self.lipschitz > 0:
            raise ValueError("need w_max >= 0 and lipschitz > 0")

    def delta(self, s):
        s = np.asarray(s, dtype=float)
        if np.any(s < 0):
            raise ValueError("horizon offset must be non-negative")
        out = (self.w_max / self.lipschitz) * np.expm1(self.lipschitz * s)
        return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class ConstraintSet:
    """Immutable snapshot of everything one agent's solve is constrained by.

    Predicted positions of other agents are sampled on the owner's horizon grid
    (offset ``k * dt`` from the solve time, ``k = 0..n_samples-1``).
    ``in_range`` holds agents sensed at the solve time (collision terms),
    ``neighbors`` holds the fixed neighbor set (connectivity terms).
    """

    owner: int
    radius: float
    sensing_range: float
    x_des: np.ndarray
    pos_dims: int
    dt: float
    in_range: Mapping  # id -> (radius, positions (T, p))
    neighbors: Mapping  # id -> positions (T, p)
    obstacles: tuple
    workspace: Ball
    eps: float

    def labels(self) -> list:
        out = [f"agent:{j}" for j in sorted(self.in_range)]
        out += [f"neighbor:{j}" for j in sorted(self.neighbors)]
        out += [f"obstacle:{k}" for k in range(len(self.obstacles))]
        out.append("boundary")
        return out

    @property
    def n_samples(self) -> Optional[int]:
        lens = [p.shape[0] for _, p in self.in_range.values()]
        lens += [p.shape[0] for p in self.neighbors.values()]
        return min(lens) if lens else None

    def arrays(self) -> dict:
        """Dense arrays for compiled penalty evaluation."""
        p = self.pos_dims
        ids = sorted(self.in_range)
        T = self.n_samples or 1
        sep_pos = np.zeros((len(ids), T, p))
        sep_thr = np.zeros(len(ids))
        for k, j in enumerate(ids):
            r_j, pos = self.in_range[j]
            sep_pos[k] = pos[:T]
            sep_thr[k] = self.radius + r_j + self.eps
        nb_ids = sorted(self.neighbors)
        nb_pos = np.zeros((len(nb_ids), T, p))
        for k, j in enumerate(nb_ids):
            nb_pos[k] = self.neighbors[j][:T]
        nb_thr = np.full(len(nb_ids), self.sensing_range - self.eps)
        obs_c = np.array([o.center for o in self.obstacles]).reshape(len(self.obstacles), p)
        obs_thr = np.array([self.radius + o.radius + self.eps for o in self.obstacles])
        return dict(
            sep_pos=sep_pos, sep_thr=sep_thr, nb_pos=nb_pos, nb_thr=nb_thr,
            obs_c=obs_c, obs_thr=obs_thr,
            ws_c=np.asarray(self.workspace.center, dtype=float),
            ws_thr=self.workspace.radius - self.radius - self.eps,
        )


def align_prediction(positions: np.ndarray, plan_time: float, t_k: float, dt: float,
                     n_samples: int, agent_id=None) -> np.ndarray:
    """Re-sample a plan's predicted positions on a horizon starting at ``t_k``.

    ``positions[k]`` is the prediction at ``plan_time + k*dt``. Offsets past
    the end of the plan hold its last position.
    """
    if t_k < plan_time - 1e-9:
        raise StalePlanError(f"plan of agent {agent_id} is from the future")
    shift = int(round((t_k - plan_time) / dt))
    idx = np.arange(n_samples) + shift
    last = positions.shape[0] - 1
    if idx[-1] > last:
        logger.debug("agent %s: holding last predicted position for %d samples",
                     agent_id, int(idx[-1] - last))
    return positions[np.minimum(idx, last)]


def margin_vector(cs: ConstraintSet, own_position, s: float, ts: TighteningSchedule) -> np.ndarray:
    """Signed margins (positive = satisfied) at horizon offset ``s``, ordered as
    ``cs.labels()``, against thresholds tightened by ``ts.delta(s)``."""
    own = np.asarray(own_position, dtype=float)[: cs.pos_dims]
    d = ts.delta(s)
    k = int(round(s / cs.dt))
    out = []
    for j in sorted(cs.in_range):
        r_j, pos = cs.in_range[j]
        if k >= pos.shape[0]:
            raise StalePlanError(f"no prediction for agent {j} at offset {s}")
        out.append(np.linalg.norm(own - pos[k]) - (cs.radius + r_j + cs.eps + d))
    for j in sorted(cs.neighbors):
        pos = cs.neighbors[j]
        if k >= pos.shape[0]:
            raise StalePlanError(f"no prediction for neighbor {j} at offset {s}")
        out.append(cs.sensing_range - cs.eps - d - np.linalg.norm(own - pos[k]))
    for ob in cs.obstacles:
        out.append(np.linalg.norm(own - ob.center) - (cs.radius + ob.radius + cs.eps + d))
    out.append(cs.workspace.radius - cs.radius - cs.eps - d
               - np.linalg.norm(cs.workspace.center - own))
    return np.array(out, dtype=float)


def margin_matrix(cs: ConstraintSet, positions: np.ndarray, ts: TighteningSchedule) -> np.ndarray:
    """``margin_vector`` on every sample of a trajectory; shape ``(T, n_constraints)``."""
    return np.array([margin_vector(cs, p, k * cs.dt, ts) for k, p in enumerate(positions)])


def untightened_margins(sc: Scenario, positions: Mapping) -> dict:
    """Per-agent minimum margins of the eps-buffered constraints, over all
    other agents (collision) and the agent's neighbors (connectivity)."""
    pos = _positions(sc, positions)
    out = {}
    for a in sc.agents:
        p = pos[a.id]
        inter = min((np.linalg.norm(p - pos[b.id]) - a.radius - b.radius - sc.eps
                     for b in sc.agents if b.id != a.id), default=np.inf)
        nb = min((a.sensing_range - sc.eps - np.linalg.norm(p - pos[j])
                  for j in a.neighbors), default=np.inf)
        obs = min((np.linalg.norm(p - o.center) - a.radius - o.radius - sc.eps
                   for o in sc.obstacles), default=np.inf)
        bnd = sc.workspace.radius - a.radius - sc.eps - np.linalg.norm(sc.workspace.center - p)
        out[a.id] = dict(interagent=float(inter), neighbor=float(nb),
                         obstacle=float(obs), boundary=float(bnd))
    return out
