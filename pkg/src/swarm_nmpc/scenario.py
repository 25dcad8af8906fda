"""Scenario files: YAML parsing with line diagnostics and canonical serialization."""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from typing import Optional

import numpy as np
import yaml

from .constraints import AgentSpec, Scenario
from .coord import RoundOrder
from .dynamics import DynamicsModel, single_integrator, unicycle
from .geom import Ball
from .ocp import FhocpConfig
from .solver import SolverSettings

__all__ = [
    "ScenarioError",
    "SimSettings",
    "ScenarioFile",
    "load_scenario",
    "parse_scenario",
    "dump_scenario",
    "config_hash",
    "bundled_scenario_path",
]


class ScenarioError(ValueError):
    """Malformed scenario document; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(where + message)


class _LineDict(dict):
    """Mapping that remembers the source line of each key."""

    lines: dict
    line: Optional[int] = None


class _Loader(yaml.SafeLoader):
    pass


def _construct_mapping(loader, node, deep=False):
    loader.flatten_mapping(node)
    out = _LineDict()
    out.lines = {}
    out.line = node.start_mark.line + 1
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=True)
        if key in out:
            raise ScenarioError(f"duplicate key {key!r}", key_node.start_mark.line + 1)
        out[key] = loader.construct_object(value_node, deep=True)
        out.lines[key] = key_node.start_mark.line + 1
    return out


_Loader.add_constructor(yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _construct_mapping)


def _line(d, key=None):
    if isinstance(d, _LineDict):
        return d.lines.get(key, d.line) if key is not None else d.line
    return None


@dataclass(frozen=True)
class SimSettings:
    duration: float = 10.0
    seed: int = 0
    disturbance_mode: str = "sinusoidal"
    mode: str = "strict"
    order: Optional[tuple] = None
    order_policy: str = "fixed"
    per_coordinate: bool = False

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("duration must be positive")
        if self.disturbance_mode not in ("sinusoidal", "uniform", "zero"):
            raise ValueError(f"unknown disturbance mode {self.disturbance_mode!r}")
        if self.mode not in ("strict", "diagnostic"):
            raise ValueError("mode must be 'strict' or 'diagnostic'")
        if self.order_policy not in ("fixed", "rotating"):
            raise ValueError("order_policy must be 'fixed' or 'rotating'")
        if self.order is not None:
            object.__setattr__(self, "order", tuple(int(i) for i in self.order))

    def rounds(self, h: float) -> int:
        r = self.duration / h
        if abs(r - round(r)) > 1e-9:
            raise ValueError("duration must be an integer multiple of h")
        return int(round(r))


@dataclass(frozen=True)
class ScenarioFile:
    """Everything one run needs, as parsed from a scenario document.

    ``L_V`` optionally overrides the derived terminal-cost Lipschitz constant
    in the theorem reports; ``e_sup`` bounds the error norm over the
    admissible set and defaults to the workspace diameter.
    """

    scenario: Scenario
    controller: FhocpConfig
    solver: SolverSettings = field(default_factory=SolverSettings)
    sim: SimSettings = field(default_factory=SimSettings)
    L_V: Optional[float] = None
    e_sup: Optional[float] = None

    @property
    def rounds(self) -> int:
        return self.sim.rounds(self.controller.h)

    @property
    def order(self) -> RoundOrder:
        ids = self.sim.order or tuple(sorted(self.scenario.ids))
        return RoundOrder(ids, self.sim.order_policy)

    @property
    def error_bound(self) -> float:
        return self.e_sup if self.e_sup is not None else 2.0 * self.scenario.workspace.radius


# ---------------------------------------------------------------- parsing

_TOP = {"workspace", "obstacles", "agents", "controller", "solver", "sim"}
_BALL = {"center", "radius"}
_AGENT = {"id", "model", "radius", "sensing_range", "neighbors", "start", "goal", "u_max", "w_max"}
_MODEL = {"type", "lipschitz", "dim"}
_CTRL_REQ = {"Q", "R", "P", "h", "T_p", "eps", "eps_psi", "eps_omega", "K"}
_CTRL = _CTRL_REQ | {"n_sub", "L_V", "e_sup"}
_SOLVER = {f.name for f in fields(SolverSettings)}
_SIM = {f.name for f in fields(SimSettings)}


def _mapping(d, where, parent=None, key=None):
    if not isinstance(d, dict):
        raise ScenarioError(f"{where} must be a mapping", _line(parent, key))
    return d


def _keys(d, allowed, where, required=()):
    for k in d:
        if k not in allowed:
            raise ScenarioError(f"unknown key {k!r} in {where}", _line(d, k))
    for k in required:
        if k not in d:
            raise ScenarioError(f"missing key {k!r} in {where}", _line(d))


def _num(d, key, where, integer=False):
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ScenarioError(f"{where}.{key} must be a number", _line(d, key))
    if integer:
        if float(v) != int(v):
            raise ScenarioError(f"{where}.{key} must be an integer", _line(d, key))
        return int(v)
    if not math.isfinite(v):
        raise ScenarioError(f"{where}.{key} must be finite", _line(d, key))
    return float(v)


def _vec(d, key, where):
    v = d[key]
    if not isinstance(v, list) or not v or not all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        raise ScenarioError(f"{where}.{key} must be a non-empty list of numbers", _line(d, key))
    return np.array(v, dtype=float)


def _mat(d, key, where):
    v = d[key]
    if not isinstance(v, list) or not v or not all(isinstance(r, list) for r in v):
        raise ScenarioError(f"{where}.{key} must be a nested list (row-major matrix)",
                            _line(d, key))
    if len({len(r) for r in v}) != 1:
        raise ScenarioError(f"{where}.{key} rows differ in length", _line(d, key))
    try:
        return np.array(v, dtype=float)
    except (TypeError, ValueError):
        raise ScenarioError(f"{where}.{key} must contain numbers", _line(d, key)) from None


def _guard(fn, line, *args, **kw):
    try:
        return fn(*args, **kw)
    except ScenarioError:
        raise
    except (ValueError, TypeError, KeyError) as exc:
        raise ScenarioError(str(exc), line) from None


def _ball(d, where, parent, key):
    d = _mapping(d, where, parent, key)
    _keys(d, _BALL, where, _BALL)
    return _guard(Ball, _line(d), _vec(d, "center", where), _num(d, "radius", where))


def _model(d, where, parent, u_max) -> DynamicsModel:
    if isinstance(d, str):
        d = {"type": d}
    d = _mapping(d, where, parent, "model")
    _keys(d, _MODEL, where, ("type",))
    kind = d["type"]
    kw = {"u_max": u_max}
    if "lipschitz" in d:
        kw["lipschitz"] = _num(d, "lipschitz", where)
    if kind == "unicycle":
        if "dim" in d:
            raise ScenarioError("unicycle models take no 'dim'", _line(d, "dim"))
        return _guard(unicycle, _line(d), **kw)
    if kind == "integrator":
        dim = _num(d, "dim", where, integer=True) if "dim" in d else 1
        return _guard(single_integrator, _line(d), dim, **kw)
    raise ScenarioError(f"unknown model type {kind!r}", _line(d, "type"))


def _agent(d, k, parent):
    where = f"agents[{k}]"
    d = _mapping(d, where, parent)
    _keys(d, _AGENT, where, _AGENT)
    u_max = _num(d, "u_max", where)
    model = _model(d["model"], where + ".model", d, u_max)
    nb = d["neighbors"]
    if not isinstance(nb, list) or not all(isinstance(j, int) and not isinstance(j, bool)
                                           for j in nb):
        raise ScenarioError(f"{where}.neighbors must be a list of agent ids",
                            _line(d, "neighbors"))
    return _guard(AgentSpec, _line(d), _num(d, "id", where, integer=True),
                  _num(d, "radius", where), _num(d, "sensing_range", where), tuple(nb),
                  _vec(d, "start", where), _vec(d, "goal", where), u_max,
                  _num(d, "w_max", where), model)


def parse_scenario(text: str) -> ScenarioFile:
    """Parse a scenario document. Raises ``ScenarioError`` with a line number."""
    try:
        doc = yaml.load(text, Loader=_Loader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise ScenarioError(exc.problem or str(exc), mark.line + 1 if mark else None) from None
    except yaml.YAMLError as exc:
        raise ScenarioError(str(exc)) from None
    doc = _mapping(doc, "document")
    _keys(doc, _TOP, "document", ("workspace", "agents", "controller"))

    ws = _ball(doc["workspace"], "workspace", doc, "workspace")
    obs_raw = doc.get("obstacles") or []
    if not isinstance(obs_raw, list):
        raise ScenarioError("obstacles must be a list", _line(doc, "obstacles"))
    obstacles = tuple(_ball(o, f"obstacles[{k}]", doc, "obstacles") for k, o in enumerate(obs_raw))
    ag_raw = doc["agents"]
    if not isinstance(ag_raw, list) or not ag_raw:
        raise ScenarioError("agents must be a non-empty list", _line(doc, "agents"))
    agents = tuple(_agent(a, k, doc) for k, a in enumerate(ag_raw))

    c = _mapping(doc["controller"], "controller", doc, "controller")
    _keys(c, _CTRL, "controller", _CTRL_REQ)
    eps = _num(c, "eps", "controller")
    sc = _guard(Scenario, _line(doc, "agents"), ws, obstacles, agents, eps)
    cfg = _guard(FhocpConfig, _line(c), _mat(c, "Q", "controller"), _mat(c, "R", "controller"),
                 _mat(c, "P", "controller"), _num(c, "h", "controller"),
                 _num(c, "T_p", "controller"), _num(c, "eps_psi", "controller"),
                 _num(c, "eps_omega", "controller"), _mat(c, "K", "controller"),
                 _num(c, "n_sub", "controller", integer=True) if "n_sub" in c else 10)
    for a in agents:
        if a.model.n != cfg.n or a.model.m != cfg.m:
            raise ScenarioError(f"agent {a.id}: model dimensions do not match the controller",
                                _line(c))

    s = doc.get("solver") or {}
    s = _mapping(s, "solver", doc, "solver")
    _keys(s, _SOLVER, "solver")
    settings = _guard(SolverSettings, _line(s), **dict(s))
    if settings.violation_tol > eps / 10:
        raise ScenarioError("solver.violation_tol must not exceed eps / 10",
                            _line(s, "violation_tol"))

    m = doc.get("sim") or {}
    m = _mapping(m, "sim", doc, "sim")
    _keys(m, _SIM, "sim")
    sim = _guard(SimSettings, _line(m), **dict(m))
    out = ScenarioFile(sc, cfg, settings, sim,
                       _num(c, "L_V", "controller") if "L_V" in c else None,
                       _num(c, "e_sup", "controller") if "e_sup" in c else None)
    try:
        out.rounds
        out.order.check(sc)
    except ValueError as exc:
        raise ScenarioError(str(exc), _line(m)) from None
    return out


def load_scenario(path) -> ScenarioFile:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scenario(fh.read())


# ---------------------------------------------------------------- serialization

def _f(x):
    return float(x)


def _model_doc(model: DynamicsModel) -> dict:
    if model.name == "unicycle":
        return {"type": "unicycle", "lipschitz": _f(model.lipschitz)}
    if model.name == "single_integrator":
        return {"type": "integrator", "dim": int(model.n), "lipschitz": _f(model.lipschitz)}
    raise ValueError(f"model {model.name!r} has no file representation")


def to_document(sf: ScenarioFile) -> dict:
    sc, cfg = sf.scenario, sf.controller
    ctrl = {
        "Q": cfg.Q.tolist(), "R": cfg.R.tolist(), "P": cfg.P.tolist(),
        "h": _f(cfg.h), "T_p": _f(cfg.T_p), "n_sub": int(cfg.n_sub), "eps": _f(sc.eps),
        "eps_psi": _f(cfg.eps_psi), "eps_omega": _f(cfg.eps_omega), "K": cfg.K.tolist(),
    }
    if sf.L_V is not None:
        ctrl["L_V"] = _f(sf.L_V)
    if sf.e_sup is not None:
        ctrl["e_sup"] = _f(sf.e_sup)
    sim = asdict(sf.sim)
    sim["order"] = None if sf.sim.order is None else list(sf.sim.order)
    return {
        "workspace": {"center": sc.workspace.center.tolist(), "radius": _f(sc.workspace.radius)},
        "obstacles": [{"center": o.center.tolist(), "radius": _f(o.radius)} for o in sc.obstacles],
        "agents": [
            {"id": a.id, "model": _model_doc(a.model), "radius": _f(a.radius),
             "sensing_range": _f(a.sensing_range), "neighbors": list(a.neighbors),
             "start": a.start.tolist(), "goal": a.goal.tolist(), "u_max": _f(a.u_max),
             "w_max": _f(a.w_max)}
            for a in sc.agents
        ],
        "controller": ctrl,
        "solver": asdict(sf.solver),
        "sim": sim,
    }


class _Dumper(yaml.SafeDumper):
    pass


def _flow_list(dumper, data):
    # vectors and matrix rows inline, everything else in block style
    flow = all(not isinstance(x, (list, dict)) for x in data)
    return dumper.represent_sequence("tag:yaml.org,2002:seq", data, flow_style=flow)


_Dumper.add_representer(list, _flow_list)


def dump_scenario(sf: ScenarioFile) -> str:
    """Canonical text form: fixed key order, every setting spelled out."""
    return yaml.dump(to_document(sf), Dumper=_Dumper, sort_keys=False,
                     default_flow_style=False, width=100)


def config_hash(sf: ScenarioFile) -> str:
    return hashlib.sha256(dump_scenario(sf).encode("utf-8")).hexdigest()


def bundled_scenario_path() -> str:
    """Path of the bundled three-unicycle regression scenario."""
    return str(resources.files("swarm_nmpc") / "data" / "three_unicycles.yaml")
