"""One experiment end to end: pre-run checks, closed loop, audits and result files."""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, fields, replace
from typing import Optional

import numpy as np

from . import __version__
from .constraints import (
    TighteningSchedule,
    check_agent_specs,
    check_collision_free_configuration,
    check_feasible_goal,
)
from .ocp import check_disturbance_bound, cost_constants, verify_terminal_region
from .scenario import ScenarioFile, config_hash
from .sim import (
    MARGIN_KINDS,
    InfeasibleConfiguration,
    Metrics,
    SimTrace,
    StrictModeViolation,
    compute_metrics,
    feasibility_transitions,
    gronwall_audit,
    iss_decrease_check,
    run_closed_loop,
)

__all__ = [
    "EXIT_OK",
    "EXIT_PARSE",
    "EXIT_INFEASIBLE",
    "EXIT_STRICT",
    "ExperimentResult",
    "theorem_reports",
    "run_experiment",
    "write_trace_csv",
    "write_summary",
    "write_plotdata",
    "write_outputs",
    "fmt",
]

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_PARSE, EXIT_INFEASIBLE, EXIT_STRICT = 0, 2, 3, 4


def fmt(x) -> str:
    """Fixed 12-significant-digit decimal text used in every CSV."""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.12g}"


def _violations(bad) -> list:
    return [{"kind": v.kind, "agents": list(v.agents), "value": v.value,
             "threshold": v.threshold} for v in bad]


def _start_connectivity(sc) -> list:
    out = []
    for a in sc.agents:
        for j in a.neighbors:
            b = sc.agent(j)
            d = float(np.linalg.norm(a.position(a.start) - b.position(b.start)))
            if not d < a.sensing_range:
                out.append({"kind": "connectivity", "agents": [a.id, j], "value": d,
                            "threshold": a.sensing_range})
    return out


def theorem_reports(sf: ScenarioFile, terminal_samples: int = 256) -> dict:
    """Pre-run checks that need no simulation."""
    sc, cfg = sf.scenario, sf.controller
    ok5, bad5 = check_collision_free_configuration(sc, {a.id: a.start for a in sc.agents})
    ok6, bad6 = check_feasible_goal(sc)
    ok2, bad2 = check_agent_specs(sc)
    conn = _start_connectivity(sc)
    cond3 = {}
    terminal = {}
    for a in sc.agents:
        L_g = a.model.lipschitz
        cc = cost_constants(cfg, L_g, sf.error_bound, L_V=sf.L_V)
        rep = check_disturbance_bound(cfg, L_g, a.w_max, cc)
        cond3[str(a.id)] = {"rhs": rep.rhs, "w_max": rep.w_max, "satisfied": rep.satisfied,
                            "L_g": L_g, "L_V": cc.L_V, "L_F": cc.L_F, "rho": cc.rho,
                            "xi": cc.xi}
        tr = verify_terminal_region(cfg, a.error_dynamics, a.u_max, terminal_samples)
        terminal[str(a.id)] = {"samples": tr.samples, "input_margin": tr.input_margin,
                               "decrease_worst": tr.decrease_worst,
                               "reach_worst": tr.reach_worst,
                               "invariance_worst": tr.invariance_worst, "ok": tr.ok}
    return {
        "collision_free_start": {"ok": ok5, "violations": _violations(bad5)},
        "feasible_goal": {"ok": ok6, "violations": _violations(bad6)},
        "agent_specs": {"ok": ok2, "violations": _violations(bad2)},
        "initial_configuration": {"ok": ok5 and not conn,
                                  "violations": _violations(bad5) + conn},
        "disturbance_bound": cond3,
        "terminal_region": terminal,
    }


@dataclass
class ExperimentResult:
    sf: ScenarioFile
    exit_code: int
    status: str
    reports: dict
    trace: Optional[SimTrace] = None
    metrics: Optional[Metrics] = None
    message: str = ""

    @property
    def partial(self) -> bool:
        return self.status != "complete"


def _post_run(sf: ScenarioFile, trace: SimTrace) -> tuple:
    sc, cfg = sf.scenario, sf.controller
    constants = {a.id: cost_constants(cfg, a.model.lipschitz, sf.error_bound, L_V=sf.L_V)
                 for a in sc.agents}
    w = {a.id: a.w_max for a in sc.agents}
    iss = iss_decrease_check(trace, constants, w)
    sched = {a.id: TighteningSchedule(a.w_max, a.model.lipschitz) for a in sc.agents}
    gw = gronwall_audit(trace, sched)
    trans = feasibility_transitions(trace)
    metrics = compute_metrics(trace, sc, cfg, iss_report=iss)
    audits = {
        "iss_decrease": {k: iss[k] for k in ("checked", "violations", "worst_slack")},
        "gronwall": {k: gw[k] for k in ("samples", "max_ratio", "violations")},
        "feasibility_transitions": [{"round": k, "agent": i} for k, i in trans],
    }
    return metrics, audits


def run_experiment(sf: ScenarioFile, seed: Optional[int] = None,
                   mode: Optional[str] = None, terminal_samples: int = 256) -> ExperimentResult:
    """Run one scenario; never raises for the failure modes that have exit codes."""
    if seed is not None or mode is not None:
        sim = replace(sf.sim, seed=sf.sim.seed if seed is None else int(seed),
                      mode=sf.sim.mode if mode is None else mode)
        sf = replace(sf, sim=sim)
    reports = theorem_reports(sf, terminal_samples)
    try:
        trace = run_closed_loop(sf.scenario, sf.controller, sf.rounds, order=sf.order,
                                seed=sf.sim.seed, disturbance=sf.sim.disturbance_mode,
                                per_coordinate=sf.sim.per_coordinate,
                                strict=sf.sim.mode == "strict", settings=sf.solver)
        code, status, msg = EXIT_OK, "diverged" if trace.diverged else "complete", ""
    except InfeasibleConfiguration as exc:
        return ExperimentResult(sf, EXIT_INFEASIBLE, "infeasible-start", reports,
                                message=str(exc))
    except StrictModeViolation as exc:
        trace = exc.trace
        code, status, msg = EXIT_STRICT, "halted", str(exc)
    metrics, audits = _post_run(sf, trace)
    reports.update(audits)
    return ExperimentResult(sf, code, status, reports, trace, metrics, msg)


# ---------------------------------------------------------------- writers

def _clean(obj):
    """JSON-ready copy: string keys, plain floats, non-finite values as null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def trace_header(trace: SimTrace) -> list:
    n = trace.states.shape[2]
    m = trace.inputs.shape[2]
    return (["t", "agent_id"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)]
            + ["error_norm", "J_star"] + [f"min_margin_{k}" for k in MARGIN_KINDS[:3]]
            + ["margin_boundary", "feasible"])


def write_trace_csv(trace: SimTrace, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(trace_header(trace))
        for s, t in enumerate(trace.times):
            for q, i in enumerate(trace.ids):
                w.writerow([fmt(t), fmt(i)] + [fmt(v) for v in trace.states[q, s]]
                           + [fmt(v) for v in trace.inputs[q, s]]
                           + [fmt(trace.errors[q, s]), fmt(trace.j_star[q, s])]
                           + [fmt(v) for v in trace.margins[q, s]]
                           + [fmt(bool(trace.feasible[q, s]))])


def summary_dict(res: ExperimentResult) -> dict:
    cfg = res.sf.controller
    if res.metrics is not None:
        metrics = res.metrics.as_dict()
    else:
        metrics = {f.name: None for f in fields(Metrics)}
    return _clean({
        "version": __version__,
        "config_hash": config_hash(res.sf),
        "seed": res.sf.sim.seed,
        "mode": res.sf.sim.mode,
        "status": res.status,
        "partial": res.partial,
        "exit_code": res.exit_code,
        "message": res.message,
        "controller": {"h": cfg.h, "T_p": cfg.T_p, "n_seg": cfg.n_seg, "n_sub": cfg.n_sub},
        "metrics": metrics,
        "reports": {**{k: None for k in ("iss_decrease", "gronwall",
                                         "feasibility_transitions")}, **res.reports},
    })


def write_summary(res: ExperimentResult, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary_dict(res), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _write_series(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([fmt(v) for v in r])


def write_plotdata(trace: SimTrace, sf: ScenarioFile, out_dir: str) -> None:
    """Time series for trajectory, error, pairwise, neighbor and obstacle plots."""
    os.makedirs(out_dir, exist_ok=True)
    sc = sf.scenario
    ids = trace.ids
    pos = {a.id: trace.states[trace.index(a.id), :, : a.pos_dims] for a in sc.agents}
    p = sc.workspace.dim
    _write_series(os.path.join(out_dir, "trajectories.csv"),
                  ["t"] + [f"agent{i}_p{k}" for i in ids for k in range(p)],
                  [[t] + [v for i in ids for v in pos[i][s]] for s, t in enumerate(trace.times)])
    _write_series(os.path.join(out_dir, "error_norms.csv"),
                  ["t"] + [f"agent{i}" for i in ids],
                  [[t] + list(trace.errors[:, s]) for s, t in enumerate(trace.times)])
    pairs = [(a.id, b.id) for k, a in enumerate(sc.agents) for b in sc.agents[k + 1:]]
    _write_series(os.path.join(out_dir, "interagent_distances.csv"),
                  ["t"] + [f"d_{i}_{j}" for i, j in pairs],
                  [[t] + [np.linalg.norm(pos[i][s] - pos[j][s]) for i, j in pairs]
                   for s, t in enumerate(trace.times)])
    links = sorted({tuple(sorted((a.id, j))) for a in sc.agents for j in a.neighbors})
    _write_series(os.path.join(out_dir, "neighbor_distances.csv"),
                  ["t"] + [f"d_{i}_{j}" for i, j in links],
                  [[t] + [np.linalg.norm(pos[i][s] - pos[j][s]) for i, j in links]
                   for s, t in enumerate(trace.times)])
    _write_series(os.path.join(out_dir, "obstacle_distances.csv"),
                  ["t"] + [f"agent{i}_obs{k}" for i in ids for k in range(len(sc.obstacles))],
                  [[t] + [np.linalg.norm(pos[i][s] - o.center) for i in ids for o in sc.obstacles]
                   for s, t in enumerate(trace.times)])
    _write_series(os.path.join(out_dir, "inputs.csv"),
                  ["t"] + [f"agent{i}_u{k}" for i in ids for k in range(trace.inputs.shape[2])],
                  [[t] + list(trace.inputs[:, s].ravel()) for s, t in enumerate(trace.times)])
    _write_series(os.path.join(out_dir, "optimal_costs.csv"),
                  ["t"] + [f"agent{i}" for i in ids],
                  [[t] + list(trace.j_star[:, s]) for s, t in enumerate(trace.times)])


def write_outputs(res: ExperimentResult, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    if res.trace is not None:
        write_trace_csv(res.trace, os.path.join(out_dir, "trace.csv"))
        write_plotdata(res.trace, res.sf, os.path.join(out_dir, "plotdata"))
    write_summary(res, os.path.join(out_dir, "summary.json"))
