"""Command-line entry point: ``swarm-nmpc run|check|sweep``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import Optional, Sequence

import yaml

from .experiment import (
    EXIT_OK,
    EXIT_PARSE,
    ExperimentResult,
    fmt,
    run_experiment,
    summary_dict,
    theorem_reports,
    write_outputs,
)
from .scenario import (
    ScenarioError,
    ScenarioFile,
    dump_scenario,
    load_scenario,
    parse_scenario,
    to_document,
)

__all__ = ["main", "apply_override", "parse_grid"]

logger = logging.getLogger("swarm_nmpc")


def _say(args, *parts):
    if not args.quiet:
        print(*parts)


def _load(args) -> Optional[ScenarioFile]:
    try:
        return load_scenario(args.scenario)
    except ScenarioError as exc:
        print(f"{args.scenario}: {exc}", file=sys.stderr)
    except OSError as exc:
        print(f"{args.scenario}: {exc.strerror}", file=sys.stderr)
    return None


def _mode(args) -> Optional[str]:
    return args.mode


def _report_run(args, res: ExperimentResult):
    _say(args, f"status: {res.status} (exit {res.exit_code})")
    if res.message:
        _say(args, res.message)
    if res.metrics is not None:
        m = res.metrics
        _say(args, f"min inter-agent distance {m.min_interagent_distance:.4f}, "
                   f"max neighbor distance {m.max_neighbor_distance:.4f}, "
                   f"min obstacle distance {m.min_obstacle_distance:.4f}")
        _say(args, "final position errors: " + ", ".join(
            f"{i}: {v:.4f}" for i, v in m.final_position_errors.items()))
        _say(args, f"feasible rounds {m.feasible_round_fraction:.3f}")


def cmd_run(args) -> int:
    sf = _load(args)
    if sf is None:
        return EXIT_PARSE
    res = run_experiment(sf, seed=args.seed, mode=_mode(args))
    write_outputs(res, args.output)
    _report_run(args, res)
    return res.exit_code


def _flag(ok) -> str:
    return "ok" if ok else "FAILED"


def cmd_check(args) -> int:
    sf = _load(args)
    if sf is None:
        return EXIT_PARSE
    rep = theorem_reports(sf)
    for key, title in (("collision_free_start", "collision-free start configuration"),
                       ("feasible_goal", "feasible goal configuration"),
                       ("agent_specs", "sensing range and neighbor sets"),
                       ("initial_configuration", "start collision-free and connected")):
        r = rep[key]
        print(f"{title}: {_flag(r['ok'])}")
        for v in r["violations"]:
            print(f"  {v['kind']} {v['agents']}: {v['value']:.6g} vs {v['threshold']:.6g}")
    for i, r in rep["disturbance_bound"].items():
        print(f"agent {i} disturbance bound: rhs {r['rhs']:.12g}, w_max {r['w_max']:.6g}, "
              f"satisfied {str(r['satisfied']).lower()}")
    for i, r in rep["terminal_region"].items():
        print(f"agent {i} terminal region ({r['samples']} samples): {_flag(r['ok'])}; "
              f"input margin {r['input_margin']:.6g}, decrease {r['decrease_worst']:.6g}, "
              f"reach {r['reach_worst']:.6g}, invariance {r['invariance_worst']:.6g}")
    return EXIT_OK


def parse_grid(text: str) -> list:
    """Comma-separated values, each read as a YAML scalar."""
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if tok:
            out.append(yaml.safe_load(tok))
    return out


def apply_override(sf: ScenarioFile, path: str, value) -> ScenarioFile:
    """Set the scalar at a dotted path and re-validate through the parser.

    ``agents.<key>`` sets the key on every agent; ``agents.<id>.<key>`` on one.
    """
    doc = to_document(sf)
    keys = path.split(".")
    if keys[0] == "agents":
        if len(keys) == 2:
            targets = doc["agents"]
        elif len(keys) == 3:
            targets = [a for a in doc["agents"] if str(a["id"]) == keys[1]]
            if not targets:
                raise ScenarioError(f"no agent with id {keys[1]}")
        else:
            raise ScenarioError(f"bad parameter path {path!r}")
        for a in targets:
            if keys[-1] not in a or isinstance(a[keys[-1]], (list, dict)):
                raise ScenarioError(f"{path!r} is not a scalar agent field")
            a[keys[-1]] = value
    else:
        node = doc
        for k in keys[:-1]:
            if not isinstance(node.get(k), dict):
                raise ScenarioError(f"bad parameter path {path!r}")
            node = node[k]
        if keys[-1] not in node or isinstance(node[keys[-1]], (list, dict)):
            raise ScenarioError(f"{path!r} is not a scalar field")
        node[keys[-1]] = value
    return parse_scenario(yaml.safe_dump(doc, sort_keys=False))


def _sweep_point(job):
    k, text, out_dir, seed, mode = job
    sf = parse_scenario(text)
    res = run_experiment(sf, seed=seed, mode=mode)
    write_outputs(res, out_dir)
    return k, summary_dict(res)


def _threads() -> int:
    raw = os.environ.get("SWARM_NMPC_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            logger.warning("ignoring non-integer SWARM_NMPC_THREADS=%r", raw)
    return max(1, os.cpu_count() or 1)


def cmd_sweep(args) -> int:
    sf = _load(args)
    if sf is None:
        return EXIT_PARSE
    try:
        grid = parse_grid(args.values)
    except yaml.YAMLError as exc:
        print(f"bad value grid: {exc}", file=sys.stderr)
        return EXIT_PARSE
    if not grid:
        print("empty parameter grid", file=sys.stderr)
        return EXIT_PARSE
    points = []
    for v in grid:
        try:
            points.append(apply_override(sf, args.param, v))
        except ScenarioError as exc:
            print(f"{args.param}={v!r}: {exc}", file=sys.stderr)
            return EXIT_PARSE
    mode = args.mode or "diagnostic"
    os.makedirs(args.output, exist_ok=True)
    jobs = [(k, dump_scenario(p), os.path.join(args.output, f"point_{k:03d}"), args.seed, mode)
            for k, p in enumerate(points)]
    workers = min(_threads(), len(jobs))
    if workers == 1:
        results = [_sweep_point(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_sweep_point, jobs))
    results.sort(key=lambda r: r[0])
    ids = sorted(sf.scenario.ids)
    header = (["index", "value", "exit_code", "status", "n_seg", "feasible_round_fraction",
               "min_interagent_distance", "max_neighbor_distance", "min_obstacle_distance",
               "min_boundary_margin"] + [f"final_error_{i}" for i in ids])
    with open(os.path.join(args.output, "aggregate.csv"), "w", newline="",
              encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for (k, s), v in zip(results, grid):
            m = s["metrics"]
            fin = m["final_position_errors"] or {}
            row = [fmt(k), json.dumps(v), fmt(s["exit_code"]), s["status"],
                   fmt(s["controller"]["n_seg"])]
            for key in header[5:10]:
                row.append("" if m[key] is None else fmt(m[key]))
            row += ["" if fin.get(str(i)) is None else fmt(fin[str(i)]) for i in ids]
            w.writerow(row)
    for (k, s), v in zip(results, grid):
        _say(args, f"{args.param}={v}: {s['status']} (exit {s['exit_code']})")
    return max(s["exit_code"] for _, s in results)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swarm-nmpc",
                                description="Decentralized robust NMPC for multi-agent navigation.")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, output=True):
        sp.add_argument("scenario", help="scenario YAML file")
        sp.add_argument("--quiet", action="store_true", help="suppress console output")
        if output:
            sp.add_argument("--output", default="swarm_nmpc_out", help="output directory")
            sp.add_argument("--seed", type=int, default=None,
                            help="disturbance seed (overrides the file)")
            g = sp.add_mutually_exclusive_group()
            g.add_argument("--strict", dest="mode", action="store_const", const="strict",
                           help="halt on the first realized constraint violation")
            g.add_argument("--diagnostic", dest="mode", action="store_const",
                           const="diagnostic", help="record violations and keep running")
            sp.set_defaults(mode=None)

    common(sub.add_parser("run", help="simulate one scenario"))
    common(sub.add_parser("check", help="static checks, no simulation"), output=False)
    sw = sub.add_parser("sweep", help="run a scenario over a parameter grid")
    common(sw)
    sw.add_argument("--param", required=True,
                    help="dotted scalar path, e.g. controller.T_p or agents.w_max")
    sw.add_argument("--values", required=True, help="comma-separated grid values")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("swarm_nmpc.coord").setLevel(logging.WARNING)
    return {"run": cmd_run, "check": cmd_check, "sweep": cmd_sweep}[args.verb](args)


if __name__ == "__main__":
    sys.exit(main())
