from dataclasses import replace

import numpy as np
import pytest
import yaml
from hypothesis import given, settings
from hypothesis import strategies as st

from swarm_nmpc.scenario import (
    ScenarioError,
    bundled_scenario_path,
    config_hash,
    dump_scenario,
    parse_scenario,
    to_document,
)
from swarm_nmpc.solver import SolverSettings


@pytest.fixture(scope="module")
def text():
    with open(bundled_scenario_path(), encoding="utf-8") as fh:
        return fh.read()


def test_bundled_values(bundled):
    sc, cfg = bundled.scenario, bundled.controller
    assert sc.ids == [1, 2, 3]
    assert [a.neighbors for a in sc.agents] == [(2, 3), (1,), (1,)]
    assert [a.start[1] for a in sc.agents] == [3.5, 2.3, 4.7]
    assert all(a.goal[0] == 6.0 and a.start[0] == -6.0 for a in sc.agents)
    assert [tuple(o.center) for o in sc.obstacles] == [(0.0, 2.0), (0.0, 5.5)]
    assert sc.eps == 0.01
    assert (cfg.h, cfg.T_p, cfg.eps_psi, cfg.eps_omega) == (0.1, 0.6, 0.0654, 0.0035)
    assert np.allclose(cfg.R, 0.005 * np.eye(2))
    assert bundled.rounds == 100 and bundled.L_V == 0.0471
    assert bundled.solver == SolverSettings()


def test_bundled_weights_reproduce_frozen_draw(bundled):
    D = np.random.default_rng(0).random((3, 3))
    sym = lambda M: 0.5 * (M + M.T)  # noqa: E731
    assert np.allclose(bundled.controller.Q, sym(0.7 * (np.eye(3) + 0.5 * D)), atol=1e-15)
    assert np.allclose(bundled.controller.P, sym(0.5 * (np.eye(3) + 0.5 * D)), atol=1e-15)


def test_round_trip_is_exact(bundled, text):
    body = "".join(l for l in text.splitlines(True) if not l.startswith("#"))
    assert dump_scenario(bundled) == body
    again = parse_scenario(dump_scenario(bundled))
    assert dump_scenario(again) == body
    assert config_hash(again) == config_hash(bundled)


@given(w=st.floats(0, 1), seed=st.integers(0, 2 ** 31), h=st.sampled_from([0.05, 0.1, 0.2]))
@settings(max_examples=25)
def test_round_trip_property(bundled, w, seed, h):
    agents = tuple(replace(a, w_max=w) for a in bundled.scenario.agents)
    sf = replace(bundled, scenario=replace(bundled.scenario, agents=agents),
                 controller=replace(bundled.controller, h=h, T_p=6 * h),
                 sim=replace(bundled.sim, seed=seed))
    back = parse_scenario(dump_scenario(sf))
    assert dump_scenario(back) == dump_scenario(sf)
    assert back.scenario.agents[0].w_max == w


def test_unknown_key_reports_line(text):
    bad = text.replace("  radius: 0.5\n", "  radius: 0.5\n  colour: red\n", 1)
    with pytest.raises(ScenarioError) as info:
        parse_scenario(bad)
    assert "colour" in str(info.value)
    assert info.value.line == bad.splitlines().index("  colour: red") + 1


def test_duplicate_key_reports_line():
    with pytest.raises(ScenarioError) as info:
        parse_scenario("workspace: 1\nworkspace: 2\n")
    assert info.value.line == 2


def test_malformed_yaml_reports_line():
    with pytest.raises(ScenarioError) as info:
        parse_scenario("workspace:\n  center: [0, 0\n  radius: 1\n")
    assert info.value.line is not None


@pytest.mark.parametrize("mutate, needle", [
    (lambda d: d["controller"].update(h=0.25), "multiple"),
    (lambda d: d["controller"].pop("Q"), "Q"),
    (lambda d: d["agents"][0].update(neighbors=[9]), "neighbors"),
    (lambda d: d["solver"].update(violation_tol=0.5), "violation_tol"),
    (lambda d: d["sim"].update(order=[1, 2]), "permutation"),
    (lambda d: d["agents"][0]["model"].update(type="bicycle"), "bicycle"),
    (lambda d: d["controller"].update(P=[[1, 0], [0, 1]]), "P"),
])
def test_invalid_documents(bundled, mutate, needle):
    doc = to_document(bundled)
    mutate(doc)
    with pytest.raises(ScenarioError) as info:
        parse_scenario(yaml.safe_dump(doc, sort_keys=False))
    assert needle in str(info.value)


def test_integrator_model_and_string_shorthand(bundled):
    doc = to_document(bundled)
    doc["agents"] = [dict(doc["agents"][0], model="unicycle")] + doc["agents"][1:]
    sf = parse_scenario(yaml.safe_dump(doc, sort_keys=False))
    assert sf.scenario.agents[0].model.lipschitz == 15.0
    doc = {
        "workspace": {"center": [0.0], "radius": 10.0},
        "agents": [{"id": 1, "model": {"type": "integrator", "dim": 1}, "radius": 0.1,
                    "sensing_range": 1.0, "neighbors": [2], "start": [-1.0], "goal": [-0.5],
                    "u_max": 1.0, "w_max": 0.0},
                   {"id": 2, "model": {"type": "integrator", "dim": 1}, "radius": 0.1,
                    "sensing_range": 1.0, "neighbors": [1], "start": [0.0], "goal": [0.2],
                    "u_max": 1.0, "w_max": 0.0}],
        "controller": {"Q": [[1]], "R": [[0.1]], "P": [[1]], "h": 0.5, "T_p": 1.0,
                       "eps": 0.01, "eps_psi": 0.02, "eps_omega": 0.01, "K": [[-1]]},
    }
    sf = parse_scenario(yaml.safe_dump(doc))
    assert sf.scenario.agents[1].model.n == 1 and sf.rounds == 20
