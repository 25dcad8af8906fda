from dataclasses import replace

import numpy as np
import pytest

from conftest import two_unicycles
from swarm_nmpc.constraints import StalePlanError
from swarm_nmpc.coord import (
    PlanRegistry,
    RoundOrder,
    build_constraint_set,
    sensing_query,
    step_round,
)
from swarm_nmpc.ocp import FhocpConfig


def _cfg():
    return FhocpConfig(Q=np.eye(3), R=0.01 * np.eye(2), P=np.eye(3), h=0.1, T_p=0.3,
                       eps_psi=1.0, eps_omega=0.05, K=np.zeros((2, 3)), n_sub=5)


def test_round_order_validation_and_rotation():
    with pytest.raises(ValueError):
        RoundOrder((1, 1))
    with pytest.raises(ValueError):
        RoundOrder((1, 2), policy="random")
    ro = RoundOrder((1, 2, 3), policy="rotating")
    assert ro.at(0) == (1, 2, 3) and ro.at(1) == (2, 3, 1) and ro.at(3) == (1, 2, 3)
    assert RoundOrder((3, 1, 2)).at(5) == (3, 1, 2)
    with pytest.raises(ValueError):
        RoundOrder((1, 3)).check(two_unicycles())


def test_sensing_query_is_strict_and_time_checked():
    sc = two_unicycles(gap=3.0)
    reg = PlanRegistry({1: np.array([0.0, 0.0, 0.0]), 2: np.array([5.0, 0.0, 0.0])})
    assert sensing_query(reg, 1, sc, 0.0) == set()
    reg.measure(2, [4.999, 0.0, 0.0])
    assert sensing_query(reg, 1, sc, 0.0) == {2}
    with pytest.raises(ValueError):
        sensing_query(reg, 1, sc, 0.1)


def test_registry_rejects_future_plans():
    sc = two_unicycles()
    reg = PlanRegistry({a.id: a.start.copy() for a in sc.agents})
    plans = step_round(reg, RoundOrder((1, 2)), sc, _cfg(), 0.0)
    reg.t = 0.0
    with pytest.raises(StalePlanError):
        reg.publish(replace(plans[1], t_k=0.5))


def test_sequential_round_uses_fresh_plans():
    sc = two_unicycles()
    cfg = _cfg()
    reg = PlanRegistry({a.id: a.start.copy() for a in sc.agents})
    plans = step_round(reg, RoundOrder((1, 2)), sc, cfg, 0.0)
    assert reg.tag(1) == 0.0 and reg.tag(2) == 0.0
    # agent 2 solved after agent 1 and saw its published prediction
    seen = plans[2].snapshot.in_range[1][1]
    assert np.allclose(seen, plans[1].states[:, :2])
    # agent 1 saw agent 2 holding its measured position
    held = plans[1].snapshot.in_range[2][1]
    assert np.allclose(held, sc.agent(2).start[:2])


def test_constraint_snapshot_is_read_only():
    sc = two_unicycles()
    reg = PlanRegistry({a.id: a.start.copy() for a in sc.agents})
    cs = build_constraint_set(reg, sc, 1, _cfg(), 0.0)
    with pytest.raises(ValueError):
        cs.neighbors[2][0, 0] = 1.0


def test_second_round_realigns_prior_plans():
    sc = two_unicycles()
    cfg = _cfg()
    reg = PlanRegistry({a.id: a.start.copy() for a in sc.agents})
    first = step_round(reg, RoundOrder((1, 2)), sc, cfg, 0.0)
    for i, p in first.items():
        reg.measure(i, p.states[cfg.n_sub])
    second = step_round(reg, RoundOrder((1, 2)), sc, cfg, 0.1, k=1)
    seen = second[1].snapshot.neighbors[2]
    expect = first[2].states[cfg.n_sub:, :2]
    assert np.allclose(seen[: expect.shape[0]], expect)
    assert np.allclose(seen[expect.shape[0]:], expect[-1])
