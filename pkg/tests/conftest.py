"""Shared fixtures: the bundled scenario, small hand-built problems and cached runs."""
from __future__ import annotations

import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings as hyp_settings

sys.path.insert(0, str(Path(__file__).parent))

from swarm_nmpc.constraints import AgentSpec, ConstraintSet, Scenario, TighteningSchedule  # noqa: E402
from swarm_nmpc.dynamics import ErrorDynamics, single_integrator, unicycle  # noqa: E402
from swarm_nmpc.experiment import run_experiment  # noqa: E402
from swarm_nmpc.geom import Ball  # noqa: E402
from swarm_nmpc.ocp import FhocpConfig  # noqa: E402
from swarm_nmpc.scenario import bundled_scenario_path, load_scenario  # noqa: E402

# compiled kernels and set enumeration make single examples slow on one core
hyp_settings.register_profile("default", deadline=None)
hyp_settings.load_profile("default")


def with_w_max(sf, w):
    """Scenario file with every agent's disturbance bound set to ``w``."""
    agents = tuple(replace(a, w_max=float(w)) for a in sf.scenario.agents)
    return replace(sf, scenario=replace(sf.scenario, agents=agents))


def integrator_setup(h=0.5, n_seg=2, q=1.0, r=0.1, p=1.0, eps_omega=0.01, n_sub=4,
                     u_max=1.0, w_max=0.0):
    """1-D single integrator with an empty, far-away constraint set.

    Returns ``(cfg, ed, cs, ts, u_max)`` ready for ``solve_fhocp``.
    """
    model = single_integrator(dim=1, lipschitz=1.0, u_max=u_max)
    cfg = FhocpConfig(Q=[[q]], R=[[r]], P=[[p]], h=h, T_p=h * n_seg,
                      eps_psi=2 * eps_omega, eps_omega=eps_omega, K=[[-1.0]], n_sub=n_sub)
    ed = ErrorDynamics(model, np.zeros(1))
    cs = ConstraintSet(owner=1, radius=0.1, sensing_range=1.0, x_des=np.zeros(1), pos_dims=1,
                       dt=cfg.dt, in_range={}, neighbors={}, obstacles=(),
                       workspace=Ball([0.0], 100.0), eps=0.01)
    ts = TighteningSchedule(w_max, 1.0)
    return cfg, ed, cs, ts, u_max


def two_unicycles(gap=3.0, w_max=0.0, lipschitz=15.0):
    """Two unicycles facing each other on the x axis, neighbors of each other."""
    m = unicycle(lipschitz=lipschitz, u_max=15.0)
    a = AgentSpec(1, 0.5, 2.0 + gap, (2,), [-gap / 2, 0, 0], [gap / 2, 1.5, 0], 15.0, w_max, m)
    b = AgentSpec(2, 0.5, 2.0 + gap, (1,), [gap / 2, 0, np.pi], [-gap / 2, -1.5, np.pi], 15.0,
                  w_max, m)
    return Scenario(Ball([0.0, 0.0], 15.0), (), (a, b), 0.01)


@pytest.fixture(scope="session")
def bundled():
    return load_scenario(bundled_scenario_path())


@pytest.fixture(scope="session")
def bundled_run(bundled):
    """The bundled scenario run once, strict mode, as shipped, with its wall time."""
    t0 = time.perf_counter()
    res = run_experiment(bundled)
    return res, time.perf_counter() - t0


@pytest.fixture(scope="session")
def calm_run(bundled):
    """The bundled scenario with zero disturbance, diagnostic mode."""
    return run_experiment(with_w_max(bundled, 0.0), mode="diagnostic")


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Store one acceptance verdict; all are printed at the end of the session."""
    ACCEPTANCE[number] = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
