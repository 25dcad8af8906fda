import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import disturbance_bound_mp
from swarm_nmpc.dynamics import ErrorDynamics, linear_model, unicycle
from swarm_nmpc.ocp import (
    FhocpConfig,
    check_disturbance_bound,
    cost_constants,
    design_terminal_ingredients,
    disturbance_bound_rhs,
    linearize,
    project_input,
    running_cost,
    terminal_controller,
    terminal_cost,
    ultimate_bounds,
    verify_terminal_region,
    xi_constant,
)

# published constants of the bundled scenario
PUB = dict(eps_psi=0.0654, eps_omega=0.0035, L_V=0.0471, L_g=10.7354, h=0.1, T_p=0.6)


def _cfg(**kw):
    base = dict(Q=np.eye(2), R=np.eye(1), P=np.eye(2), h=0.1, T_p=0.5, eps_psi=1.0,
                eps_omega=0.1, K=np.zeros((1, 2)))
    base.update(kw)
    return FhocpConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        _cfg(T_p=0.55)
    with pytest.raises(ValueError):
        _cfg(h=0.6)
    with pytest.raises(ValueError):
        _cfg(eps_omega=2.0)
    with pytest.raises(ValueError):
        _cfg(P=[[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(ValueError):
        _cfg(R=[[0.0]])
    with pytest.raises(ValueError):
        _cfg(K=np.zeros((2, 2)))
    with pytest.raises(ValueError):
        _cfg(Q=[[1.0, 0.5], [0.0, 1.0]])
    cfg = _cfg(n_sub=4)
    assert (cfg.n, cfg.m, cfg.n_seg) == (2, 1, 5)
    assert cfg.dt == pytest.approx(0.025)


def test_config_matrices_are_frozen():
    cfg = _cfg()
    with pytest.raises(ValueError):
        cfg.Q[0, 0] = 5.0


def test_costs_and_projection():
    cfg = _cfg(Q=[[2.0, 0.0], [0.0, 1.0]], R=[[3.0]], P=[[4.0, 0.0], [0.0, 1.0]])
    assert running_cost(cfg, [1.0, 2.0], [1.0]) == pytest.approx(2 + 4 + 3)
    assert terminal_cost(cfg, [1.0, 1.0]) == pytest.approx(5.0)
    assert np.allclose(project_input([3.0, 4.0], 1.0), [0.6, 0.8])
    assert np.allclose(project_input([0.3, 0.4], 1.0), [0.3, 0.4])
    cfg = _cfg(K=[[10.0, 0.0]])
    assert np.allclose(terminal_controller(cfg, [1.0, 0.0], 2.0), [2.0])


@given(eps_psi=st.floats(0.01, 10), frac=st.floats(0.01, 0.99), L_V=st.floats(1e-3, 10),
       L_g=st.floats(0.01, 20), h=st.floats(0.01, 0.5), n_seg=st.integers(1, 10))
def test_disturbance_bound_matches_high_precision(eps_psi, frac, L_V, L_g, h, n_seg):
    T_p = h * n_seg
    got = disturbance_bound_rhs(eps_psi, frac * eps_psi, L_V, L_g, h, T_p)
    ref = disturbance_bound_mp(eps_psi, frac * eps_psi, L_V, L_g, h, T_p)
    assert abs(got - float(ref)) <= 1e-12 * abs(float(ref))


def test_published_disturbance_bound_value():
    # frozen from the high-precision oracle
    rhs = disturbance_bound_rhs(**PUB)
    assert rhs == pytest.approx(float(disturbance_bound_mp(**PUB)), rel=1e-13)
    assert rhs == pytest.approx(0.0341769056922, rel=1e-11)


def test_xi_constant_closed_form():
    L_F, L_V, L_g, h, T_p = 2.0, 0.5, 3.0, 0.1, 0.4
    ref = (math.exp(L_g * h) - 1) / L_g * ((L_V + L_F / L_g) * (math.exp(L_g * (T_p - h)) - 1) + L_V)
    assert xi_constant(L_F, L_V, L_g, h, T_p) == pytest.approx(ref, rel=1e-13)


def test_cost_constants_and_report(bundled):
    cfg = bundled.controller
    cc = cost_constants(cfg, 10.7354, 30.0, L_V=0.0471)
    assert cc.L_F == pytest.approx(2 * np.linalg.norm(cfg.Q, 2) * 30.0)
    assert cc.L_V == 0.0471
    assert cc.rho == pytest.approx(min(np.linalg.eigvalsh(cfg.Q).min(), 0.005))
    rep = check_disturbance_bound(cfg, 10.7354, 0.1, cc)
    assert not rep.satisfied and rep.rhs < 0.1
    derived = cost_constants(cfg, 10.7354, 30.0)
    psi = math.sqrt(cfg.eps_psi / np.linalg.eigvalsh(cfg.P).min())
    assert derived.L_V == pytest.approx(2 * np.linalg.norm(cfg.P, 2) * psi)


def test_ultimate_bounds_order(bundled):
    ub = ultimate_bounds(bundled.controller)
    assert ub["ultimate_bound_lambda_min"] >= ub["ultimate_bound_lambda_max"]


def test_linearize_unicycle_at_goal():
    ed = ErrorDynamics(unicycle(), np.array([6.0, 3.5, 0.0]))
    A, B = linearize(ed)
    assert np.allclose(A, 0.0, atol=1e-8)
    assert np.allclose(B, [[1, 0], [0, 0], [0, 1]], atol=1e-8)


def test_designed_ingredients_pass_verification():
    m = linear_model([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]], u_max=5.0, lipschitz=1.0)
    ed = ErrorDynamics(m, np.zeros(2))
    # reaching Omega within one segment needs V to shrink by omega_ratio in h
    cfg = design_terminal_ingredients(ed, np.eye(2), np.eye(1), 0.5, 1.0, 5.0,
                                      omega_ratio=0.9, samples=64)
    assert verify_terminal_region(cfg, ed, 5.0, 64).ok
    assert cfg.eps_omega == pytest.approx(0.9 * cfg.eps_psi)


def test_design_rejects_unstabilizable():
    m = linear_model([[1.0, 0.0], [0.0, 1.0]], [[1.0], [0.0]], lipschitz=1.0)
    with pytest.raises(ValueError):
        design_terminal_ingredients(ErrorDynamics(m, np.zeros(2)), np.eye(2), np.eye(1),
                                    0.1, 0.5, 1.0)


def test_published_terminal_ingredients_fail_decrease(bundled):
    a = bundled.scenario.agents[0]
    rep = verify_terminal_region(bundled.controller, a.error_dynamics, a.u_max, 128)
    assert rep.input_ok
    assert not rep.decrease_ok
