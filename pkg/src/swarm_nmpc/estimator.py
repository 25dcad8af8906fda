"""scikit-learn style wrapper around one scenario's decentralized controller."""
from __future__ import annotations

from dataclasses import replace
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .coord import PlanRegistry, step_round
from .experiment import ExperimentResult, run_experiment, theorem_reports
from .scenario import ScenarioFile, load_scenario
from .validation import check_states

__all__ = ["DecentralizedNMPC"]


class DecentralizedNMPC(BaseEstimator):
    """Decentralized NMPC policy for the agents of a scenario.

    ``fit`` takes a ``ScenarioFile`` (or a path to one), validates it and
    runs the static checks. ``predict`` maps joint states, one row per agent
    in scenario order, to the inputs of the first segment of a fresh
    round-robin solve from those states. ``simulate`` runs the closed loop.

    Parameters left as ``None`` fall back to the values in the scenario.
    """

    def __init__(self, seed: Optional[int] = None, mode: Optional[str] = None,
                 terminal_samples: int = 256):
        self.seed = seed
        self.mode = mode
        self.terminal_samples = terminal_samples

    def fit(self, X, y=None):
        sf = load_scenario(X) if isinstance(X, (str, bytes)) or hasattr(X, "__fspath__") else X
        if not isinstance(sf, ScenarioFile):
            raise TypeError("fit expects a ScenarioFile or a path to a scenario file")
        self.scenario_ = sf
        self.ids_ = tuple(a.id for a in sf.scenario.agents)
        self.n_state_ = sf.controller.n
        self.n_input_ = sf.controller.m
        self.reports_ = theorem_reports(sf, self.terminal_samples)
        return self

    def predict(self, X) -> np.ndarray:
        """First-segment inputs, shape ``(agents, m)`` or ``(batch, agents, m)``."""
        check_is_fitted(self, "scenario_")
        X = np.asarray(X, dtype=float)
        single = X.ndim == 2
        batch = X[None] if single else X
        if batch.ndim != 3:
            raise ValueError("expected states of shape (agents, n) or (batch, agents, n)")
        sf = self.scenario_
        out = np.empty((batch.shape[0], len(self.ids_), self.n_input_))
        for b, states in enumerate(batch):
            states = check_states(states, len(self.ids_), self.n_state_)
            reg = PlanRegistry({i: states[q].copy() for q, i in enumerate(self.ids_)})
            plans = step_round(reg, sf.order, sf.scenario, sf.controller, 0.0,
                               settings=sf.solver)
            for q, i in enumerate(self.ids_):
                out[b, q] = plans[i].inputs[0]
        return out[0] if single else out

    def simulate(self, duration: Optional[float] = None) -> ExperimentResult:
        """Closed-loop run of the fitted scenario."""
        check_is_fitted(self, "scenario_")
        sf = self.scenario_
        if duration is not None:
            sf = replace(sf, sim=replace(sf.sim, duration=float(duration)))
        return run_experiment(sf, seed=self.seed, mode=self.mode,
                              terminal_samples=self.terminal_samples)
