"""scikit-learn style facade over scenario assembly and the projected gradient method."""

from typing import Optional

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .forward import ControlGrid, StateTrajectory, forward_sweep
from .optimize import OptimizerResult, projected_gradient
from .scenario import Scenario, ScenarioConfig, build, load_config


def _as_scenario(X) -> Scenario:
    if isinstance(X, Scenario):
        return X
    if isinstance(X, ScenarioConfig):
        return build(X)
    return build(load_config(X))


class EvacuationController(BaseEstimator):
    """Optimal agent controls for one scenario.

    ``fit`` accepts a :class:`Scenario`, a :class:`ScenarioConfig`, a YAML
    path or a preset name. After fitting, ``controls_`` holds the optimized
    :class:`ControlGrid` and ``result_`` the full optimizer record.
    ``score`` is the negated objective, so larger is better.

    Parameters
    ----------
    max_iter : int
        Outer iteration limit of the projected gradient method.
    tol : float
        Stationarity tolerance.
    d_param : float
        Armijo sufficient decrease parameter.
    """

    def __init__(self, max_iter: int = 50, tol: float = 1e-3, d_param: float = 1e-4):
        self.max_iter = max_iter
        self.tol = tol
        self.d_param = d_param

    def fit(self, X, y=None, initial_controls: Optional[ControlGrid] = None):
        sc = _as_scenario(X)
        problem = sc.problem()
        q0 = initial_controls if initial_controls is not None else sc.controls
        res: OptimizerResult = projected_gradient(problem, q0, max_iter=self.max_iter, tol=self.tol,
                                                  d_param=self.d_param)
        self.scenario_ = sc
        self.result_ = res
        self.controls_ = res.controls
        self.n_iter_ = res.iterations
        self.objective_ = res.objective[-1]
        return self

    def _check_fitted(self):
        if not hasattr(self, "controls_"):
            raise NotFittedError("call fit before using this controller")

    def predict(self, X=None) -> StateTrajectory:
        """State trajectory under the fitted controls (on ``X`` if given, else the fitted scenario)."""
        self._check_fitted()
        sc = self.scenario_ if X is None else _as_scenario(X)
        return forward_sweep(sc.disc, self.controls_, sc.rho0, sc.x0)

    def score(self, X=None, y=None) -> float:
        self._check_fitted()
        sc = self.scenario_ if X is None else _as_scenario(X)
        return -sc.problem().value(self.controls_)
