import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from evacontrol.estimator import EvacuationController


def test_params_and_clone():
    est = EvacuationController(max_iter=3, tol=1e-2)
    assert est.get_params() == {"max_iter": 3, "tol": 1e-2, "d_param": 1e-4}
    other = clone(est).set_params(max_iter=5)
    assert other.max_iter == 5 and est.max_iter == 3


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        EvacuationController().score()


def test_fit_score_predict(check_scenario):
    sc = check_scenario
    est = EvacuationController(max_iter=2).fit(sc)
    assert est.n_iter_ <= 2
    assert est.objective_ <= est.result_.objective[0]
    assert est.score() == pytest.approx(-est.objective_, rel=1e-12)
    traj = est.predict()
    assert traj.rho.shape == (sc.disc.N + 1, sc.mesh.n_triangles)
    assert np.hypot(est.controls_.u[..., 0], est.controls_.u[..., 1]).max() <= 1 + 1e-12
