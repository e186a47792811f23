import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from swingbspde import SwingValueEstimator
from swingbspde.model import LatticeModel

from conftest import exponential, gbm, solved


def test_params_roundtrip():
    est = SwingValueEstimator(L=2.0, M=60, rule="marginal-rule")
    assert est.get_params() == {"L": 2.0, "M": 60, "rule": "marginal-rule", "eps_switch": 1e-9}
    other = clone(est).set_params(L=3.0)
    assert other.L == 3.0 and est.L == 2.0


def test_fit_predict_matches_solver():
    m = gbm(40)
    est = SwingValueEstimator(L=2.0).fit(m)
    vg, J, D = solved(m, 2.0)
    cells = np.array([[0, 0, 0], [0, 0, 20], [10, 4, 33], [40, 40, 40]])
    assert np.array_equal(est.predict(cells), [J.J[i][n, j] for i, n, j in cells])
    assert np.array_equal(est.marginal(cells), [D.D[i][n, j] for i, n, j in cells])
    assert est.exercise_rate(cells)[-1] == 0.0
    assert set(est.exercise_rate(cells)) <= {0.0, 2.0}


def test_value_interpolates():
    m = exponential(100)
    est = SwingValueEstimator(L=1.0).fit(m)
    assert est.value(0.0, 0.0) == pytest.approx(est.surface_.J[0][0, 100])
    assert est.value(0.005, 0.505) == pytest.approx(est.surface_.value(0, 0, 0.5), abs=0.01)


def test_unfitted_and_bad_input():
    est = SwingValueEstimator()
    with pytest.raises(NotFittedError):
        est.predict([[0, 0, 0]])
    with pytest.raises(TypeError):
        est.fit(np.zeros((3, 3)))
    est.fit(gbm(10), None)
    with pytest.raises(ValueError, match="columns"):
        est.predict([[0, 0]])
    with pytest.raises(ValueError, match="outside"):
        est.predict([[0, 5, 0]])


def test_invalid_model_rejected():
    m = gbm(4)
    P = [p.copy() for p in m.prob]
    P[1][0] = [0.6, 0.5]
    bad = LatticeModel(m.time_grid, m.labels, m.X, m.succ, tuple(P))
    with pytest.raises(ValueError, match="invalid lattice"):
        SwingValueEstimator(L=1.0).fit(bad)
