"""scikit-learn style front end: ``fit`` solves a lattice, ``predict`` reads J."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .model import LatticeModel, VolumeGrid, validate
from .montecarlo import EPS_SWITCH, extract_policy
from .solver import interpolate, marginal_left, solve_dp, unconstrained_values


def check_lattice(model) -> LatticeModel:
    if not isinstance(model, LatticeModel):
        raise TypeError(f"expected a LatticeModel, got {type(model).__name__}")
    problems = validate(model)
    if problems:
        raise ValueError("invalid lattice model:\n  " + "\n  ".join(problems))
    return model


class SwingValueEstimator(BaseEstimator):
    """Value surface of a swing option with rate cap ``L`` on a lattice model.

    Parameters
    ----------
    L : float
        Maximal exercise rate (volume per unit time).
    M : int or None
        Number of volume cells; ``None`` uses the time-step count.
    rule : {"dp-argmax", "marginal-rule"}
        How the fitted exercise policy is read off the surfaces.
    eps_switch : float
        Dead-band for the marginal rule.
    """

    def __init__(self, L=1.0, M=None, rule="dp-argmax", eps_switch=EPS_SWITCH):
        self.L = L
        self.M = M
        self.rule = rule
        self.eps_switch = eps_switch

    def fit(self, X, y=None):
        model = check_lattice(X)
        self.model_ = model
        self.vgrid_ = VolumeGrid(float(self.L), model.time_grid, self.M)
        self.surface_ = solve_dp(model, self.vgrid_)
        self.marginal_ = marginal_left(self.surface_)
        self.unconstrained_ = unconstrained_values(model, self.vgrid_.L)
        self.policy_ = extract_policy(self.surface_, self.marginal_, model, self.rule, self.eps_switch)
        return self

    def _cells(self, X):
        check_is_fitted(self, "surface_")
        cells = check_array(X, dtype=np.int64, ensure_2d=True)
        if cells.shape[1] != 3:
            raise ValueError(f"expected rows (i, node, j), got {cells.shape[1]} columns")
        N, M = self.model_.N, self.vgrid_.M
        for i, node, j in cells:
            if not (0 <= i <= N and 0 <= node < self.model_.n_nodes(i) and 0 <= j <= M):
                raise ValueError(f"cell ({i}, {node}, {j}) outside the fitted grid")
        return cells

    def predict(self, X):
        """J at each (i, node, j) row of ``X``."""
        cells = self._cells(X)
        return np.array([self.surface_.J[i][node, j] for i, node, j in cells])

    def marginal(self, X):
        cells = self._cells(X)
        return np.array([self.marginal_.D[i][node, j] for i, node, j in cells])

    def exercise_rate(self, X):
        """Policy action u in {0, L}; zero at maturity."""
        cells = self._cells(X)
        N = self.model_.N
        return np.array([self.policy_.L * self.policy_.exercise[i][node, j] if i < N else 0.0
                         for i, node, j in cells])

    def value(self, t, y, node=0):
        """Off-grid J by bilinear interpolation (approximate)."""
        check_is_fitted(self, "surface_")
        return interpolate(self.surface_, t, y, node)
