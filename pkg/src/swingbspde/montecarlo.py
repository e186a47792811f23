"""Policy extraction, primal Monte-Carlo lower bound and martingale dual upper bound.

Paths are drawn from Philox4x64-10 (numpy's ``Philox``) with key
``(seed, path_index)``; each path consumes N uniforms from counter 0, so any
path can be replayed on its own.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import LatticeModel, VolumeGrid
from .solver import MarginalSurface, ValueSurface, marginal_left, solve_dp
from .verify import bspde_residual

EPS_SWITCH = 1e-9
MAP_KINDS = ("optimal", "zero")


@dataclass(frozen=True)
class PolicyTable:
    exercise: tuple[np.ndarray, ...]
    L: float
    provenance: str

    def u(self, i: int) -> np.ndarray:
        return self.L * self.exercise[i].astype(float)


def extract_policy(J: ValueSurface, D: MarginalSurface | None = None, model: LatticeModel | None = None,
                   rule: str = "dp-argmax", eps_switch: float = EPS_SWITCH) -> PolicyTable:
    """Bang-bang policy from the DP argmax or from the sign of X + D_y^- J.

    The marginal rule exercises when ``X + D >= -eps_switch``; the dead-band
    resolves indifference toward L, like the DP tie-break.
    """
    model = J.model if model is None else model
    L = J.vgrid.L
    if rule == "dp-argmax":
        return PolicyTable(J.exercise, L, rule)
    if rule != "marginal-rule":
        raise ValueError(f"unknown policy rule {rule!r}")
    if D is None:
        D = marginal_left(J)
    flags = []
    for i in range(model.N):
        e = model.X[i][:, None] + D.D[i] >= -eps_switch
        e[:, 0] = False
        e.setflags(write=False)
        flags.append(e)
    return PolicyTable(tuple(flags), L, rule)


def rule_agreement(a: PolicyTable, b: PolicyTable) -> float:
    same = sum(int((x == y).sum()) for x, y in zip(a.exercise, b.exercise))
    total = sum(x.size for x in a.exercise)
    return same / total


def path_uniforms(n_paths: int, n_steps: int, seed: int) -> np.ndarray:
    out = np.empty((n_paths, n_steps))
    for p in range(n_paths):
        bitgen = np.random.Philox(key=np.array([seed, p], dtype=np.uint64))
        out[p] = np.random.Generator(bitgen).random(n_steps)
    return out


def sample_paths(model: LatticeModel, n_paths: int, seed: int) -> np.ndarray:
    """Node index per step for each path, shape (n_paths, N+1)."""
    U = path_uniforms(n_paths, model.N, seed)
    paths = np.zeros((n_paths, model.N + 1), dtype=np.int64)
    for i in range(model.N):
        node = paths[:, i]
        cum = np.cumsum(model.prob[i][node], axis=1)
        branch = (U[:, i][:, None] >= cum).sum(axis=1)
        branch = np.minimum(branch, cum.shape[1] - 1)
        # guard against rounding landing on a zero-probability branch
        while True:
            bad = model.prob[i][node, branch] == 0
            if not bad.any():
                break
            branch = np.where(bad, branch - 1, branch)
        paths[:, i + 1] = model.succ[i][node, branch]
    return paths


@dataclass(frozen=True)
class Estimate:
    mean: float
    stderr: float
    n: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr}


def _estimate(values: np.ndarray) -> Estimate:
    n = len(values)
    if n < 2:
        raise ValueError("need at least 2 paths for a standard error")
    return Estimate(float(values.mean()), float(values.std(ddof=1) / math.sqrt(n)), n)


def primal_path_values(model: LatticeModel, policy: PolicyTable, vgrid: VolumeGrid,
                       y0: float, paths: np.ndarray) -> np.ndarray:
    j0 = vgrid.level_index(y0)
    n = len(paths)
    j = np.full(n, j0, dtype=np.int64)
    total = np.zeros(n)
    step = policy.L * model.dt
    for i in range(model.N):
        node = paths[:, i]
        e = policy.exercise[i][node, j]
        if np.any(e & (j == 0)):
            raise RuntimeError(f"volume overdraft at step {i}")
        total += np.where(e, step * model.X[i][node], 0.0)
        j = j - e
    if np.any(j < 0) or np.any(j > j0):
        raise RuntimeError("exercised volume left the feasible range")
    return total


def simulate_primal(model: LatticeModel, policy: PolicyTable, vgrid: VolumeGrid, y0: float,
                    n_paths: int, seed: int, paths: np.ndarray | None = None) -> Estimate:
    """Unbiased estimate of the policy's value, hence a lower bound on J(0, y0)."""
    if n_paths < 2:
        raise ValueError("n_paths must be >= 2")
    if paths is None:
        paths = sample_paths(model, n_paths, seed)
    return _estimate(primal_path_values(model, policy, vgrid, y0, paths))


def dual_path_values(J: ValueSurface, y0: float, paths: np.ndarray, map_kind: str = "optimal") -> np.ndarray:
    """Pathwise maximum over deterministic grid controls of reward minus martingale.

    ``optimal`` penalises each step with the martingale part of J along the
    control, ``J(i+1, node_{i+1}, j') - E[J(i+1, ., j') | node_i]``. ``zero``
    applies no penalty (perfect-foresight bound). Identical paths are solved
    once.
    """
    if map_kind not in MAP_KINDS:
        raise ValueError(f"map_kind must be one of {MAP_KINDS}, got {map_kind!r}")
    model, vg = J.model, J.vgrid
    j0 = vg.level_index(y0)
    upaths, inverse = np.unique(paths, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    step = vg.L * model.dt
    V = np.zeros((len(upaths), j0 + 1))
    for i in range(model.N - 1, -1, -1):
        node, nxt = upaths[:, i], upaths[:, i + 1]
        if map_kind == "optimal":
            EJ = model.expect(i, J.J[i + 1][:, : j0 + 1])
            dM = J.J[i + 1][nxt, : j0 + 1] - EJ[node]
        else:
            dM = np.zeros_like(V)
        hold = V - dM
        exer = np.full_like(V, -np.inf)
        exer[:, 1:] = (step * model.X[i][node])[:, None] + hold[:, :-1]
        V = np.maximum(hold, exer)
    return V[:, j0][inverse]


@dataclass(frozen=True)
class DualReport:
    primal: Estimate
    dual: Estimate
    map_kind: str
    n_paths: int
    seed: int
    N: int
    M: int
    model: dict
    extra: dict | None = None

    @property
    def gap(self) -> float:
        return self.dual.mean - self.primal.mean

    @property
    def combined_stderr(self) -> float:
        return math.hypot(self.primal.stderr, self.dual.stderr)

    def to_dict(self) -> dict:
        out = {
            "primal": self.primal.to_dict(),
            "dual": {**self.dual.to_dict(), "map": self.map_kind},
            "gap": self.gap,
            "n_paths": self.n_paths,
            "seed": self.seed,
            "grid": {"N": self.N, "M": self.M},
            "model": self.model,
        }
        if self.extra:
            out.update(self.extra)
        return out


def dual_bound(J: ValueSurface, y0: float, n_paths: int, seed: int, map_kind: str = "optimal",
               paths: np.ndarray | None = None) -> Estimate:
    if n_paths < 2:
        raise ValueError("n_paths must be >= 2")
    if paths is None:
        paths = sample_paths(J.model, n_paths, seed)
    return _estimate(dual_path_values(J, y0, paths, map_kind))


def price(model: LatticeModel, vgrid: VolumeGrid, y0: float, n_paths: int, seed: int,
          map_kind: str = "optimal", model_info: dict | None = None) -> DualReport:
    """Solve, extract the DP policy, then bracket J(0, y0) with common random paths."""
    if n_paths < 2:
        raise ValueError("n_paths must be >= 2")
    J = solve_dp(model, vgrid)
    D = marginal_left(J)
    policy = extract_policy(J, D, model)
    paths = sample_paths(model, n_paths, seed)
    primal = simulate_primal(model, policy, vgrid, y0, n_paths, seed, paths=paths)
    dual = dual_bound(J, y0, n_paths, seed, map_kind, paths=paths)
    res = bspde_residual(model, J, D)
    extra = {
        "value": float(J.J[0][0, vgrid.level_index(y0)]),
        "y0": y0,
        "residuals": {"bspde_max": res.max_residual, "bspde_mean": res.mean_residual},
    }
    return DualReport(primal, dual, map_kind, n_paths, seed, model.N, vgrid.M,
                      model_info or {"kind": model.name}, extra)
