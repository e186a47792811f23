"""Numerical checks of the value surface against the first-order BSPDE and
its structural properties, plus independent oracles.

All residual sweeps are exact backward expectations on the lattice; the
only approximation is the left-endpoint quadrature of the time integral.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .model import LatticeModel, ModelParams, VolumeGrid
from .solver import (
    MarginalSurface,
    ValueSurface,
    check_grids,
    forward_max_bound,
    unconstrained_values,
)

EXACT_TOL = 1e-10


@dataclass
class ResidualReport:
    name: str
    max_residual: float
    mean_residual: float
    tolerance: float
    N: int
    M: int
    seed: int | None = None
    detail: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_residual <= self.tolerance)

    def to_dict(self) -> dict:
        out = {
            "name": self.name,
            "max_residual": self.max_residual,
            "mean_residual": self.mean_residual,
            "tolerance": self.tolerance,
            "pass": self.passed,
            "grid": {"N": self.N, "M": self.M},
        }
        if self.seed is not None:
            out["seed"] = self.seed
        if self.detail:
            out["detail"] = self.detail
        return out


@dataclass(frozen=True)
class OracleValue:
    value: float
    provenance: str
    formula: str

    def to_dict(self) -> dict:
        return asdict(self)


def _report(name, residuals, tol, vgrid, seed=None, **detail) -> ResidualReport:
    flat = np.concatenate([np.ravel(r) for r in residuals]) if residuals else np.zeros(1)
    flat = np.abs(flat) if flat.size else np.zeros(1)
    return ResidualReport(name, float(flat.max()), float(flat.mean()), float(tol),
                          vgrid.time_grid.N, vgrid.M, seed, dict(detail))


def _exercise_flags(policy) -> Sequence[np.ndarray]:
    return policy.exercise if hasattr(policy, "exercise") else policy


def _constrained(vgrid: VolumeGrid) -> slice:
    # levels with y_j >= 1 - L*T
    return slice(0, vgrid.time_grid.N + 1)


# --- budgets ------------------------------------------------------------------

def bspde_budget(model: LatticeModel, vgrid: VolumeGrid) -> float:
    """O(dt) tolerance for the BSPDE and random-control chain-rule residuals.

    ``L * dt`` times the largest payoff rate on the lattice; for the indicator
    models this is exactly one volume cell.
    """
    xmax = max(float(np.max(x)) for x in model.X)
    return vgrid.L * model.dt * max(xmax, 1.0)


# --- residual sweeps ------------------------------------------------------------

def _sweep(model: LatticeModel, vgrid: VolumeGrid, integrand, flags=None):
    """Backward expectation of ``sum_k integrand(k, j_k)`` along the control.

    ``integrand(i)`` returns an (n_i, M+1) array for step i; ``flags[i]``
    marks cells where the control exercises (volume index drops by one).
    """
    N, M = model.N, vgrid.M
    out = [None] * (N + 1)
    out[N] = np.zeros((model.n_nodes(N), M + 1))
    for i in range(N - 1, -1, -1):
        cont = model.expect(i, out[i + 1])
        if flags is not None:
            e = np.asarray(flags[i], dtype=bool)
            if e[:, 0].any():
                raise ValueError(f"infeasible control: exercise with no volume left at step {i}")
            shifted = np.empty_like(cont)
            shifted[:, 0] = cont[:, 0]
            shifted[:, 1:] = cont[:, :-1]
            cont = np.where(e, shifted, cont)
        out[i] = integrand(i) + cont
    return out


def bspde_rhs(model: LatticeModel, vgrid: VolumeGrid, D: MarginalSurface):
    L, dt = vgrid.L, model.dt
    return _sweep(model, vgrid, lambda i: L * dt * np.maximum(model.X[i][:, None] + D.D[i], 0.0))


def bspde_residual(model: LatticeModel, J: ValueSurface, D: MarginalSurface,
                   tolerance: float | None = None) -> ResidualReport:
    """Compare J with E[L * sum (X + D_y^- J)_+ dt] at each fixed level y."""
    vg = J.vgrid
    check_grids(model, vg)
    if D.vgrid != vg:
        raise ValueError("marginal and value surfaces sit on different grids")
    R = bspde_rhs(model, vg, D)
    sl = _constrained(vg)
    res = [J.J[i][:, sl] - R[i][:, sl] for i in range(model.N + 1)]
    tol = bspde_budget(model, vg) if tolerance is None else tolerance
    return _report("bspde_residual", res, tol, vg)


def boundary_checks(model: LatticeModel, J: ValueSurface, D: MarginalSurface) -> list[ResidualReport]:
    """J(t,1) = 0, D_y^- J(t,1) <= -X(t), and D_y^- J(t, 1 - L(T-t)) = 0."""
    vg = J.vgrid
    N = model.N
    a = [J.J[i][:, 0] for i in range(N + 1)]
    b = [np.maximum(D.D[i][:, 0] + model.X[i], 0.0) for i in range(N)]
    c = [D.D[i][:, vg.diagonal_index(i)] for i in range(N)]
    return [
        _report("boundary_value_y1", a, 0.0, vg),
        _report("boundary_marginal_y1", b, EXACT_TOL, vg),
        _report("boundary_marginal_diagonal", c, 0.0, vg),
    ]


def chain_rule_rhs(model: LatticeModel, vgrid: VolumeGrid, D: MarginalSurface, policy):
    L, dt = vgrid.L, model.dt
    flags = _exercise_flags(policy)

    def integrand(i):
        u = L * np.asarray(flags[i], dtype=float)
        Di = D.D[i]
        return dt * (L * np.maximum(model.X[i][:, None] + Di, 0.0) - Di * u)

    return _sweep(model, vgrid, integrand, flags)


def chain_rule_check(model: LatticeModel, J: ValueSurface, D: MarginalSurface, policy,
                     start: tuple[int, int, int] | None = None,
                     tolerance: float = EXACT_TOL, name: str = "chain_rule",
                     seed: int | None = None) -> ResidualReport:
    """|J - E[sum L(X + D)_+ dt - sum D u dt]| with y(r) driven by ``policy``.

    ``start=(i, node, j)`` restricts the report to one cell; otherwise every
    cell in the constrained region is a starting point.
    """
    vg = J.vgrid
    check_grids(model, vg)
    C = chain_rule_rhs(model, vg, D, policy)
    if start is not None:
        i, node, j = start
        res = [np.array([J.J[i][node, j] - C[i][node, j]])]
    else:
        sl = _constrained(vg)
        res = [J.J[i][:, sl] - C[i][:, sl] for i in range(model.N + 1)]
    return _report(name, res, tolerance, vg, seed=seed)


def optimality_gap(model: LatticeModel, vgrid: VolumeGrid, D: MarginalSurface, policy):
    """Surface of E[sum (L(X + D)_+ - (X + D) u) dt] along ``policy``."""
    L, dt = vgrid.L, model.dt
    flags = _exercise_flags(policy)

    def integrand(i):
        a = model.X[i][:, None] + D.D[i]
        u = L * np.asarray(flags[i], dtype=float)
        return dt * (L * np.maximum(a, 0.0) - a * u)

    return _sweep(model, vgrid, integrand, flags)


def optimality_residual(model: LatticeModel, J: ValueSurface, D: MarginalSurface, policy,
                        tolerance: float = EXACT_TOL,
                        name: str = "optimality_gap") -> ResidualReport:
    """Gap term that vanishes iff the policy follows the sign of X + D_y^- J.

    The report keeps the signed minimum in ``detail`` since the gap itself
    must never go below zero.
    """
    vg = J.vgrid
    G = optimality_gap(model, vg, D, policy)
    sl = _constrained(vg)
    cells = [G[i][:, sl] for i in range(model.N + 1)]
    rep = _report(name, cells, tolerance, vg)
    rep.detail["min_gap"] = float(min(c.min() for c in cells))
    rep.detail["gap_at_root"] = G[0][0, sl].tolist()
    return rep


# --- structural properties ------------------------------------------------------

def structural_checks(model: LatticeModel, J: ValueSurface, D: MarginalSurface) -> list[ResidualReport]:
    vg = J.vgrid
    N, M = model.N, vg.M
    dy = vg.dy
    W = unconstrained_values(model, vg.L).W
    Z = forward_max_bound(model)
    Js = J.J
    terminal = [Js[N]]
    mono = [np.maximum(Js[i][:, :-1] - Js[i][:, 1:], 0.0) for i in range(N + 1)]
    conc = [np.maximum(Js[i][:, :-2] + Js[i][:, 2:] - 2 * Js[i][:, 1:-1], 0.0)
            for i in range(N + 1)] if M >= 2 else []
    lip = [np.maximum(np.abs(Js[i][:, :-1] - Js[i][:, 1:]) - dy * Z[i][:, None], 0.0)
           for i in range(N + 1)]
    sub = [np.maximum(D.D[i] - model.expect(i, D.D[i + 1]), 0.0) for i in range(N)]
    sup = [np.maximum(model.expect(i, Js[i + 1]) - Js[i], 0.0) for i in range(N)]
    unc = [Js[i][:, vg.diagonal_index(i):] - W[i][:, None] for i in range(N + 1)]
    dpos = [np.maximum(D.D[i], 0.0) for i in range(N + 1)]
    dmono = [np.maximum(D.D[i][:, :-1] - D.D[i][:, 1:], 0.0) for i in range(N + 1)]
    return [
        _report("terminal_zero", terminal, 0.0, vg),
        _report("monotone_in_y", mono, EXACT_TOL, vg),
        _report("concave_in_y", conc, EXACT_TOL, vg),
        _report("lipschitz_forward_max", lip, EXACT_TOL, vg),
        _report("marginal_nonpositive", dpos, EXACT_TOL, vg),
        _report("marginal_monotone_in_y", dmono, EXACT_TOL, vg),
        _report("marginal_submartingale", sub, EXACT_TOL, vg),
        _report("value_supermartingale", sup, EXACT_TOL, vg),
        _report("unconstrained_identity", unc, EXACT_TOL, vg),
    ]


def exercised_volume(model: LatticeModel, vgrid: VolumeGrid, policy) -> list[np.ndarray]:
    """Cells exercised from each (i, node, j) onward, for every path.

    Returns per step an (n_i, M+1) array of the minimum and maximum over
    positive-probability paths, stacked on a leading axis of size 2.
    """
    N, M = model.N, vgrid.M
    flags = _exercise_flags(policy)
    lo = [None] * (N + 1)
    hi = [None] * (N + 1)
    lo[N] = np.zeros((model.n_nodes(N), M + 1))
    hi[N] = lo[N].copy()
    for i in range(N - 1, -1, -1):
        e = np.asarray(flags[i], dtype=bool)
        jn = np.arange(M + 1)[None, :] - e
        g_lo = np.full(e.shape, np.inf)
        g_hi = np.full(e.shape, -np.inf)
        for b in range(model.succ[i].shape[1]):
            live = (model.prob[i][:, b] > 0)[:, None]
            nb = model.succ[i][:, b]
            g_lo = np.where(live, np.minimum(g_lo, np.take_along_axis(lo[i + 1][nb], jn, axis=1)), g_lo)
            g_hi = np.where(live, np.maximum(g_hi, np.take_along_axis(hi[i + 1][nb], jn, axis=1)), g_hi)
        lo[i] = e + g_lo
        hi[i] = e + g_hi
    return [np.stack([lo[i], hi[i]]) for i in range(N + 1)]


def policy_structure_check(model: LatticeModel, J: ValueSurface, policy) -> ResidualReport:
    """Maximal-policy volume identity on lattices where X > 0 everywhere.

    From (t_i, y_j) the policy must exercise exactly min(j, N - i) cells on
    every path, and exercise at every step when N - i <= j.
    """
    vg = J.vgrid
    N = model.N
    if any(np.any(x <= 0) for x in model.X[:N]):
        raise ValueError("policy structure check needs X > 0 at every node before T")
    vol = exercised_volume(model, vg, policy)
    flags = _exercise_flags(policy)
    res = []
    for i in range(N + 1):
        target = np.minimum(np.arange(vg.M + 1), N - i)
        res.append(np.abs(vol[i] - target[None, None, :]).max(axis=0))
        if i < N:
            forced = np.arange(vg.M + 1) >= N - i
            res.append((~np.asarray(flags[i], dtype=bool))[:, forced & (np.arange(vg.M + 1) >= 1)].astype(float))
    return _report("policy_maximal_volume", res, 0.0, vg)


# --- oracles ----------------------------------------------------------------------

def analytic_indicator_value(params: ModelParams, t: float, y: float, L: float, T: float,
                             alive: bool = True) -> OracleValue:
    """Closed-form J for the payoff 1{t < rho} (exercise as soon as possible).

    Deterministic rho = tstar: min(1-y, L (tstar - t)_+).
    Exponential rho (alive at t): (L/lambda)(1 - exp(-lambda b / L)),
    b = min(1-y, L(T-t)).
    """
    if params.kind == "indicator-deterministic":
        v = min(1.0 - y, L * max(params.tstar - t, 0.0))
        return OracleValue(max(v, 0.0), "closed-form", "min(1-y, L*(tstar-t)_+)")
    if params.kind == "indicator-exponential":
        if not alive:
            return OracleValue(0.0, "closed-form", "dead state")
        b = max(min(1.0 - y, L * (T - t)), 0.0)
        lam = params.lam
        return OracleValue(-(L / lam) * math.expm1(-lam * b / L), "closed-form",
                           "(L/lambda)*(1-exp(-lambda*min(1-y,L(T-t))/L))")
    raise ValueError(f"no closed form for model kind {params.kind!r}")


def enumerate_paths(model: LatticeModel, max_paths: int = 1 << 16) -> tuple[np.ndarray, np.ndarray]:
    """All positive-probability node paths with their probabilities."""
    paths = np.zeros((1, 1), dtype=np.int64)
    probs = np.ones(1)
    for i in range(model.N):
        s = model.succ[i][paths[:, -1]]
        p = model.prob[i][paths[:, -1]] * probs[:, None]
        keep = model.prob[i][paths[:, -1]] > 0
        rep = np.repeat(paths, s.shape[1], axis=0)[keep.ravel()]
        paths = np.concatenate([rep, s.ravel()[keep.ravel()][:, None]], axis=1)
        probs = p.ravel()[keep.ravel()]
        if len(paths) > max_paths:
            raise ValueError(f"model has more than {max_paths} paths; too large to enumerate")
    return paths, probs


def brute_force_value(model: LatticeModel, vgrid: VolumeGrid, y0: float = 0.0,
                      max_cells: int = 24, batch: int = 1 << 12) -> OracleValue:
    """Best expected reward over every map (i, node, j) -> {0, L}.

    Only decision cells reachable from (0, root, y0) with volume left are
    enumerated; other cells cannot change the value. Each policy is scored
    by walking every lattice path forward.
    """
    check_grids(model, vgrid)
    N = model.N
    j0 = vgrid.level_index(y0)
    paths, probs = enumerate_paths(model)
    cells = {}
    for i in range(N):
        nodes = np.unique(paths[:, i])
        for node in nodes:
            for j in range(max(j0 - i, 1), j0 + 1):
                cells[(i, int(node), j)] = len(cells)
    n_cells = len(cells)
    if n_cells > max_cells:
        raise ValueError(f"{n_cells} decision cells exceed max_cells={max_cells}; too large to enumerate")
    lookup = [np.full((model.n_nodes(i), vgrid.M + 1), -1, dtype=np.int64) for i in range(N)]
    for (i, node, j), c in cells.items():
        lookup[i][node, j] = c
    reward = vgrid.L * model.dt
    best = -np.inf
    n_pol = 1 << n_cells
    for lo in range(0, n_pol, batch):
        codes = np.arange(lo, min(lo + batch, n_pol), dtype=np.int64)
        # column n_cells is a constant 0 used by cells outside the enumeration
        bits = np.zeros((len(codes), n_cells + 1), dtype=np.int64)
        bits[:, :n_cells] = (codes[:, None] >> np.arange(n_cells)[None, :]) & 1
        j = np.full((len(codes), len(paths)), j0, dtype=np.int64)
        total = np.zeros((len(codes), len(paths)))
        for i in range(N):
            cell = lookup[i][paths[:, i][None, :], j]
            act = np.take_along_axis(bits, np.where(cell >= 0, cell, n_cells), axis=1)
            total += act * (reward * model.X[i][paths[:, i]])[None, :]
            j = j - act
        values = total @ probs
        best = max(best, float(values.max()))
    return OracleValue(best, "brute-force", f"max over 2^{n_cells} bang-bang policies")


# --- orchestration ------------------------------------------------------------

def random_controls(model: LatticeModel, vgrid: VolumeGrid, seed: int, count: int = 20):
    """``count`` feasible bang-bang feedback controls; control k uses Philox key (seed, k)."""
    out = []
    for k in range(count):
        rng = np.random.Generator(np.random.Philox(key=np.array([seed, k], dtype=np.uint64)))
        flags = []
        for i in range(model.N):
            e = rng.random((model.n_nodes(i), vgrid.M + 1)) < 0.5
            e[:, 0] = False
            flags.append(e)
        out.append(tuple(flags))
    return out


def never_exercise(model: LatticeModel, vgrid: VolumeGrid):
    return tuple(np.zeros((model.n_nodes(i), vgrid.M + 1), dtype=bool) for i in range(model.N))


def exercise_asap(model: LatticeModel, vgrid: VolumeGrid):
    flags = []
    for i in range(model.N):
        e = np.ones((model.n_nodes(i), vgrid.M + 1), dtype=bool)
        e[:, 0] = False
        flags.append(e)
    return tuple(flags)


def run_all(model: LatticeModel, J: ValueSurface, D: MarginalSurface, *, seed: int = 42,
            n_random: int = 20, max_cells: int = 24, y0: float = 0.0,
            tolerances: dict | None = None) -> list[ResidualReport]:
    """Every verifier check applicable to ``model``."""
    tol = dict(tolerances or {})
    vg = J.vgrid
    budget = bspde_budget(model, vg)
    reports = structural_checks(model, J, D)
    reports += boundary_checks(model, J, D)
    reports.append(bspde_residual(model, J, D, tol.get("bspde_residual", budget)))
    zero = never_exercise(model, vg)
    R = bspde_rhs(model, vg, D)
    C0 = chain_rule_rhs(model, vg, D, zero)
    reports.append(_report("chain_rule_zero_matches_bspde",
                           [C0[i] - R[i] for i in range(model.N + 1)], EXACT_TOL, vg))
    reports.append(chain_rule_check(model, J, D, J, tolerance=tol.get("chain_rule_optimal", EXACT_TOL),
                                    name="chain_rule_optimal"))
    worst = None
    for k, ctrl in enumerate(random_controls(model, vg, seed, n_random)):
        rep = chain_rule_check(model, J, D, ctrl, tolerance=tol.get("chain_rule_random", budget),
                               name="chain_rule_random", seed=seed)
        if worst is None or rep.max_residual > worst.max_residual:
            worst = rep
            worst.detail["worst_control"] = k
    if worst is not None:
        worst.detail["controls"] = n_random
        reports.append(worst)
    reports.append(optimality_residual(model, J, D, J, tol.get("optimality_gap", EXACT_TOL),
                                       name="optimality_gap_dp"))
    gaps = [optimality_gap(model, vg, D, c) for c in random_controls(model, vg, seed + 1, n_random)]
    neg = [np.maximum(-g, 0.0) for G in gaps for g in G]
    reports.append(_report("optimality_gap_nonnegative", neg, EXACT_TOL, vg, seed=seed + 1))
    if model.params is not None and model.params.kind.startswith("indicator"):
        T = model.time_grid.T
        errs = []
        for i in range(model.N + 1):
            for node in range(model.n_nodes(i)):
                alive = model.labels[i][node] == "alive"
                exact = np.array([analytic_indicator_value(model.params, i * model.dt, y, vg.L, T, alive).value
                                  for y in vg.levels])
                errs.append(J.J[i][node] - exact)
        if model.params.kind == "indicator-deterministic":
            reports.append(_report("analytic_indicator", errs, tol.get("analytic_indicator", vg.dy) + EXACT_TOL, vg))
        reports.append(optimality_residual(model, J, D, exercise_asap(model, vg), EXACT_TOL,
                                           name="optimality_gap_asap"))
    try:
        bf = brute_force_value(model, vg, y0=y0, max_cells=max_cells)
    except ValueError:
        bf = None
    if bf is not None:
        j0 = vg.level_index(y0)
        reports.append(_report("brute_force_equivalence", [np.array([J.J[0][0, j0] - bf.value])],
                               tol.get("brute_force_equivalence", 1e-12), vg))
    return reports
