"""Backward dynamic programming for the value surface J(t, node, y).

Volume index ``j`` counts remaining full-rate cells: ``y_j = 1 - j*dy``.
Exercising at rate L for one step moves ``j -> j-1``; ``j = 0`` means the
volume is exhausted.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .model import LatticeModel, VolumeGrid


@dataclass(frozen=True)
class ValueSurface:
    model: LatticeModel
    vgrid: VolumeGrid
    J: tuple[np.ndarray, ...]
    exercise: tuple[np.ndarray, ...]

    def value(self, i: int, node: int, y: float) -> float:
        return float(self.J[i][node, self.vgrid.level_index(y)])


@dataclass(frozen=True)
class MarginalSurface:
    vgrid: VolumeGrid
    D: tuple[np.ndarray, ...]


@dataclass(frozen=True)
class UnconstrainedSurface:
    W: tuple[np.ndarray, ...]


def _readonly(arrays):
    out = tuple(np.ascontiguousarray(a) for a in arrays)
    for a in out:
        a.setflags(write=False)
    return out


def check_grids(model: LatticeModel, vgrid: VolumeGrid) -> None:
    if vgrid.time_grid != model.time_grid:
        raise ValueError(f"volume grid built on {vgrid.time_grid}, model on {model.time_grid}")
    if vgrid.dy != vgrid.L * model.dt:
        raise ValueError(f"grid mismatch: dy={vgrid.dy} != L*dt={vgrid.L * model.dt}")


def solve_dp(model: LatticeModel, vgrid: VolumeGrid) -> ValueSurface:
    """Solve J by backward induction over bang-bang actions {0, L}.

    Ties go to exercising, which yields the maximal optimal control.
    """
    check_grids(model, vgrid)
    N, M = model.N, vgrid.M
    L, dt = vgrid.L, model.dt
    J = [None] * (N + 1)
    ex = [None] * N
    J[N] = np.zeros((model.n_nodes(N), M + 1))
    for i in range(N - 1, -1, -1):
        cont = model.expect(i, J[i + 1])
        reward = (L * dt * model.X[i])[:, None]
        hold = cont
        exer = np.full_like(cont, -np.inf)
        exer[:, 1:] = reward + cont[:, :-1]
        take = exer >= hold
        J[i] = np.where(take, exer, hold)
        ex[i] = take
    return ValueSurface(model, vgrid, _readonly(J), _readonly(ex))


def marginal_left(surface: ValueSurface) -> MarginalSurface:
    """Left difference in y: ``D[j] = (J[j] - J[j+1]) / dy`` approximates D_y^- J at y_j.

    At and below ``y = 1 - L(T - t_i)`` the marginal is exactly zero.
    """
    vg = surface.vgrid
    D = []
    for i, Ji in enumerate(surface.J):
        Di = np.zeros_like(Ji)
        Di[:, :-1] = (Ji[:, :-1] - Ji[:, 1:]) / vg.dy
        diag = vg.diagonal_index(i)
        Di[:, diag:] = 0.0
        D.append(Di)
    return MarginalSurface(vg, _readonly(D))


def unconstrained_values(model: LatticeModel, L: float) -> UnconstrainedSurface:
    """W = E[L * sum_{k>=i} X_k dt | node], the value when volume is slack."""
    N, dt = model.N, model.dt
    W = [None] * (N + 1)
    W[N] = np.zeros(model.n_nodes(N))
    for i in range(N - 1, -1, -1):
        W[i] = L * dt * model.X[i] + model.expect(i, W[i + 1])
    return UnconstrainedSurface(_readonly(W))


def forward_max_bound(model: LatticeModel) -> tuple[np.ndarray, ...]:
    """Backward recursion ``Z_i = E[max(X_i, Z_{i+1}) | node]``, ``Z_N = X_N``.

    Dominates the Snell envelope of X, which bounds the marginal value of
    volume from time t_i on.
    """
    N = model.N
    Z = [None] * (N + 1)
    Z[N] = np.asarray(model.X[N], dtype=float).copy()
    for i in range(N - 1, -1, -1):
        nxt = Z[i + 1][model.succ[i]]
        Z[i] = (model.prob[i] * np.maximum(model.X[i][:, None], nxt)).sum(axis=1)
    return _readonly(Z)


def interpolate(surface: ValueSurface, t: float, y: float, node: int = 0) -> float:
    """Bilinear interpolation of J in (t, y) for a fixed node index.

    Approximation only; node indices are clipped to each step's range.
    """
    vg = surface.vgrid
    tg = vg.time_grid
    if not (0.0 <= t <= tg.T) or y > 1.0:
        raise ValueError(f"(t={t}, y={y}) outside [0, T] x (-inf, 1]")
    s = min(t / tg.dt, tg.N - 1e-12)
    i0 = int(np.floor(s))
    wt = s - i0
    x = min((1.0 - y) / vg.dy, vg.M)
    j0 = min(int(np.floor(x)), vg.M - 1)
    wy = x - j0

    def at(i: int) -> float:
        row = surface.J[i][min(node, surface.J[i].shape[0] - 1)]
        return (1 - wy) * row[j0] + wy * row[j0 + 1]

    return float((1 - wt) * at(i0) + wt * at(min(i0 + 1, tg.N)))


CSV_HEADER = ("i", "t", "node", "state", "j", "y", "J", "D", "W")


def _g17(v: float) -> str:
    return format(float(v), ".17g")


def surface_csv(surface: ValueSurface, marginal: MarginalSurface,
                unconstrained: UnconstrainedSurface, preamble: str | None = None) -> str:
    """Render the surface as CSV, rows ordered by (i, node, j)."""
    model, vg = surface.model, surface.vgrid
    buf = io.StringIO()
    if preamble:
        buf.write(f"# {preamble}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    times, levels = model.time_grid.times, vg.levels
    for i in range(model.N + 1):
        for node in range(model.n_nodes(i)):
            state = model.labels[i][node]
            Wv = _g17(unconstrained.W[i][node])
            for j in range(vg.M + 1):
                w.writerow((i, _g17(times[i]), node, state, j, _g17(levels[j]),
                            _g17(surface.J[i][node, j]), _g17(marginal.D[i][node, j]), Wv))
    return buf.getvalue()


def read_surface_csv(text: str, model: LatticeModel, vgrid: VolumeGrid) -> ValueSurface:
    """Load J from an exported CSV onto ``model``'s lattice.

    Exercise flags are not stored in the file; they are recomputed by
    comparing the two DP branches against the loaded values.
    """
    rows = [line for line in text.splitlines() if line and not line.startswith("#")]
    reader = csv.DictReader(rows)
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    J = [np.full((model.n_nodes(i), vgrid.M + 1), np.nan) for i in range(model.N + 1)]
    for row in reader:
        i, node, j = int(row["i"]), int(row["node"]), int(row["j"])
        if not (0 <= i <= model.N and 0 <= node < model.n_nodes(i) and 0 <= j <= vgrid.M):
            raise ValueError(f"CSV cell ({i}, {node}, {j}) outside the configured grid")
        J[i][node, j] = float(row["J"])
    for i, Ji in enumerate(J):
        if np.isnan(Ji).any():
            raise ValueError(f"CSV is missing cells at step {i}")
    ex = []
    L, dt = vgrid.L, model.dt
    for i in range(model.N):
        cont = model.expect(i, J[i + 1])
        take = np.zeros_like(cont, dtype=bool)
        take[:, 1:] = (L * dt * model.X[i])[:, None] + cont[:, :-1] >= cont[:, 1:]
        ex.append(take)
    return ValueSurface(model, vgrid, _readonly(J), _readonly(ex))
