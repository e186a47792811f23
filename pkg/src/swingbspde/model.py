"""Finite Markov lattices carrying the payoff-rate process X.

Every model is a time-inhomogeneous Markov chain on a finite node set per
step. Node ``k`` at step ``i`` moves to ``succ[i][k, b]`` with probability
``prob[i][k, b]``; unused branches carry probability zero. Conditional
expectations are therefore exact finite sums.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

KINDS = ("gbm-call", "indicator-deterministic", "indicator-exponential", "constant")

PROB_TOL = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    T: float
    N: int

    def __post_init__(self) -> None:
        if not isinstance(self.N, (int, np.integer)) or isinstance(self.N, bool):
            raise ValueError(f"N must be an integer, got {self.N!r}")
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if not (math.isfinite(self.T) and self.T > 0):
            raise ValueError(f"T must be positive, got {self.T}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.N + 1) * self.dt


@dataclass(frozen=True)
class VolumeGrid:
    """Consumed-volume levels ``y_j = 1 - j*dy`` with ``dy = L*dt``.

    One full-rate step moves exactly one cell, so bang-bang controls stay on
    the grid. ``M`` defaults to ``N`` which puts the deepest level at
    ``1 - L*T``; everything below is the unconstrained region.
    """

    L: float
    time_grid: TimeGrid
    M: int | None = None

    def __post_init__(self) -> None:
        if not (math.isfinite(self.L) and self.L > 0):
            raise ValueError(f"L must be positive, got {self.L}")
        if self.M is None:
            object.__setattr__(self, "M", self.time_grid.N)
        if self.M < self.time_grid.N:
            raise ValueError(
                f"M={self.M} leaves part of the constrained region off-grid; need M >= N={self.time_grid.N}"
            )

    @property
    def dy(self) -> float:
        return self.L * self.time_grid.dt

    @property
    def levels(self) -> np.ndarray:
        return 1.0 - np.arange(self.M + 1) * self.dy

    def diagonal_index(self, i: int) -> int:
        """Level index of ``y = 1 - L(T - t_i)``; levels at or past it are unconstrained."""
        return self.time_grid.N - i

    def level_index(self, y: float, atol: float = 1e-9) -> int:
        """Snap a consumed volume onto the grid.

        Levels below ``y_M`` map to ``M`` (the constraint is slack there).
        """
        if y > 1.0 + atol:
            raise ValueError(f"consumed volume y={y} exceeds 1")
        x = (1.0 - y) / self.dy
        if x >= self.M:
            return self.M
        j = int(round(x))
        if abs(x - j) > atol * max(1.0, abs(x)):
            raise ValueError(f"y={y} is not on the volume grid (dy={self.dy})")
        return j


@dataclass(frozen=True)
class ModelParams:
    kind: str
    S0: float | None = None
    K: float | None = None
    sigma: float | None = None
    r: float = 0.0
    lam: float | None = None
    tstar: float | None = None

    def check(self, grid: TimeGrid) -> None:
        """Raise ValueError naming the offending field."""
        if self.kind not in KINDS:
            raise ValueError(f"kind: unknown model kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "gbm-call":
            for name in ("S0", "K", "sigma"):
                if getattr(self, name) is None:
                    raise ValueError(f"{name}: required for gbm-call")
            if not self.S0 > 0:
                raise ValueError(f"S0: must be > 0, got {self.S0}")
            if not self.K >= 0:
                raise ValueError(f"K: must be >= 0, got {self.K}")
            if not self.sigma > 0:
                raise ValueError(f"sigma: must be > 0, got {self.sigma}")
        elif self.kind == "indicator-exponential":
            if self.lam is None or not self.lam > 0:
                raise ValueError(f"lambda: must be > 0, got {self.lam}")
        elif self.kind == "indicator-deterministic":
            if self.tstar is None or not (0.0 <= self.tstar <= grid.T):
                raise ValueError(f"tstar: must lie in [0, T={grid.T}], got {self.tstar}")
        elif self.kind == "constant":
            if self.S0 is None or not self.S0 >= 0:
                raise ValueError(f"S0: constant payoff rate must be >= 0, got {self.S0}")


@dataclass(frozen=True)
class LatticeModel:
    time_grid: TimeGrid
    labels: tuple[tuple[str, ...], ...]
    X: tuple[np.ndarray, ...]
    succ: tuple[np.ndarray, ...]
    prob: tuple[np.ndarray, ...]
    name: str = "lattice"
    params: ModelParams | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        for arrays in (self.X, self.succ, self.prob):
            for a in arrays:
                a.setflags(write=False)

    @property
    def N(self) -> int:
        return self.time_grid.N

    @property
    def dt(self) -> float:
        return self.time_grid.dt

    def n_nodes(self, i: int) -> int:
        return len(self.X[i])

    def expect(self, i: int, values: np.ndarray) -> np.ndarray:
        """E[values(step i+1) | node at step i], for arrays indexed by node first."""
        gathered = values[self.succ[i]]
        if gathered.ndim == 2:
            return (self.prob[i] * gathered).sum(axis=1)
        return (self.prob[i][:, :, None] * gathered).sum(axis=1)


def _freeze(*arrays: np.ndarray) -> tuple[np.ndarray, ...]:
    return tuple(np.ascontiguousarray(a) for a in arrays)


def crr_factors(sigma: float, r: float, dt: float) -> tuple[float, float, float]:
    up = math.exp(sigma * math.sqrt(dt))
    down = 1.0 / up
    p = (math.exp(r * dt) - down) / (up - down)
    return up, down, p


def build_gbm_lattice(params: ModelParams, grid: TimeGrid) -> LatticeModel:
    """Recombining CRR tree with payoff rate ``exp(-r t) (S - K)_+``.

    Node ``k`` at step ``i`` has ``k`` up-moves.
    """
    if params.kind != "gbm-call":
        raise ValueError(f"kind: expected gbm-call, got {params.kind!r}")
    params.check(grid)
    dt = grid.dt
    up, down, p = crr_factors(params.sigma, params.r, dt)
    if not (0.0 < p < 1.0):
        raise ValueError(
            f"risk-neutral probability {p:.6g} outside (0, 1); dt={dt} too coarse for sigma={params.sigma}, r={params.r}"
        )
    X, succ, prob, labels = [], [], [], []
    for i in range(grid.N + 1):
        k = np.arange(i + 1)
        spot = params.S0 * up ** k * down ** (i - k)
        X.append(math.exp(-params.r * i * dt) * np.maximum(spot - params.K, 0.0))
        labels.append(tuple(f"{s:.17g}" for s in spot))
        if i < grid.N:
            succ.append(np.stack([k, k + 1], axis=1))
            prob.append(np.tile([1.0 - p, p], (i + 1, 1)))
    return LatticeModel(grid, tuple(labels), _freeze(*X), _freeze(*succ), _freeze(*prob),
                        name="gbm-call", params=params)


ALIVE, DEAD = 0, 1


def build_indicator_lattice(params: ModelParams, grid: TimeGrid) -> LatticeModel:
    """Two-state alive/dead chain for the payoff ``1{t < rho}``.

    Deterministic kind: one node per step, alive while ``t_i < tstar``.
    Exponential kind: nodes (alive, dead) from step 1 on, alive dies with
    probability ``1 - exp(-lambda dt)`` per step; dead is absorbing.
    """
    if params.kind not in ("indicator-deterministic", "indicator-exponential"):
        raise ValueError(f"kind: expected an indicator kind, got {params.kind!r}")
    params.check(grid)
    N, dt = grid.N, grid.dt
    X, succ, prob, labels = [], [], [], []
    if params.kind == "indicator-deterministic":
        alive = [i * dt < params.tstar for i in range(N + 1)]
        for i in range(N + 1):
            X.append(np.array([1.0 if alive[i] else 0.0]))
            labels.append(("alive",) if alive[i] else ("dead",))
            if i < N:
                succ.append(np.zeros((1, 1), dtype=np.int64))
                prob.append(np.ones((1, 1)))
        name = "indicator-deterministic"
    else:
        q = -math.expm1(-params.lam * dt)
        X.append(np.array([1.0]))
        labels.append(("alive",))
        for i in range(1, N + 1):
            X.append(np.array([1.0, 0.0]))
            labels.append(("alive", "dead"))
        for i in range(N):
            if i == 0:
                succ.append(np.array([[ALIVE, DEAD]]))
                prob.append(np.array([[1.0 - q, q]]))
            else:
                succ.append(np.array([[ALIVE, DEAD], [DEAD, DEAD]]))
                prob.append(np.array([[1.0 - q, q], [0.0, 1.0]]))
        name = "indicator-exponential"
    return LatticeModel(grid, tuple(labels), _freeze(*X), _freeze(*succ), _freeze(*prob),
                        name=name, params=params)


def build_constant_lattice(params: ModelParams, grid: TimeGrid) -> LatticeModel:
    """Single-node chain with ``X == S0`` at every step."""
    if params.kind != "constant":
        raise ValueError(f"kind: expected constant, got {params.kind!r}")
    params.check(grid)
    X = [np.array([float(params.S0)]) for _ in range(grid.N + 1)]
    succ = [np.zeros((1, 1), dtype=np.int64) for _ in range(grid.N)]
    prob = [np.ones((1, 1)) for _ in range(grid.N)]
    labels = tuple(("const",) for _ in range(grid.N + 1))
    return LatticeModel(grid, labels, _freeze(*X), _freeze(*succ), _freeze(*prob),
                        name="constant", params=params)


def build_model(params: ModelParams, grid: TimeGrid) -> LatticeModel:
    if params.kind == "gbm-call":
        return build_gbm_lattice(params, grid)
    if params.kind == "constant":
        return build_constant_lattice(params, grid)
    return build_indicator_lattice(params, grid)


def validate(model: LatticeModel) -> list[str]:
    """List every violated lattice invariant; an empty list means valid."""
    problems = []
    N = model.N
    if len(model.X) != N + 1:
        problems.append(f"expected {N + 1} payoff steps, found {len(model.X)}")
        return problems
    if len(model.succ) != N or len(model.prob) != N:
        problems.append(f"expected {N} transition steps, found {len(model.succ)}/{len(model.prob)}")
        return problems
    if model.n_nodes(0) != 1:
        problems.append(f"step 0 must have exactly one node, found {model.n_nodes(0)}")
    for i in range(N + 1):
        x = np.asarray(model.X[i])
        if len(model.labels[i]) != len(x):
            problems.append(f"step {i}: {len(model.labels[i])} labels for {len(x)} nodes")
        for k in np.flatnonzero(~np.isfinite(x) | (x < 0)):
            problems.append(f"node ({i}, {k}): payoff rate X={x[k]!r} violates nonnegativity")
    for i in range(N):
        n_i, n_next = model.n_nodes(i), model.n_nodes(i + 1)
        s, p = model.succ[i], model.prob[i]
        if s.shape != p.shape or s.shape[0] != n_i:
            problems.append(f"step {i}: transition arrays shaped {s.shape}/{p.shape} for {n_i} nodes")
            continue
        for k in range(n_i):
            if np.any(p[k] < 0) or not np.all(np.isfinite(p[k])):
                problems.append(f"node ({i}, {k}): negative or non-finite probability {p[k].tolist()}")
            total = float(p[k].sum())
            if abs(total - 1.0) > PROB_TOL:
                problems.append(f"node ({i}, {k}): probabilities {p[k].tolist()} sum to {total!r}, not 1")
            if np.any((s[k] < 0) | (s[k] >= n_next)):
                problems.append(f"node ({i}, {k}): successor index out of range {s[k].tolist()}")
    return problems


# --- JSON configuration -----------------------------------------------------

_COMMON_KEYS = {"kind", "T", "N", "L"}
_KIND_KEYS = {
    "gbm-call": {"S0", "K", "sigma", "r"},
    "indicator-deterministic": {"tstar"},
    "indicator-exponential": {"lambda"},
    "constant": {"S0"},
}


def model_keys(kind: str) -> set[str]:
    return _COMMON_KEYS | _KIND_KEYS.get(kind, set())


def parse_model_config(cfg: dict[str, Any]) -> tuple[ModelParams, TimeGrid, float]:
    """Strictly parse a model description into (params, time grid, L).

    Unknown keys and keys that do not apply to the model kind are rejected.
    """
    if not isinstance(cfg, dict):
        raise ValueError("model configuration must be a JSON object")
    kind = cfg.get("kind")
    if kind not in KINDS:
        raise ValueError(f"kind: unknown model kind {kind!r}; expected one of {KINDS}")
    unknown = set(cfg) - model_keys(kind)
    if unknown:
        raise ValueError(f"unknown field(s) for kind {kind}: {sorted(unknown)}")
    for key in ("T", "N", "L"):
        if key not in cfg:
            raise ValueError(f"{key}: required")
    N = cfg["N"]
    if not isinstance(N, int) or isinstance(N, bool):
        raise ValueError(f"N: must be an integer, got {N!r}")
    if N < 1:
        raise ValueError(f"N: must be >= 1, got {N}")
    T, L = _number(cfg, "T"), _number(cfg, "L")
    if not T > 0:
        raise ValueError(f"T: must be > 0, got {T}")
    if not L > 0:
        raise ValueError(f"L: must be > 0, got {L}")
    grid = TimeGrid(T, N)
    params = ModelParams(
        kind=kind,
        S0=_number(cfg, "S0", None),
        K=_number(cfg, "K", None),
        sigma=_number(cfg, "sigma", None),
        r=_number(cfg, "r", 0.0),
        lam=_number(cfg, "lambda", None),
        tstar=_number(cfg, "tstar", None),
    )
    params.check(grid)
    return params, grid, L


_MISSING = object()


def _number(cfg: dict, key: str, default: Any = _MISSING) -> Any:
    if key not in cfg:
        if default is _MISSING:
            raise ValueError(f"{key}: required")
        return default
    v = cfg[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ValueError(f"{key}: expected a finite number, got {v!r}")
    return float(v)
