"""Command line: ``swing-bspde {solve,verify,price} --config cfg.json --out dir``.

Exit codes: 0 success, 1 invalid input, 2 a verification check failed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from .model import build_model, model_keys, parse_model_config, validate, VolumeGrid
from .montecarlo import MAP_KINDS, price
from .solver import marginal_left, read_surface_csv, solve_dp, surface_csv, unconstrained_values
from .verify import run_all

RUN_DEFAULTS = {
    "y0": 0.0,
    "M": None,
    "n_paths": 10000,
    "seed": 42,
    "n_random": 20,
    "map": "optimal",
    "tolerances": {},
    "out": None,
}
TOLERANCE_KEYS = {"bspde_residual", "chain_rule_optimal", "chain_rule_random", "optimality_gap",
                  "analytic_indicator", "brute_force_equivalence"}


class ConfigError(ValueError):
    pass


def load_config(path: str, seed: int | None = None, paths: int | None = None) -> dict:
    """Read and strictly validate a run configuration; CLI overrides applied last."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if seed is not None:
        raw["seed"] = seed
    if paths is not None:
        raw["n_paths"] = paths
    kind = raw.get("kind")
    model_part = {k: v for k, v in raw.items() if k not in RUN_DEFAULTS}
    run = {k: raw.get(k, v) for k, v in RUN_DEFAULTS.items()}
    try:
        params, grid, L = parse_model_config(model_part)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    _check_run(run, grid.N)
    cfg = {k: raw[k] for k in sorted(model_keys(kind)) if k in raw}
    cfg.update(run)
    cfg.pop("out")
    return {"config": cfg, "params": params, "grid": grid, "L": L, "out": run["out"]}


def _check_run(run: dict, N: int) -> None:
    def integer(name, lo):
        v = run[name]
        if isinstance(v, bool) or not isinstance(v, int) or v < lo:
            raise ConfigError(f"{name}: must be an integer >= {lo}, got {v!r}")

    integer("n_paths", 2)
    integer("seed", 0)
    integer("n_random", 0)
    if run["M"] is not None:
        integer("M", N)
    y0 = run["y0"]
    if isinstance(y0, bool) or not isinstance(y0, (int, float)) or y0 > 1:
        raise ConfigError(f"y0: must be a number <= 1, got {y0!r}")
    if run["map"] not in MAP_KINDS:
        raise ConfigError(f"map: must be one of {MAP_KINDS}, got {run['map']!r}")
    tol = run["tolerances"]
    if not isinstance(tol, dict):
        raise ConfigError("tolerances: must be an object")
    unknown = set(tol) - TOLERANCE_KEYS
    if unknown:
        raise ConfigError(f"tolerances: unknown check(s) {sorted(unknown)}")
    for k, v in tol.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)) or v < 0:
            raise ConfigError(f"tolerances.{k}: must be a nonnegative number, got {v!r}")


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _setup(loaded: dict):
    cfg = loaded["config"]
    model = build_model(loaded["params"], loaded["grid"])
    problems = validate(model)
    if problems:
        raise ConfigError("model failed validation: " + "; ".join(problems))
    vgrid = VolumeGrid(loaded["L"], loaded["grid"], cfg["M"])
    try:
        vgrid.level_index(float(cfg["y0"]))
    except ValueError as exc:
        raise ConfigError(f"y0: {exc}") from exc
    return cfg, model, vgrid


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def cmd_solve(loaded: dict, out: Path) -> int:
    cfg, model, vgrid = _setup(loaded)
    digest = config_hash(cfg)
    J = solve_dp(model, vgrid)
    D = marginal_left(J)
    W = unconstrained_values(model, vgrid.L)
    (out / "surface.csv").write_text(surface_csv(J, D, W, preamble=f"config_sha256={digest}"),
                                     encoding="utf-8")
    j0 = vgrid.level_index(float(cfg["y0"]))
    _write_json(out / "metadata.json", {
        "config_sha256": digest,
        "config": cfg,
        "grid": {"N": model.N, "M": vgrid.M, "dt": model.dt, "dy": vgrid.dy},
        "value": {"y0": cfg["y0"], "J": float(J.J[0][0, j0])},
        "files": ["surface.csv"],
    })
    print(f"J(0, y0={cfg['y0']}) = {J.J[0][0, j0]:.12g}; wrote {out / 'surface.csv'}")
    return 0


def cmd_verify(loaded: dict, out: Path, surface: str | None = None) -> int:
    cfg, model, vgrid = _setup(loaded)
    digest = config_hash(cfg)
    if surface is not None:
        try:
            J = read_surface_csv(Path(surface).read_text(encoding="utf-8"), model, vgrid)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"surface: {exc}") from exc
    else:
        J = solve_dp(model, vgrid)
    D = marginal_left(J)
    reports = run_all(model, J, D, seed=cfg["seed"], n_random=cfg["n_random"],
                      y0=float(cfg["y0"]), tolerances=cfg["tolerances"])
    ok = all(r.passed for r in reports)
    _write_json(out / "verify.json", {
        "config_sha256": digest,
        "config": cfg,
        "all_pass": ok,
        "checks": [r.to_dict() for r in reports],
    })
    for r in reports:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:32s} max={r.max_residual:.3e} tol={r.tolerance:.3e}")
    return 0 if ok else 2


def cmd_price(loaded: dict, out: Path) -> int:
    cfg, model, vgrid = _setup(loaded)
    digest = config_hash(cfg)
    info = {k: cfg[k] for k in sorted(model_keys(cfg["kind"])) if k in cfg}
    rep = price(model, vgrid, float(cfg["y0"]), cfg["n_paths"], cfg["seed"], cfg["map"], info)
    doc = rep.to_dict()
    doc["config_sha256"] = digest
    _write_json(out / "price.json", doc)
    print(f"primal {rep.primal.mean:.6f} +/- {rep.primal.stderr:.6f}  "
          f"dual {rep.dual.mean:.6f} +/- {rep.dual.stderr:.6f}  gap {rep.gap:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swing-bspde", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("solve", "verify", "price"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--paths", type=int, default=None)
        if name == "verify":
            p.add_argument("--surface", default=None, help="verify J from this CSV instead of solving")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        loaded = load_config(args.config, args.seed, args.paths)
        out = args.out or loaded["out"]
        if not out:
            raise ConfigError("out: no output directory (use --out)")
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "solve":
            return cmd_solve(loaded, out)
        if args.command == "verify":
            return cmd_verify(loaded, out, args.surface)
        return cmd_price(loaded, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
