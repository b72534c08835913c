"""Command-line entry point: simulate, filter, solve, regions, backtest, validate.

Every command reads an optional JSON config with the keys ``model`` (market
parameters), ``solve`` (grid and solver settings), ``prior`` (initial regime
law), ``init`` (initial price and deviation) and ``x0`` (initial inventory),
validates it, and only then writes into the output directory.

Exit codes: 0 success, 2 invalid input, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numba
import numpy as np

from .filtering import FilterState, map_estimate, run_filter
from .model import ModelParams, UnsupportedConfiguration, require_symmetric_pair, validate_stability
from .simulate import FLOAT_FMT, ExplosionError, read_path_csv, simulate_path, write_path_csv
from .solver import Solution, SolveConfig, backtest, extract_regions, solve

log = logging.getLogger("hawkes_exec")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3
CONFIG_KEYS = {"model", "solve", "prior", "init", "x0"}

# belief and intensity values at which the region and order-size slices are taken
REGION_MU = (0.9, 0.5, 0.1)
REGION_KAPPAS = ((5.0, 1.0), (3.0, 3.0), (1.0, 5.0))


class InvalidInput(ValueError):
    pass


@dataclass
class RunConfig:
    params: ModelParams = field(default_factory=ModelParams)
    solve: SolveConfig = field(default_factory=SolveConfig)
    prior: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5]))
    init: tuple = (10.0, 0.0)
    x0: float = 2.0

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - CONFIG_KEYS
        if unknown:
            raise InvalidInput(f"unknown config keys: {sorted(unknown)}")
        params = ModelParams.from_dict(doc.get("model", {}))
        solve_cfg = SolveConfig.from_dict(doc.get("solve", {}))
        prior = _prior(doc.get("prior", [1.0 / params.d] * params.d), params.d)
        init = tuple(float(v) for v in doc.get("init", (10.0, 0.0)))
        if len(init) != 2:
            raise InvalidInput("init must be [price, deviation]")
        x0 = float(doc.get("x0", 2.0))
        if x0 <= 0:
            raise InvalidInput("x0 must be > 0")
        return cls(params, solve_cfg, prior, init, x0)


def _prior(values, d: int) -> np.ndarray:
    prior = np.asarray(values, dtype=float)
    if prior.shape != (d,) or np.any(prior < 0) or abs(prior.sum() - 1.0) > 1e-9:
        raise InvalidInput(f"prior must be {d} nonnegative numbers summing to 1, got {values}")
    return prior


def _parse_prior(text: str, d: int) -> np.ndarray:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise InvalidInput(f"cannot parse prior {text!r}") from None
    return _prior(values, d)


def _fmt(v) -> str:
    return FLOAT_FMT.format(v)


def _load_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InvalidInput(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise InvalidInput("config must be a JSON object")
    return RunConfig.from_dict(doc)


def _load_solution(path: str) -> Solution:
    try:
        return Solution.from_json(Path(path).read_text())
    except FileNotFoundError:
        raise InvalidInput(f"field file not found: {path}") from None
    except (json.JSONDecodeError, KeyError) as exc:
        raise InvalidInput(f"field file {path} is malformed: {exc}") from None


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, (int, np.integer, str)) else _fmt(v) for v in row])


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_simulate(args, cfg: RunConfig, out: Path) -> None:
    if args.paths < 1:
        raise InvalidInput("--paths must be >= 1")
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.paths):
        seed = args.seed + k
        path = simulate_path(cfg.params, seed, initial=cfg.prior)
        with (out / f"path_{seed:06d}.csv").open("w", newline="") as fh:
            write_path_csv(fh, cfg.params, path, cfg.init)
    log.info("wrote %d path file(s) to %s", args.paths, out)


def _filter_rows(params: ModelParams, path, traj):
    rows, hits, known = [], 0, 0
    for n, t in enumerate(traj.times):
        if path.regime_path is not None:
            true = int(path.regime_path.at(t))
        elif traj.is_event[n]:
            k = int(np.searchsorted(path.times, t))
            true = int(path.regimes[k]) if path.regimes[k] > 0 else None
        else:
            true = None
        guess = map_estimate(traj.pi[n])
        if true is not None:
            known += 1
            hits += guess == true
        lam = traj.lambdas[n]
        rows.append([t, *traj.pi[n], *lam[:, 0], *lam[:, 1], guess, "" if true is None else true])
    return rows, hits, known


def cmd_filter(args, cfg: RunConfig, out: Path) -> None:
    params = cfg.params
    prior = _parse_prior(args.prior, params.d)
    if args.grid < 2:
        raise InvalidInput("--grid must be >= 2")
    if (args.path is None) == (args.simulate is None):
        raise InvalidInput("give exactly one of --path FILE or --simulate N")
    if args.simulate is not None and args.simulate < 1:
        raise InvalidInput("--simulate must be >= 1")
    if args.path is not None:
        try:
            with open(args.path, newline="") as fh:
                paths = [(Path(args.path).stem, read_path_csv(fh, params.horizon))]
        except FileNotFoundError:
            raise InvalidInput(f"path file not found: {args.path}") from None
        except ValueError as exc:
            raise InvalidInput(f"{args.path}: {exc}") from None
    else:
        paths = [(f"{args.seed + k:06d}", simulate_path(params, args.seed + k, initial=prior))
                 for k in range(args.simulate)]
    out.mkdir(parents=True, exist_ok=True)
    d = params.d
    header = (["time"] + [f"pi_{i}" for i in range(1, d + 1)] + [f"lambda_{i}_plus" for i in range(1, d + 1)]
              + [f"lambda_{i}_minus" for i in range(1, d + 1)] + ["map_estimate", "true_regime"])
    grid = np.linspace(0.0, params.horizon, args.grid)
    per_path, hits, known = {}, 0, 0
    for name, path in paths:
        traj = run_filter(params, path, FilterState.initial(params, prior), output_grid=grid)
        rows, h, k = _filter_rows(params, path, traj)
        _write_rows(out / f"filter_{name}.csv", header, rows)
        per_path[name] = h / k if k else None
        hits, known = hits + h, known + k
    summary = {"n_paths": len(paths), "prior": prior.tolist(),
               "map_accuracy": hits / known if known else None, "per_path_accuracy": per_path}
    _write_json(out / "filter_summary.json", summary)
    log.info("MAP accuracy %s over %d path(s)", summary["map_accuracy"], len(paths))


def cmd_solve(args, cfg: RunConfig, out: Path) -> None:
    solve_cfg = cfg.solve
    if args.n_max is not None:
        if args.n_max < 0:
            raise InvalidInput("--n-max must be >= 0")
        solve_cfg.n_max = args.n_max
    try:
        require_symmetric_pair(cfg.params)
        solve_cfg.grid.axes(cfg.params)
    except (UnsupportedConfiguration, ValueError) as exc:
        raise InvalidInput(str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    solution = solve(cfg.params, solve_cfg)
    (out / args.name).write_text(solution.to_json())
    log.info("solved in %d sweep(s), converged=%s, last sup-change %s", solution.iterations, solution.converged,
             solution.sup_changes[-1] if solution.sup_changes else None)


def _region_files(solution: Solution, x_slice: float):
    """(file name, slice rows) for the kappa, belief/inventory and order-size maps."""
    params, axes = solution.params, solution.field.axes
    kap = np.linspace(axes[3][0], axes[3][-1], 21)
    mus = np.linspace(0.0, 1.0, 21)
    xs = np.linspace(axes[1][0], axes[1][-1], 21)
    tag = f"c{_fmt(params.lob_c)}"
    for mu in REGION_MU:
        fixed = {"t": 0.0, "x": x_slice, "dev": 0.0, "mu": mu}
        yield f"region_kappa_mu{_fmt(mu)}_{tag}.csv", extract_regions(solution, "kp", kap, "km", kap, fixed)
    for kp, km in REGION_KAPPAS:
        fixed = {"t": 0.0, "dev": 0.0, "kp": kp, "km": km}
        rows = extract_regions(solution, "mu", mus, "x", xs, fixed)
        yield f"region_mu_x_kp{_fmt(kp)}_km{_fmt(km)}_{tag}.csv", rows


def cmd_regions(args, cfg: RunConfig, out: Path) -> None:
    solutions = [_load_solution(f) for f in args.field]
    for sol in solutions:
        if not sol.field.axes[1][0] <= args.x <= sol.field.axes[1][-1]:
            raise InvalidInput(f"--x {args.x} lies outside the inventory grid")
    out.mkdir(parents=True, exist_ok=True)
    for sol in solutions:
        for name, rows in _region_files(sol, args.x):
            _write_rows(out / name, ["a", "b", "trade", "xi_star", "g_value"], rows)
    log.info("wrote region maps for %d field(s) to %s", len(solutions), out)


def cmd_backtest(args, cfg: RunConfig, out: Path) -> None:
    if args.paths < 1:
        raise InvalidInput("--paths must be >= 1")
    solution = _load_solution(args.field)
    out.mkdir(parents=True, exist_ok=True)
    rows, summary = backtest(solution.policy(), args.paths, args.seed, cfg.x0, cfg.init, cfg.prior)
    _write_rows(out / "backtest.csv", ["seed", "revenue_opt", "revenue_immediate", "revenue_tranches"], rows)
    _write_json(out / "backtest_summary.json", summary)
    log.info("mean revenue opt %.6g, immediate %.6g, tranches %.6g", summary["mean_opt"],
             summary["mean_immediate"], summary["mean_tranches"])


def cmd_validate(args, cfg: RunConfig, out: Path) -> None:
    report = validate_stability(cfg.params, warn=False).to_dict()
    report["stable"] = all(report[k] for k in ("A1", "A2", "A3", "A4"))
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "validate.json", report)
    print(json.dumps(report, indent=2, sort_keys=True))


# ---------------------------------------------------------------- parser


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    """Global flags, accepted before or after the command name."""
    # after the command, unset flags must not overwrite values given before it
    default = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=default(None), help="JSON config file (model, solve, prior, init, x0)")
    common.add_argument("--out", default=default("."), help="output directory")
    common.add_argument("--seed", type=int, default=default(0), help="master seed")
    common.add_argument("--threads", type=int, default=default(None), help="numba worker threads")
    common.add_argument("-v", "--verbose", action="store_true", default=default(False))
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="hawkes-exec", description=__doc__.splitlines()[0],
                                     parents=[_global_flags(suppress=False)])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate order paths to CSV")
    p.add_argument("--paths", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("filter", parents=[common], help="run the regime filter on a path")
    p.add_argument("--path", help="path CSV written by simulate")
    p.add_argument("--simulate", type=int, help="filter N freshly simulated paths instead")
    p.add_argument("--prior", required=True, help="initial regime law, e.g. 0.5,0.5")
    p.add_argument("--grid", type=int, default=101, help="uniform output times besides the orders")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("solve", parents=[common], help="value iteration; writes the field JSON")
    p.add_argument("--n-max", type=int, default=None)
    p.add_argument("--name", default="field.json")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("regions", parents=[common], help="trade region and order-size slices")
    p.add_argument("--field", action="append", required=True, help="field JSON (repeatable)")
    p.add_argument("--x", type=float, default=2.0, help="inventory for the kappa slices")
    p.set_defaults(func=cmd_regions)

    p = sub.add_parser("backtest", parents=[common], help="policy against the two baselines")
    p.add_argument("--field", required=True)
    p.add_argument("--paths", type=int, default=2000)
    p.set_defaults(func=cmd_backtest)

    p = sub.add_parser("validate", parents=[common], help="stability diagnostics")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.seed < 0:
            raise InvalidInput("--seed must be >= 0")
        if args.threads is not None:
            if not 1 <= args.threads <= numba.config.NUMBA_NUM_THREADS:
                raise InvalidInput(f"--threads must lie in [1, {numba.config.NUMBA_NUM_THREADS}]")
            numba.set_num_threads(args.threads)
        cfg = _load_config(args.config)
        args.func(args, cfg, Path(args.out))
    except (InvalidInput, UnsupportedConfiguration) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        # parameter constructors raise ValueError for out-of-range values
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ExplosionError, ArithmeticError, OSError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
