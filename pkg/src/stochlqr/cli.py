"""Command-line front end.

Subcommands::

    stochlqr solve    --config cfg.json [--out prefix]
    stochlqr simulate --config cfg.json [--out prefix] [--seed N]
    stochlqr adp      --config cfg.json [--out prefix] [--seed N]
    stochlqr sweep    --config cfg.json [--out prefix] [--seed N]
                      [--threads N] [--dry-run]

The config file is JSON with a mandatory "system" block (inline matrices
or {"preset": "sensorimotor-arm", "params": {...}}) plus a block named
after the subcommand.  Every referenced value is validated before any
computation or file output.  Exit codes: 0 success, 2 configuration
errors, 3 numerical failures (singular operators, excitation/rank
failures, divergence, inadmissible gains), 4 iteration budget exhausted
(partial results are still written).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__, adp, harness, riccati
from .errors import (
    AdmissibilityError,
    ConfigError,
    ConvergenceError,
    DivergenceError,
    ExcitationError,
    SingularOperatorError,
    StochLqrError,
)
from .model import default_initial_gain, load_system, validate_system
from .sde import (
    ExplorationSignal,
    SampledPlant,
    default_exploration,
    simulate,
    write_trajectory_csv,
    zero_exploration,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_BUDGET = 4

_NUMERICAL = (SingularOperatorError, ExcitationError, DivergenceError,
              AdmissibilityError)


def _fail(message, code) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _load_config(path) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    return doc


def _build_system(doc):
    if "system" not in doc:
        raise ConfigError("config is missing the \"system\" block")
    try:
        system, x0 = load_system(doc["system"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc
    issues = validate_system(system)
    if issues:
        raise ConfigError("; ".join(issues))
    return system, x0


def _exploration_from(spec, channels) -> ExplorationSignal:
    if spec is None:
        return default_exploration(channels)
    if not isinstance(spec, dict):
        raise ConfigError("exploration spec must be a JSON object")
    spec = dict(spec)
    kind = spec.pop("kind", "multisine")
    try:
        if kind == "zero":
            _reject_unknown(spec, ())
            return zero_exploration(channels)
        if kind == "multisine":
            if "amplitudes" in spec or "frequencies" in spec:
                return ExplorationSignal(
                    kind="sum-of-sinusoids",
                    amplitudes=tuple(spec.pop("amplitudes")),
                    frequencies=tuple(spec.pop("frequencies")),
                    phases=tuple(spec.pop("phases", (0.0,) * channels)),
                    noise_std=float(spec.pop("noise_std", 0.0)),
                )
            keys = ("amplitude", "count", "freq_lo", "freq_hi", "noise_std")
            kwargs = {k: spec.pop(k) for k in keys if k in spec}
            _reject_unknown(spec, ())
            return default_exploration(channels, **kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad exploration spec: {exc}") from exc
    raise ConfigError(f"unknown exploration kind {kind!r}")


def _reject_unknown(spec, allowed):
    extra = [k for k in spec if k not in allowed]
    if extra:
        raise ConfigError(f"unknown exploration keys: {', '.join(sorted(extra))}")


def _gain_from(doc, system):
    if "initial_gain" in doc:
        gain = np.asarray(doc["initial_gain"], dtype=float)
        if gain.shape != (system.m, system.n):
            raise ConfigError(
                f"initial_gain must have shape {(system.m, system.n)}, got {gain.shape}")
        return gain
    return default_initial_gain(system)


def _echo(system_doc, block_name, block, seed, out):
    return {
        "version": __version__,
        "system": system_doc,
        block_name: block,
        "seed": seed,
        "output_prefix": out,
    }


def _dump_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_solve(args) -> int:
    doc = _load_config(args.config)
    system, _ = _build_system(doc)
    block = doc.get("solve", {})
    gain0 = _gain_from(block, system)
    solution = riccati.solve(system, gain0,
                             tol=float(block.get("tol", 1e-12)),
                             max_iter=int(block.get("max_iter", 64)))
    out_doc = {
        "P_star": solution.P_star.tolist(),
        "K_star": solution.K_star.tolist(),
        "iterations": solution.iterations,
        "final_residual": solution.final_residual,
        "config": _echo(doc["system"], "solve", block, None, args.out),
    }
    print(json.dumps(out_doc, indent=2, sort_keys=True))
    if args.out:
        _dump_json(f"{args.out}_solution.json", out_doc)
    return EXIT_OK


def cmd_simulate(args) -> int:
    doc = _load_config(args.config)
    system, x0 = _build_system(doc)
    block = doc.get("simulate", {})
    h = float(block.get("h", 0.01))
    duration = float(block.get("duration", 1.0))
    seed = args.seed if args.seed is not None else int(block.get("seed", 0))
    explore = _exploration_from(block.get("exploration"), system.m)
    if "gain" in block:
        gain = np.asarray(block["gain"], dtype=float)
    else:
        gain = _gain_from(block, system)
    traj = simulate(system, gain, explore, 0.0, duration, h, seed,
                    x0=block.get("x0", x0))
    prefix = args.out or "run"
    path = f"{prefix}_trajectory.csv"
    write_trajectory_csv(traj, path, header_comment=f"stochlqr {__version__} seed={seed}")
    final = traj.states[-1]
    print(f"wrote {path}: {traj.states.shape[0]} samples, "
          f"final |x| = {float(np.linalg.norm(final)):.6g}")
    return EXIT_OK


def cmd_adp(args) -> int:
    doc = _load_config(args.config)
    system, x0 = _build_system(doc)
    block = doc.get("adp", {})
    if "h" not in block or "delta_t" not in block:
        raise ConfigError("adp block must set \"h\" and \"delta_t\"")
    seed = args.seed if args.seed is not None else int(block.get("seed", 0))
    explore = _exploration_from(block.get("exploration"), system.m)
    gain0 = _gain_from(block, system)
    try:
        config = adp.AdpConfig(
            h=float(block["h"]),
            delta_t=float(block["delta_t"]),
            num_intervals=(None if block.get("num_intervals") is None
                           else int(block["num_intervals"])),
            n_mc=int(block.get("n_mc", 1)),
            max_iter=int(block.get("max_iter", 16)),
            tol=float(block.get("tol", 1e-5)),
            mode=str(block.get("mode", "least-squares")),
            seed=seed,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad adp block: {exc}") from exc
    plant = SampledPlant(system, x0)
    result = adp.run_adp(plant, gain0, system.Q, system.R, explore, config)

    prefix = args.out or "run"
    echo = _echo(doc["system"], "adp", block, seed, prefix)
    result.write_json(f"{prefix}_adp.json", config_echo=echo)
    result.write_csv(f"{prefix}_iters.csv")
    status = "converged" if result.converged else "max_iter reached"
    print(f"{status} after {result.iterations} iterations; "
          f"wrote {prefix}_adp.json, {prefix}_iters.csv")
    return EXIT_OK if result.converged else EXIT_BUDGET


def cmd_sweep(args) -> int:
    doc = _load_config(args.config)
    system, x0 = _build_system(doc)
    block = doc.get("sweep", {})
    seed = args.seed if args.seed is not None else int(block.get("seed", 0))
    explore = (None if "exploration" not in block
               else _exploration_from(block["exploration"], system.m))
    defaults = harness.SweepConfig
    try:
        config = harness.SweepConfig(
            h_list=tuple(block.get("h_list", defaults.h_list)),
            delta_t=float(block.get("delta_t", defaults.delta_t)),
            num_intervals=(None if block.get("num_intervals") is None
                           else int(block["num_intervals"])),
            n_mc=(None if block.get("n_mc") is None else int(block["n_mc"])),
            n_mc_cap=int(block.get("n_mc_cap", defaults.n_mc_cap)),
            max_iter=int(block.get("max_iter", defaults.max_iter)),
            tol=float(block.get("tol", defaults.tol)),
            mode=str(block.get("mode", defaults.mode)),
            seed=seed,
            threads=args.threads,
            exploration=explore,
            cost_paths=int(block.get("cost_paths", defaults.cost_paths)),
            cost_h=float(block.get("cost_h", defaults.cost_h)),
        )
        harness._validate_h_list(config.h_list, config.delta_t)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad sweep block: {exc}") from exc

    prefix = args.out or "sweep"
    if args.dry_run:
        plan = {
            "h_list": list(config.h_list),
            "delta_t": config.delta_t,
            "n_mc": config.n_mc if config.n_mc is not None
                    else f"auto (start {config.n_mc_init}, cap {config.n_mc_cap})",
            "threads": config.threads,
            "seed": seed,
            "outputs": [f"{prefix}.csv", f"{prefix}.json",
                        f"{prefix}_err.svg", f"{prefix}_cost.svg"],
        }
        print(json.dumps(plan, indent=2, sort_keys=True))
        return EXIT_OK

    records = harness.sweep_h(system, x0, config)
    fits = {}
    for field in ("err_P", "err_K", "JE_exact", "JE_hat"):
        try:
            fits[field] = harness.fit_rate(records, field)
        except ValueError:
            pass
    echo = _echo(doc["system"], "sweep", block, seed, prefix)
    echo["threads"] = args.threads
    harness.emit_report(records, fits, prefix, config_echo=echo)
    for name, fit in fits.items():
        print(f"{name}: slope {fit.slope:.4f}  intercept {fit.intercept:.6g}  "
              f"R^2 {fit.r_squared:.4f}  ({fit.points_used} points)")
    failed = [r for r in records if r.error is not None]
    for rec in failed:
        print(f"h={rec.h}: {rec.error}", file=sys.stderr)
    print(f"wrote {prefix}.csv, {prefix}.json and 2 plots")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stochlqr",
        description="Model-free policy iteration for stochastic LQR: "
                    "solve, simulate, learn, and sweep.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", required=True, help="path to JSON config")
        p.add_argument("--out", default=None, help="output path prefix")
        if seed:
            p.add_argument("--seed", type=int, default=None,
                           help="override the config seed")

    p = sub.add_parser("solve", help="model-based Riccati solve")
    common(p, seed=False)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("simulate", help="simulate one trajectory to CSV")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("adp", help="run data-driven policy iteration")
    common(p)
    p.set_defaults(func=cmd_adp)

    p = sub.add_parser("sweep", help="sampling-period sweep with rate fits")
    common(p)
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads across h points")
    p.add_argument("--dry-run", action="store_true",
                   help="validate the config, print the plan, run nothing")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    except _NUMERICAL as exc:
        return _fail(f"{type(exc).__name__}: {exc}", EXIT_NUMERICAL)
    except ConvergenceError as exc:
        return _fail(f"{type(exc).__name__}: {exc}", EXIT_BUDGET)
    except StochLqrError as exc:
        return _fail(f"{type(exc).__name__}: {exc}", EXIT_NUMERICAL)
    except OSError as exc:
        return _fail(str(exc), EXIT_CONFIG)


if __name__ == "__main__":
    sys.exit(main())
