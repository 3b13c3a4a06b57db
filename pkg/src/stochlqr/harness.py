"""Experiment orchestration: h-sweeps, cost estimation, rate fits, reports.

The central experiment runs the data-driven learner at a ladder of sampling
periods h against the model-based Riccati solution, then fits the error
decay on a log-log scale.  The companion cost experiment estimates the
closed-loop expected cost both by Monte Carlo and as Tr(P X0).

Reproducibility contract: a sweep with a fixed master seed emits
byte-identical CSV/JSON no matter how many worker threads were used.  All
per-record randomness is keyed by the record's position in the h ladder,
never by scheduling order, and reductions run in fixed index order.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import json
import math
import time
from dataclasses import dataclass

import numpy as np

from . import adp, linops, riccati
from .errors import AdmissibilityError, ConfigError, StochLqrError
from .model import InitialState
from .sde import default_exploration, simulate_given_increments, zero_exploration

__all__ = [
    "SweepConfig",
    "SweepRecord",
    "RateFit",
    "expected_cost_exact",
    "expected_cost_mc",
    "sweep_h",
    "fit_rate",
    "emit_report",
    "quadrature_refinement_study",
]

CSV_HEADER = "h,n_mc,iters,err_P_fro,err_K_fro,JE_hat,JE_hat_stderr,JE_exact,seed,wall_time_s"


@dataclass(frozen=True)
class SweepRecord:
    """One h-point of a sweep.  ``error`` is None on success, otherwise the
    failure message (failed points keep their row; numeric fields are nan)."""

    h: float
    n_mc: int
    iterations: int
    err_P: float
    err_K: float
    je_hat: float
    je_hat_stderr: float
    je_exact: float
    seed: int
    wall_time: float
    mc_stderr: float
    je_exact_stderr: float
    converged: bool
    error: str = None


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    points_used: int
    intercept_stderr: float


@dataclass(frozen=True)
class SweepConfig:
    """Knobs for :func:`sweep_h`.

    ``n_mc=None`` auto-tunes the run count: doubling from ``n_mc_init`` at
    the largest h until the Monte Carlo standard error of err_P drops below
    ``target_rel_stderr`` of its value, then each h point doubles further
    (up to ``n_mc_cap``, skipping sizes the 1/sqrt(N) law rules out) until
    its own stderr meets the same relative target — the error shrinks with
    h, so finer points need more runs for the rate fit not to bottom out
    on sampling noise.
    ``num_intervals=None`` uses twice the square count n^2 + nm + m^2
    (the extra rows condition the averaged regression).
    ``exploration=None`` builds the default multi-sine signal for the
    system's input dimension.
    """

    h_list: tuple = (0.04, 0.02, 0.01, 0.005, 0.0025, 0.00125)
    delta_t: float = 0.2
    num_intervals: int = None
    n_mc: int = None
    n_mc_init: int = 128
    n_mc_cap: int = 4096
    target_rel_stderr: float = 0.2
    max_iter: int = 8
    tol: float = 1e-5
    mode: str = "least-squares"
    rcond: float = 1e-10
    seed: int = 0
    threads: int = 1
    stderr_groups: int = 8
    exploration: object = None
    initial_gain: object = None
    cost_paths: int = 256
    cost_h: float = 0.002
    cost_horizon: float = None
    path_batch: int = 128


def expected_cost_exact(p_mat, x0_cov) -> float:
    """Tr(P X0): the closed-loop expected cost for value matrix P and
    initial covariance X0."""
    p_mat = np.asarray(p_mat, dtype=float)
    x0_cov = np.asarray(x0_cov, dtype=float)
    if p_mat.shape != x0_cov.shape or p_mat.ndim != 2 or p_mat.shape[0] != p_mat.shape[1]:
        raise ValueError(f"shape mismatch: P {p_mat.shape} vs X0 {x0_cov.shape}")
    return float(np.trace(p_mat @ x0_cov))


def _derived_seed(master, *key) -> int:
    return int(np.random.SeedSequence(entropy=master, spawn_key=key).generate_state(1)[0])


def _second_moment(x0, n) -> np.ndarray:
    """E[x0 x0'] for the three accepted initial-state forms."""
    if isinstance(x0, InitialState):
        return x0.cov + np.outer(x0.mean, x0.mean)
    if x0 is None:
        return np.zeros((n, n))
    vec0 = np.asarray(x0, dtype=float)
    return np.outer(vec0, vec0)


def expected_cost_mc(system, gain, x0, horizon=None, h_sim=0.002, n_paths=256,
                     seed=0, path_batch=256):
    """Monte Carlo estimate of E[integral of x'Qx + u'Ru] under u = -Kx.

    Returns ``(estimate, stderr)``.  The horizon defaults to eight time
    constants of the slowest mean-square mode; the left-Riemann sum at step
    ``h_sim`` plays the role of the (truncated) infinite-horizon integral.
    """
    gain = np.asarray(gain, dtype=float)
    report = linops.mean_square_stability(system, gain)
    if not report.is_stable:
        raise AdmissibilityError(
            f"gain is not mean-square stabilizing (abscissa "
            f"{report.spectral_abscissa:.3e}); the infinite-horizon cost diverges"
        )
    if horizon is None:
        horizon = 8.0 / abs(report.spectral_abscissa)
    steps = int(round(horizon / h_sim))
    horizon = steps * h_sim
    explore = zero_exploration(system.m)
    q_mat, r_mat = system.Q, system.R
    costs = np.empty(n_paths)
    for lo in range(0, n_paths, path_batch):
        keys = [(i,) for i in range(lo, min(lo + path_batch, n_paths))]
        batch = _plant_sim(system, x0, gain, explore, horizon, h_sim, seed, keys)
        xs, us = batch.states[:, :-1, :], batch.inputs
        run = (np.einsum("ptj,jk,ptk->p", xs, q_mat, xs)
               + np.einsum("ptj,jk,ptk->p", us, r_mat, us)) * h_sim
        costs[lo: lo + len(keys)] = run
    estimate = float(costs.mean())
    stderr = float(costs.std(ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else float("nan")
    return estimate, stderr


def _plant_sim(system, x0, gain, explore, duration, h, seed, keys):
    from .sde import simulate_batch

    return simulate_batch(system, gain, explore, 0.0, duration, h, seed,
                          spawn_keys=keys, x0=x0, check_admissible=False)


def _resolve(config: SweepConfig, system):
    explore = config.exploration
    if explore is None:
        explore = default_exploration(system.m)
    gain0 = config.initial_gain
    if gain0 is None:
        from .model import default_initial_gain

        gain0 = default_initial_gain(system)
    return explore, np.asarray(gain0, dtype=float)


def _default_intervals(system) -> int:
    n, m = system.n, system.m
    return 2 * (n * n + n * m + m * m)


def _run_one_h(system, x0, config, oracle, explore, gain0, idx, h, n_mc) -> SweepRecord:
    record_seed = _derived_seed(config.seed, idx)
    num_intervals = (config.num_intervals if config.num_intervals is not None
                     else _default_intervals(system))
    start = time.perf_counter()
    try:
        adp_config = adp.AdpConfig(
            h=h, delta_t=config.delta_t, num_intervals=num_intervals,
            n_mc=n_mc, max_iter=config.max_iter, tol=config.tol,
            mode=config.mode, rcond=config.rcond, seed=record_seed,
            path_batch=config.path_batch, stderr_groups=config.stderr_groups,
        )
        plant = _SweepPlant(system, x0)
        result = adp.run_adp(plant, gain0, system.Q, system.R, explore, adp_config)
        err_p = float(np.linalg.norm(result.P_final - oracle.P_star, "fro"))
        err_k = float(np.linalg.norm(result.K_final - oracle.K_star, "fro"))
        x0_cov = _second_moment(x0, system.n)
        je_exact = expected_cost_exact(result.P_final, x0_cov)
        group_err = [float(np.linalg.norm(p - oracle.P_star, "fro"))
                     for p in result.group_P_final]
        group_je = [expected_cost_exact(p, x0_cov) for p in result.group_P_final]
        g = len(group_err)
        mc_stderr = float(np.std(group_err, ddof=1) / math.sqrt(g)) if g > 1 else float("nan")
        je_exact_stderr = (float(np.std(group_je, ddof=1) / math.sqrt(g))
                           if g > 1 else float("nan"))
        je_hat, je_hat_stderr = expected_cost_mc(
            system, result.K_final, x0, horizon=config.cost_horizon,
            h_sim=config.cost_h, n_paths=config.cost_paths,
            seed=_derived_seed(config.seed, idx, 1))
        return SweepRecord(
            h=h, n_mc=n_mc, iterations=result.iterations, err_P=err_p,
            err_K=err_k, je_hat=je_hat, je_hat_stderr=je_hat_stderr,
            je_exact=je_exact, seed=record_seed,
            wall_time=time.perf_counter() - start, mc_stderr=mc_stderr,
            je_exact_stderr=je_exact_stderr, converged=result.converged,
        )
    except StochLqrError as exc:
        nan = float("nan")
        return SweepRecord(
            h=h, n_mc=n_mc, iterations=0, err_P=nan, err_K=nan, je_hat=nan,
            je_hat_stderr=nan, je_exact=nan, seed=record_seed,
            wall_time=time.perf_counter() - start, mc_stderr=nan,
            je_exact_stderr=nan, converged=False,
            error=f"{type(exc).__name__}: {exc}",
        )


class _SweepPlant:
    """Minimal sampled-plant adapter used by the sweep."""

    def __init__(self, system, x0):
        self._system = system
        self._x0 = x0

    @property
    def n(self):
        return self._system.n

    @property
    def m(self):
        return self._system.m

    def simulate_batch(self, gain, explore, duration, h, seed, spawn_keys):
        from .sde import simulate_batch

        return simulate_batch(self._system, gain, explore, 0.0, duration, h,
                              seed, spawn_keys=spawn_keys, x0=self._x0,
                              check_admissible=False)


def _validate_h_list(h_list, delta_t):
    if len(h_list) < 4:
        raise ConfigError(f"h_list needs at least 4 values, got {len(h_list)}")
    hs = [float(h) for h in h_list]
    if any(h <= 0 for h in hs):
        raise ConfigError("h values must be positive")
    if max(hs) / min(hs) < 10.0 * (1.0 - 1e-12):
        raise ConfigError(
            f"h_list must span at least one decade (got ratio {max(hs) / min(hs):.3g})")
    for h in hs:
        ratio = delta_t / h
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio) or round(ratio) < 1:
            raise ConfigError(f"h={h} does not divide delta_t={delta_t} exactly")
    if len(set(hs)) != len(hs):
        # duplicates are allowed (Monte Carlo consistency checks use them)
        pass
    return hs


def sweep_h(system, x0, config: SweepConfig, oracle=None):
    """Run the learner across config.h_list and score it against the
    model-based solution.  Returns records sorted by h descending.

    Per-h failures are captured in their record instead of aborting the
    sweep.  ``oracle`` (a RiccatiSolution) is computed on the fly when not
    supplied.
    """
    hs = _validate_h_list(config.h_list, config.delta_t)
    explore, gain0 = _resolve(config, system)
    if oracle is None:
        oracle = riccati.solve(system, gain0)

    order = sorted(range(len(hs)), key=lambda i: -hs[i])
    auto = config.n_mc is None
    if auto:
        base_n_mc = _tune_n_mc(system, x0, config, oracle, explore, gain0,
                               order[0], hs[order[0]])
    else:
        base_n_mc = config.n_mc

    def _meets_target(rec):
        return (rec.error is None and np.isfinite(rec.mc_stderr)
                and rec.mc_stderr <= config.target_rel_stderr * rec.err_P)

    def job(i):
        n_mc = base_n_mc
        rec = _run_one_h(system, x0, config, oracle, explore, gain0, i, hs[i], n_mc)
        while auto and not _meets_target(rec) and n_mc * 2 <= config.n_mc_cap:
            n_mc = min(_next_n_mc(rec, n_mc, config), config.n_mc_cap)
            rec = _run_one_h(system, x0, config, oracle, explore, gain0, i, hs[i], n_mc)
        return rec

    if config.threads > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=config.threads) as pool:
            results = list(pool.map(job, order))
    else:
        results = [job(i) for i in order]
    # pool.map preserves submission order, so records come back sorted by h
    # descending independent of completion order.
    return results


def _next_n_mc(rec, n_mc, config) -> int:
    """Run count for the next attempt after a missed stderr target: at
    least one doubling, more when the 1/sqrt(N) law says a single doubling
    cannot close the gap.  Each attempt re-runs the learner from scratch,
    so sizes predicted to fail anyway are skipped."""
    doublings = 1
    if rec.error is None and np.isfinite(rec.mc_stderr) and rec.err_P > 0:
        need = (rec.mc_stderr / (config.target_rel_stderr * rec.err_P)) ** 2
        if need > 0:
            # 25% headroom: the stderr estimate itself is noisy
            doublings = max(1, math.ceil(math.log2(1.25 * need)))
    return n_mc * (2 ** doublings)


def _tune_n_mc(system, x0, config, oracle, explore, gain0, idx, h_max) -> int:
    n_mc = config.n_mc_init
    while True:
        rec = _run_one_h(system, x0, config, oracle, explore, gain0, idx, h_max, n_mc)
        ok = (rec.error is None and np.isfinite(rec.mc_stderr)
              and rec.mc_stderr <= config.target_rel_stderr * rec.err_P)
        if ok or n_mc * 2 > config.n_mc_cap:
            return n_mc
        n_mc *= 2


def fit_rate(records, field) -> RateFit:
    """Least-squares rate fit over the sweep records.

    ``err_P``/``err_K`` fit log(value) against log(h) (power-law order);
    ``JE_exact``/``JE_hat`` fit value against h directly, so the intercept
    estimates the zero-period cost.  Records carrying an error are skipped.
    """
    attr = {"err_P": "err_P", "err_K": "err_K", "JE_exact": "je_exact",
            "JE_hat": "je_hat", "J_E_hat_minus_intercept": "je_hat"}.get(field)
    if attr is None:
        raise ValueError(f"unknown fit field {field!r}")
    log_mode = field in ("err_P", "err_K")
    pts = [(r.h, getattr(r, attr)) for r in records
           if r.error is None and np.isfinite(getattr(r, attr))]
    if len(pts) < 3:
        raise ValueError(f"need at least 3 valid records for a rate fit, got {len(pts)}")
    hs = np.array([p[0] for p in pts])
    vals = np.array([p[1] for p in pts])
    if log_mode:
        if np.any(vals <= 0):
            raise ValueError("log-log fit requires positive values")
        xs, ys = np.log(hs), np.log(vals)
    else:
        xs, ys = hs, vals
    n_pts = len(xs)
    x_bar, y_bar = xs.mean(), ys.mean()
    sxx = float(np.sum((xs - x_bar) ** 2))
    slope = float(np.sum((xs - x_bar) * (ys - y_bar)) / sxx)
    intercept = float(y_bar - slope * x_bar)
    resid = ys - (slope * xs + intercept)
    ss_res = float(np.sum(resid ** 2))
    ss_tot = float(np.sum((ys - y_bar) ** 2))
    r_squared = 1.0 if ss_tot == 0.0 else max(0.0, min(1.0, 1.0 - ss_res / ss_tot))
    if n_pts > 2:
        sigma2 = ss_res / (n_pts - 2)
        intercept_stderr = math.sqrt(sigma2 * (1.0 / n_pts + x_bar ** 2 / sxx))
    else:
        intercept_stderr = float("nan")
    return RateFit(slope=slope, intercept=intercept, r_squared=r_squared,
                   points_used=n_pts, intercept_stderr=intercept_stderr)


def _csv_cell(value):
    if isinstance(value, float):
        return repr(value)
    return str(value)


def records_to_csv(records) -> str:
    lines = [CSV_HEADER]
    for r in records:
        lines.append(",".join(_csv_cell(v) for v in (
            r.h, r.n_mc, r.iterations, r.err_P, r.err_K, r.je_hat,
            r.je_hat_stderr, r.je_exact, r.seed, r.wall_time)))
    return "\n".join(lines) + "\n"


def emit_report(records, fits, path_prefix, config_echo=None) -> dict:
    """Write <prefix>.csv, <prefix>.json and two SVG plots; returns the
    paths keyed by kind."""
    if not records:
        raise ValueError("no records to report")
    paths = {
        "csv": f"{path_prefix}.csv",
        "json": f"{path_prefix}.json",
        "svg_err": f"{path_prefix}_err.svg",
        "svg_cost": f"{path_prefix}_cost.svg",
    }
    with open(paths["csv"], "w") as fh:
        fh.write(records_to_csv(records))

    doc = {
        "records": [dataclasses.asdict(r) for r in records],
        "fits": {name: dataclasses.asdict(fit) for name, fit in fits.items()},
        "csv_header": CSV_HEADER,
        "horizon_policy": "8 time constants of the slowest mean-square mode",
    }
    if config_echo is not None:
        doc["config"] = config_echo
    with open(paths["json"], "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")

    _plot_report(records, fits, paths)
    return paths


def _plot_report(records, fits, paths):
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "stochlqr"
    import matplotlib.pyplot as plt

    good = [r for r in records if r.error is None]
    hs = np.array([r.h for r in good])

    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for attr, color, label in (("err_P", "tab:blue", "value matrix"),
                               ("err_K", "tab:orange", "gain")):
        vals = np.array([getattr(r, attr) for r in good])
        ax.loglog(hs, vals, "o", color=color, label=f"{label} error")
        fit = fits.get(attr)
        if fit is not None:
            grid = np.array([hs.min(), hs.max()])
            ax.loglog(grid, np.exp(fit.intercept) * grid ** fit.slope, "-",
                      color=color, alpha=0.6,
                      label=f"slope {fit.slope:.2f}")
    ax.set_xlabel("sampling period h")
    ax.set_ylabel("Frobenius error")
    ax.legend(fontsize=8)
    ax.grid(True, which="both", alpha=0.3)
    fig.tight_layout()
    fig.savefig(paths["svg_err"], format="svg", metadata={"Date": None})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    je = np.array([r.je_exact for r in good])
    ax.plot(hs, je, "o", color="tab:green", label="Tr(P X0)")
    je_hat = np.array([r.je_hat for r in good])
    err = np.array([r.je_hat_stderr for r in good])
    if np.all(np.isfinite(je_hat)):
        ax.errorbar(hs, je_hat, yerr=3 * err, fmt="s", color="tab:red",
                    alpha=0.6, label="Monte Carlo cost (3 se)")
    fit = fits.get("JE_exact")
    if fit is not None:
        grid = np.array([0.0, hs.max()])
        ax.plot(grid, fit.intercept + fit.slope * grid, "-", color="tab:green",
                alpha=0.6, label=f"linear fit, intercept {fit.intercept:.4g}")
    ax.set_xlabel("sampling period h")
    ax.set_ylabel("expected cost")
    ax.legend(fontsize=8)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(paths["svg_cost"], format="svg", metadata={"Date": None})
    plt.close(fig)


def quadrature_refinement_study(system, gain, explore, x0, base_h=0.04,
                                levels=4, refine=64, duration=4.0,
                                n_paths=256, seed=0):
    """Self-refinement estimate of the sampling-period error in the state
    quadrature.

    One set of Brownian paths is drawn on a lattice of step base_h/refine;
    each coarser level re-runs the explicit scheme on the same paths with
    block-summed increments, and the left-Riemann sum of E[x (x) x] over
    [0, duration] is compared against the finest level.  Returns
    ``(h_levels, errors, RateFit)`` with the log-log fit of error vs h.
    """
    if refine % (2 ** (levels - 1)) != 0:
        raise ValueError("refine must be divisible by 2**(levels-1)")
    h_fine = base_h / refine
    steps_fine = int(round(duration / h_fine))
    n, m = system.n, system.m
    q1, q2 = len(system.F), len(system.G)

    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(97,)))
    if isinstance(x0, InitialState):
        x0s = x0.mean + rng.standard_normal((n_paths, n)) @ x0.factor().T
    else:
        x0s = np.broadcast_to(np.asarray(x0, dtype=float), (n_paths, n)).copy()
    dw1 = rng.standard_normal((n_paths, steps_fine, q1)) * math.sqrt(h_fine)
    dw2 = rng.standard_normal((n_paths, steps_fine, q2)) * math.sqrt(h_fine)

    def mean_quadrature(h, dw1_h, dw2_h):
        batch = simulate_given_increments(system, gain, explore, x0s, 0.0, h,
                                          dw1_h, dw2_h)
        xs = batch.states[:, :-1, :]
        riemann = np.einsum("pti,ptj->ij", xs, xs) * h / n_paths
        return riemann

    reference = mean_quadrature(h_fine, dw1, dw2)
    h_levels, errors = [], []
    for j in range(levels):
        stride = refine // (2 ** j)
        h_j = h_fine * stride
        steps_j = steps_fine // stride
        dw1_j = dw1[:, : steps_j * stride].reshape(n_paths, steps_j, stride, q1).sum(axis=2)
        dw2_j = dw2[:, : steps_j * stride].reshape(n_paths, steps_j, stride, q2).sum(axis=2)
        err = np.linalg.norm(mean_quadrature(h_j, dw1_j, dw2_j) - reference, "fro")
        h_levels.append(h_j)
        errors.append(float(err))

    fake = [SweepRecord(h=h, n_mc=n_paths, iterations=0, err_P=e, err_K=e,
                        je_hat=0.0, je_hat_stderr=0.0, je_exact=0.0, seed=seed,
                        wall_time=0.0, mc_stderr=0.0, je_exact_stderr=0.0,
                        converged=True)
            for h, e in zip(h_levels, errors)]
    fit = fit_rate(fake, "err_P")
    return h_levels, errors, fit
