"""Data-driven policy iteration (adaptive dynamic programming).

Each iteration evaluates the current gain K from sampled data alone.  Over
an interval [t, t + delta_t] of a path driven by ``u = -K x + e`` the Ito
expansion of x^T P x turns the policy-evaluation Lyapunov equation into a
linear constraint on the stacked unknowns

    s = [vec(P); vec(B^T P); vec(Sigma_P)]

with one row per interval:

    theta = [delta_xx, -2 I_xw, I_xx (K^T (x) K^T) - I_uu],
    xi    = -I_xx vec(Q + K^T R K),

where delta_xx holds endpoint differences of x (x) x, and I_xx, I_uu, I_xw
are left-endpoint (Ito) Riemann sums of x (x) x, u (x) u and x (x) dw_hat.
Averaging theta/xi over independent runs and solving gives P and the
improved gain ``K_next = (Sigma + R)^{-1} B^T P`` from identified blocks
only; the learner never touches A, B, F, G.

Because x (x) x rows only see the symmetric part of P, the stacked
parameterization is rank-deficient in exact arithmetic (the honest unknown
count is n(n+1)/2 + nm + m(m+1)/2).  The default solve is minimum-norm
least squares, which lands on the symmetric representative; a
symmetry-constrained parameterization and a square direct solve (kept for
compatibility with the classic formulation; its condition number blows up
as sampling noise vanishes) are available as modes.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.integrate
import scipy.linalg

from . import linops
from .errors import DivergenceError, ExcitationError, SingularOperatorError
from .model import InitialState
from .sde import exploration_grid

__all__ = [
    "DataMatrices",
    "PolicyEvaluation",
    "AdpConfig",
    "AdpResult",
    "build_data_matrices",
    "assemble_linear_system",
    "average_over_runs",
    "solve_policy_evaluation",
    "run_adp",
    "expected_data_matrices",
    "run_pi_exact",
]

_P_HAT_GUARD = 1e6
_CONDITION_WARN = 1e8


@dataclass(frozen=True)
class DataMatrices:
    """Per-interval quadrature blocks (one row per interval).

    ``delta_xx`` are exact endpoint differences; the integral blocks use
    the Ito convention (left-endpoint sums).  ``h`` is the sampling period
    the blocks were built at (0 marks exact-expectation blocks).
    """

    delta_xx: np.ndarray       # (l, n^2)
    int_xx: np.ndarray         # (l, n^2)
    int_uu: np.ndarray         # (l, m^2)
    int_xw: np.ndarray         # (l, n m)
    interval_bounds: tuple
    h: float


@dataclass(frozen=True)
class PolicyEvaluation:
    """Solution of one policy-evaluation regression."""

    params: np.ndarray         # stacked [vec(P); vec(BtP); vec(Sigma)]
    P: np.ndarray
    BtP: np.ndarray
    Sigma: np.ndarray
    K_next: np.ndarray
    condition: float


def _grid_index(t, t0, h, n_max) -> int:
    k = int(round((t - t0) / h))
    if abs(t - (t0 + k * h)) > 1e-9 * max(1.0, abs(t)) or not (0 <= k <= n_max):
        raise ValueError(f"interval bound {t!r} is not on the sampling grid")
    return k


def build_data_matrices(traj, intervals, gain=None) -> DataMatrices:
    """Quadrature blocks for one trajectory over the given (start, end)
    intervals, whose bounds must lie on the sampling grid.

    ``gain`` is the gain the inputs were generated under; it is kept for
    shape validation/bookkeeping only (the blocks themselves are
    policy-independent data).
    """
    states, inputs, dw_hat = traj.states, traj.inputs, traj.dw_hat
    t0, h = float(traj.times[0]), float(traj.h)
    steps = inputs.shape[0]
    n = states.shape[1]
    m = inputs.shape[1]
    if gain is not None:
        gain = np.asarray(gain, dtype=float)
        if gain.shape != (m, n):
            raise ValueError(f"gain must have shape {(m, n)}, got {gain.shape}")
    if len(intervals) == 0:
        raise ValueError("at least one interval is required")

    delta_rows, xx_rows, uu_rows, xw_rows = [], [], [], []
    for (start, end) in intervals:
        ia = _grid_index(start, t0, h, steps)
        ib = _grid_index(end, t0, h, steps)
        if ib <= ia:
            raise ValueError(f"empty interval ({start}, {end})")
        xs = states[ia:ib]
        delta_rows.append(np.kron(states[ib], states[ib]) - np.kron(states[ia], states[ia]))
        xx_rows.append(np.einsum("si,sj->ij", xs, xs).ravel() * h)
        uu_rows.append(np.einsum("si,sj->ij", inputs[ia:ib], inputs[ia:ib]).ravel() * h)
        xw_rows.append(np.einsum("si,sj->ij", xs, dw_hat[ia:ib]).ravel())
    return DataMatrices(
        delta_xx=np.asarray(delta_rows),
        int_xx=np.asarray(xx_rows),
        int_uu=np.asarray(uu_rows),
        int_xw=np.asarray(xw_rows),
        interval_bounds=tuple((float(a), float(b)) for a, b in intervals),
        h=h,
    )


def assemble_linear_system(dm: DataMatrices, gain, q_weight, r_weight):
    """Turn quadrature blocks into one (theta, xi) pair for the gain they
    were collected under."""
    gain = np.asarray(gain, dtype=float)
    q_weight = np.asarray(q_weight, dtype=float)
    r_weight = np.asarray(r_weight, dtype=float)
    kk = np.kron(gain.T, gain.T)
    theta = np.hstack([dm.delta_xx, -2.0 * dm.int_xw, dm.int_xx @ kk - dm.int_uu])
    xi = -dm.int_xx @ linops.vec(q_weight + gain.T @ r_weight @ gain)
    return theta, xi


def average_over_runs(pairs):
    """Arithmetic mean of (theta, xi) pairs in run-index order."""
    if len(pairs) == 0:
        raise ValueError("no runs to average")
    theta = np.stack([p[0] for p in pairs]).mean(axis=0)
    xi = np.stack([p[1] for p in pairs]).mean(axis=0)
    return theta, xi


def _duplication(n) -> np.ndarray:
    """Map from stacked upper-triangle coordinates to vec of a symmetric matrix."""
    cols = []
    for j in range(n):
        for i in range(j + 1):
            e = np.zeros((n, n))
            e[i, j] = 1.0
            e[j, i] = 1.0
            cols.append(e.reshape(-1, order="F"))
    return np.column_stack(cols)


def _min_rank(n, m) -> int:
    return n * (n + 1) // 2 + n * m + m * (m + 1) // 2


def solve_policy_evaluation(theta, xi, n, m, r_weight, mode="least-squares",
                            rcond=1e-10) -> PolicyEvaluation:
    """Solve the averaged regression for [vec(P); vec(B^T P); vec(Sigma)].

    Modes: ``least-squares`` (minimum-norm, default), ``symmetric``
    (upper-triangle parameterization of P and Sigma), ``square`` (direct
    solve; requires as many intervals as stacked unknowns).  Raises
    :class:`ExcitationError` when the data rank is below the number of
    identifiable unknowns; the fix is a richer exploration signal, more
    intervals, or more data.
    """
    theta = np.asarray(theta, dtype=float)
    xi = np.asarray(xi, dtype=float).reshape(-1)
    n_unknowns = n * n + n * m + m * m
    if theta.ndim != 2 or theta.shape[1] != n_unknowns:
        raise ValueError(f"theta must have {n_unknowns} columns, got shape {theta.shape}")
    if theta.shape[0] != xi.size:
        raise ValueError("theta and xi row counts differ")
    need = _min_rank(n, m)

    if mode == "square":
        if theta.shape[0] != n_unknowns:
            raise ValueError(
                f"square mode needs exactly {n_unknowns} intervals, got {theta.shape[0]}")
        try:
            s_vec = np.linalg.solve(theta, xi)
        except np.linalg.LinAlgError as exc:
            raise ExcitationError(
                "square data matrix is exactly singular; enlarge the exploration "
                "signal, use distinct intervals, or switch to a least-squares mode"
            ) from exc
        condition = float(np.linalg.cond(theta))
    elif mode in ("least-squares", "symmetric"):
        if mode == "symmetric":
            basis = scipy.linalg.block_diag(_duplication(n), np.eye(n * m), _duplication(m))
            design = theta @ basis
            required = basis.shape[1]
        else:
            design = theta
            required = need
        sol, _, rank, sv = np.linalg.lstsq(design, xi, rcond=rcond)
        if rank < required:
            raise ExcitationError(
                f"data matrix rank {rank} is below the {required} identifiable "
                "unknowns (persistent excitation failure); enlarge the exploration "
                "signal, add intervals, or collect more data"
            )
        retained = sv[sv > rcond * sv[0]] if sv.size else sv
        condition = float(sv[0] / retained[-1]) if retained.size else float("inf")
        s_vec = basis @ sol if mode == "symmetric" else sol
    else:
        raise ValueError(f"unknown mode {mode!r}")

    if condition > _CONDITION_WARN:
        warnings.warn(
            f"policy-evaluation regression is ill conditioned "
            f"(condition estimate {condition:.3e})",
            RuntimeWarning, stacklevel=2,
        )

    p_mat = linops.symmetrize(linops.unvec(s_vec[: n * n], n, n))
    btp = linops.unvec(s_vec[n * n: n * n + n * m], m, n)
    sigma = linops.symmetrize(linops.unvec(s_vec[n * n + n * m:], m, m))
    r_weight = np.asarray(r_weight, dtype=float)
    try:
        k_next = np.linalg.solve(sigma + r_weight, btp)
    except np.linalg.LinAlgError as exc:
        raise SingularOperatorError(
            "identified Sigma + R is singular; the gain update is undefined"
        ) from exc
    params = np.concatenate([linops.vec(p_mat), linops.vec(btp), linops.vec(sigma)])
    return PolicyEvaluation(params=params, P=p_mat, BtP=btp, Sigma=sigma,
                            K_next=k_next, condition=condition)


# ---------------------------------------------------------------------------
# Full learning loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdpConfig:
    """Run configuration for :func:`run_adp`.

    ``num_intervals`` defaults (when None) to the square count
    n^2 + nm + m^2.  ``seed_key`` prefixes the spawn keys of every Philox
    stream so that disjoint uses of one master seed stay independent.
    ``stderr_groups`` > 0 additionally solves the final iteration on that
    many disjoint run groups (batch means for error bars).
    """

    h: float
    delta_t: float
    num_intervals: int = None
    n_mc: int = 1
    max_iter: int = 16
    tol: float = 1e-5
    mode: str = "least-squares"
    rcond: float = 1e-10
    seed: int = 0
    seed_key: tuple = ()
    path_batch: int = 128
    stderr_groups: int = 0


@dataclass
class AdpResult:
    iterates: list
    P_final: np.ndarray
    K_final: np.ndarray
    converged: bool
    iterations: int
    budget: dict
    group_P_final: list = field(default_factory=list)

    def to_json_dict(self, oracle=None, config_echo=None) -> dict:
        per_iter = []
        for k, it in enumerate(self.iterates):
            entry = {
                "iteration": k,
                "P": it.P.tolist(),
                "K_next": it.K_next.tolist(),
                "Sigma": it.Sigma.tolist(),
                "condition": it.condition,
            }
            if oracle is not None:
                entry["err_P_fro"] = float(np.linalg.norm(it.P - oracle, "fro"))
            per_iter.append(entry)
        doc = {
            "converged": self.converged,
            "iterations": self.iterations,
            "P_final": self.P_final.tolist(),
            "K_final": self.K_final.tolist(),
            "budget": self.budget,
            "iterates": per_iter,
        }
        if config_echo is not None:
            doc["config"] = config_echo
        return doc

    def write_json(self, path, oracle=None, config_echo=None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(oracle=oracle, config_echo=config_echo),
                      fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path) -> None:
        """Per-iteration scalars: iteration, ||P||_F, ||K_next||_F, step, condition."""
        with open(path, "w") as fh:
            fh.write("iter,P_fro,K_fro,step_fro,condition\n")
            prev = None
            for k, it in enumerate(self.iterates):
                step = "" if prev is None else repr(float(np.linalg.norm(it.P - prev, "fro")))
                fh.write(f"{k},{float(np.linalg.norm(it.P, 'fro'))!r},"
                         f"{float(np.linalg.norm(it.K_next, 'fro'))!r},"
                         f"{step},{it.condition!r}\n")
                prev = it.P


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i: i + size]


def run_adp(plant, initial_gain, q_weight, r_weight, explore, config: AdpConfig,
            gain_monitor=None) -> AdpResult:
    """Model-blind policy iteration against a sampled plant.

    ``plant`` must expose ``n``, ``m`` and
    ``simulate_batch(gain, explore, duration, h, seed, spawn_keys)``;
    nothing else is touched.  Fresh on-policy data is collected for every
    iteration (num_intervals contiguous intervals of length delta_t per
    run, n_mc independent runs), averaged, and solved; the iteration stops
    when ``||P_{k+1} - P_k||_F <= tol (1 + ||P_k||_F)`` or at max_iter.

    ``gain_monitor(k, evaluation)``, when given, is called once per
    iteration (test harnesses use it to audit admissibility against the
    true model; the learner itself never can).
    """
    n, m = plant.n, plant.m
    gain = np.asarray(initial_gain, dtype=float)
    if gain.shape != (m, n):
        raise ValueError(f"initial gain must have shape {(m, n)}, got {gain.shape}")
    l = config.num_intervals if config.num_intervals is not None else n * n + n * m + m * m
    if l < 1:
        raise ValueError("num_intervals must be positive")
    steps_per = config.delta_t / config.h
    if abs(steps_per - round(steps_per)) > 1e-9 * max(1.0, steps_per) or round(steps_per) < 1:
        raise ValueError(f"delta_t {config.delta_t} must be a positive multiple of h {config.h}")
    if config.n_mc < 1:
        raise ValueError("n_mc must be positive")

    duration = l * config.delta_t
    intervals = [(i * config.delta_t, (i + 1) * config.delta_t) for i in range(l)]
    budget = {"h": config.h, "delta_t": config.delta_t, "num_intervals": l,
              "n_mc": config.n_mc}

    iterates = []
    prev_p = None
    converged = False
    final_pairs = None
    for k in range(config.max_iter):
        pairs = []
        for chunk in _chunks(list(range(config.n_mc)), config.path_batch):
            keys = [tuple(config.seed_key) + (k, r) for r in chunk]
            batch = plant.simulate_batch(gain, explore, duration, config.h,
                                         config.seed, spawn_keys=keys)
            for idx in range(len(chunk)):
                dm = build_data_matrices(batch.path(idx), intervals, gain)
                pairs.append(assemble_linear_system(dm, gain, q_weight, r_weight))
        theta_bar, xi_bar = average_over_runs(pairs)
        evaluation = solve_policy_evaluation(theta_bar, xi_bar, n, m, r_weight,
                                             mode=config.mode, rcond=config.rcond)
        iterates.append(evaluation)
        if gain_monitor is not None:
            gain_monitor(k, evaluation)
        p_norm = np.linalg.norm(evaluation.P, "fro")
        if not p_norm <= _P_HAT_GUARD:
            raise DivergenceError(
                f"estimated value matrix diverged at iteration {k} "
                f"(||P||_F = {p_norm:.3e})"
            )
        final_pairs = pairs
        if prev_p is not None and (
            np.linalg.norm(evaluation.P - prev_p, "fro")
            <= config.tol * (1.0 + np.linalg.norm(prev_p, "fro"))
        ):
            converged = True
            break
        prev_p = evaluation.P
        gain = evaluation.K_next

    group_p = []
    if config.stderr_groups > 1 and final_pairs and len(final_pairs) >= config.stderr_groups:
        splits = np.array_split(np.arange(len(final_pairs)), config.stderr_groups)
        for idx_group in splits:
            theta_g, xi_g = average_over_runs([final_pairs[i] for i in idx_group])
            try:
                group_p.append(
                    solve_policy_evaluation(theta_g, xi_g, n, m, r_weight,
                                            mode=config.mode, rcond=config.rcond).P)
            except (ExcitationError, SingularOperatorError):
                pass  # a noisy subgroup may be unsolvable; error bars degrade gracefully

    return AdpResult(
        iterates=iterates,
        P_final=iterates[-1].P,
        K_final=iterates[-1].K_next,
        converged=converged,
        iterations=len(iterates),
        budget=budget,
        group_P_final=group_p,
    )


# ---------------------------------------------------------------------------
# Exact-expectation mode (sampling replaced by moment integration)
# ---------------------------------------------------------------------------


def expected_data_matrices(system, gain, explore, x0, num_intervals, delta_t,
                           rtol=1e-12, atol=1e-14) -> DataMatrices:
    """Analytic expectations of the quadrature blocks in the continuous-time
    limit (no sampling, no Riemann error).

    Integrates the closed-loop first/second-moment ODEs under
    ``u = -K x + e(t)`` together with the running integrals of E[x (x) x],
    E[u (x) u] and E[x (x) dw_hat]/dt = mean (x) e (stochastic-integral
    terms have zero mean under the Ito convention).  The exploration signal
    must be deterministic (no dither).
    """
    if explore.noise_std > 0.0:
        raise ValueError("exact-expectation mode requires a dither-free exploration signal")
    gain = np.asarray(gain, dtype=float)
    a, b = system.A, system.B
    n, m = a.shape[0], b.shape[1]
    if gain.shape != (m, n):
        raise ValueError(f"gain must have shape {(m, n)}, got {gain.shape}")
    a_cl = a - b @ gain
    bf = [b @ f_i for f_i in system.F]
    bg = [b @ g_i for g_i in system.G]

    if isinstance(x0, InitialState):
        mean0, cov0 = x0.mean, x0.cov
    elif x0 is None:
        mean0, cov0 = np.zeros(n), np.zeros((n, n))
    else:
        mean0 = np.asarray(x0, dtype=float)
        cov0 = np.zeros((n, n))

    nn, mm, nm = n * n, m * m, n * m

    def rhs(t, z):
        mean = z[:n]
        s_mat = z[n: n + nn].reshape(n, n)
        e = exploration_grid(explore, [t])[0]
        u_mat = (gain @ s_mat @ gain.T - gain @ np.outer(mean, e)
                 - np.outer(e, mean) @ gain.T + np.outer(e, e))
        d_mean = a_cl @ mean + b @ e
        d_s = a_cl @ s_mat + s_mat @ a_cl.T
        be = b @ e
        d_s = d_s + np.outer(be, mean) + np.outer(mean, be)
        for mat in bf:
            d_s = d_s + mat @ s_mat @ mat.T
        for mat in bg:
            d_s = d_s + mat @ u_mat @ mat.T
        return np.concatenate([
            d_mean,
            d_s.ravel(),
            s_mat.ravel(),
            u_mat.ravel(),
            np.outer(mean, e).ravel(),
        ])

    z0 = np.concatenate([mean0, (cov0 + np.outer(mean0, mean0)).ravel(),
                         np.zeros(nn + mm + nm)])
    bounds = delta_t * np.arange(num_intervals + 1)
    sol = scipy.integrate.solve_ivp(rhs, (0.0, bounds[-1]), z0, method="DOP853",
                                    t_eval=bounds, rtol=rtol, atol=atol)
    if not sol.success:
        raise RuntimeError(f"moment integration failed: {sol.message}")
    z = sol.y.T  # (l+1, dim)

    s_at = z[:, n: n + nn]
    xx_at = z[:, n + nn: n + 2 * nn]
    uu_at = z[:, n + 2 * nn: n + 2 * nn + mm]
    xw_at = z[:, n + 2 * nn + mm:]
    return DataMatrices(
        delta_xx=np.diff(s_at, axis=0),
        int_xx=np.diff(xx_at, axis=0),
        int_uu=np.diff(uu_at, axis=0),
        int_xw=np.diff(xw_at, axis=0),
        interval_bounds=tuple((float(bounds[i]), float(bounds[i + 1]))
                              for i in range(num_intervals)),
        h=0.0,
    )


def run_pi_exact(system, initial_gain, explore, x0, num_intervals=None,
                 delta_t=0.25, max_iter=16, tol=1e-10, mode="least-squares",
                 rcond=1e-10, rtol=1e-12, atol=1e-14) -> AdpResult:
    """Policy iteration on analytically computed expected data matrices.

    This is the sampling-free limit of :func:`run_adp`: with exact E[theta]
    and E[xi] the identified parameters coincide with the model-based
    policy-iteration sequence, which the test suite checks step by step.
    """
    n, m = system.A.shape[0], system.B.shape[1]
    gain = np.asarray(initial_gain, dtype=float)
    l = num_intervals if num_intervals is not None else n * n + n * m + m * m
    iterates = []
    prev_p = None
    converged = False
    for _ in range(max_iter):
        dm = expected_data_matrices(system, gain, explore, x0, l, delta_t,
                                    rtol=rtol, atol=atol)
        theta, xi = assemble_linear_system(dm, gain, system.Q, system.R)
        evaluation = solve_policy_evaluation(theta, xi, n, m, system.R,
                                             mode=mode, rcond=rcond)
        iterates.append(evaluation)
        if prev_p is not None and (
            np.linalg.norm(evaluation.P - prev_p, "fro")
            <= tol * (1.0 + np.linalg.norm(prev_p, "fro"))
        ):
            converged = True
            break
        prev_p = evaluation.P
        gain = evaluation.K_next
    return AdpResult(
        iterates=iterates,
        P_final=iterates[-1].P,
        K_final=iterates[-1].K_next,
        converged=converged,
        iterations=len(iterates),
        budget={"h": 0.0, "delta_t": delta_t, "num_intervals": l, "n_mc": 0},
    )
