"""Exact solvers for the generalized algebraic Riccati equation

    A^T P + P A - P B (Sigma_P + R)^{-1} B^T P + Pi_P + Q = 0

where the noise quadratics are
``Pi_P = sum_i F_i^T B^T P B F_i`` (state-noise contribution, n x n) and
``Sigma_P = sum_i G_i^T B^T P B G_i`` (input-noise contribution, m x m),
and the optimal gain is ``K* = (Sigma_P* + R)^{-1} B^T P*``.

Two equivalent iterations are provided: policy iteration in Kleinman form
(a generalized Lyapunov solve per step) and Newton's method on the Riccati
operator (a fully vectorized n^2 x n^2 linear solve of the Frechet
differential per step).  Their per-step agreement is a strong internal
consistency check and is exercised by the test suite.  A perturbed Newton
iterate with an injected error term supports robustness studies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linops
from .errors import AdmissibilityError, ConvergenceError, SingularOperatorError

__all__ = [
    "RiccatiSolution",
    "state_noise_term",
    "control_noise_term",
    "riccati_residual",
    "frechet_apply",
    "optimal_gain",
    "newton_step",
    "kleinman_step",
    "solve",
    "perturbed_newton_step",
    "estimate_contraction",
]


@dataclass(frozen=True)
class RiccatiSolution:
    P_star: np.ndarray
    K_star: np.ndarray
    iterations: int
    final_residual: float


def state_noise_term(system, p_mat) -> np.ndarray:
    """Pi_P = sum_i F_i^T B^T P B F_i (zero matrix when there is no state noise)."""
    n = system.A.shape[0]
    out = np.zeros((n, n))
    core = system.B.T @ np.asarray(p_mat, dtype=float) @ system.B
    for f_i in system.F:
        out = out + f_i.T @ core @ f_i
    return out


def control_noise_term(system, p_mat) -> np.ndarray:
    """Sigma_P = sum_i G_i^T B^T P B G_i (zero matrix when there is no input noise)."""
    m = system.B.shape[1]
    out = np.zeros((m, m))
    core = system.B.T @ np.asarray(p_mat, dtype=float) @ system.B
    for g_i in system.G:
        out = out + g_i.T @ core @ g_i
    return out


def riccati_residual(system, p_mat) -> np.ndarray:
    """Value of the generalized Riccati operator at P (zero at the solution)."""
    p_mat = np.asarray(p_mat, dtype=float)
    a, b, q, r = system.A, system.B, system.Q, system.R
    gain_weight = control_noise_term(system, p_mat) + r
    core = np.linalg.solve(gain_weight, b.T @ p_mat)
    return a.T @ p_mat + p_mat @ a - p_mat @ b @ core + state_noise_term(system, p_mat) + q


def optimal_gain(system, p_mat) -> np.ndarray:
    """Gain induced by a value matrix: (Sigma_P + R)^{-1} B^T P."""
    p_mat = np.asarray(p_mat, dtype=float)
    return np.linalg.solve(control_noise_term(system, p_mat) + system.R,
                           system.B.T @ p_mat)


def frechet_apply(system, p_mat, w_mat) -> np.ndarray:
    """Frechet differential of the Riccati operator at P applied to W:

        A^T W + W A + Pi_W
        - W B (Sigma_P+R)^{-1} B^T P - P B (Sigma_P+R)^{-1} B^T W
        + P B (Sigma_P+R)^{-1} Sigma_W (Sigma_P+R)^{-1} B^T P
    """
    p_mat = np.asarray(p_mat, dtype=float)
    w_mat = np.asarray(w_mat, dtype=float)
    a, b = system.A, system.B
    gw = control_noise_term(system, p_mat) + system.R
    btp = b.T @ p_mat
    core = np.linalg.solve(gw, btp)            # (Sigma_P+R)^{-1} B^T P
    sig_w = control_noise_term(system, w_mat)
    out = a.T @ w_mat + w_mat @ a + state_noise_term(system, w_mat)
    out = out - w_mat @ b @ core - core.T @ b.T @ w_mat
    out = out + core.T @ sig_w @ core
    return out


def _frechet_matrix(system, p_mat) -> np.ndarray:
    """Vectorized form of the Frechet differential (n^2 x n^2)."""
    a, b = system.A, system.B
    n = a.shape[0]
    gw = control_noise_term(system, p_mat) + system.R
    core = np.linalg.solve(gw, b.T @ p_mat)    # (Sigma_P+R)^{-1} B^T P
    m_c = core.T @ b.T                          # P B (Sigma_P+R)^{-1} B^T
    eye = np.eye(n)
    op = np.kron(eye, a.T) + np.kron(a.T, eye)
    op = op - np.kron(m_c, eye) - np.kron(eye, m_c)
    for f_i in system.F:
        bf = b @ f_i
        op = op + np.kron(bf.T, bf.T)
    for g_i in system.G:
        e_i = core.T @ g_i.T @ b.T              # P B (Sigma_P+R)^{-1} G_i^T B^T
        op = op + np.kron(e_i, e_i)
    return op


def newton_step(system, p_mat) -> np.ndarray:
    """One Newton iterate: solve T'_P(P_next) = T'_P(P) - T(P) for P_next."""
    p_mat = linops.symmetrize(np.asarray(p_mat, dtype=float))
    op = _frechet_matrix(system, p_mat)
    rhs = op @ linops.vec(p_mat) - linops.vec(riccati_residual(system, p_mat))
    try:
        sol = np.linalg.solve(op, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularOperatorError(
            f"Frechet operator is singular at this iterate "
            f"(condition estimate {np.linalg.cond(op):.3e})"
        ) from exc
    return linops.symmetrize(linops.unvec(sol, p_mat.shape[0], p_mat.shape[0]))


def kleinman_step(system, gain):
    """One policy-iteration step: evaluate the gain, then improve it.

    Solves the generalized Lyapunov equation

        (A - B K)^T P + P (A - B K) + Q + Pi_P + K^T (Sigma_P + R) K = 0

    and returns ``(P, K_next)`` with ``K_next = (Sigma_P + R)^{-1} B^T P``.
    Raises a diagnostic if the evaluated value matrix is not positive
    definite, which is the usual signature of an inadmissible gain.
    """
    gain = np.asarray(gain, dtype=float)
    a, b, q, r = system.A, system.B, system.Q, system.R
    a_cl = a - b @ gain
    maps = [b @ f_i for f_i in system.F] + [b @ g_i @ gain for g_i in system.G]
    c_mat = q + gain.T @ r @ gain
    p_mat = linops.solve_generalized_lyapunov(a_cl, maps, c_mat)
    min_eig = float(np.linalg.eigvalsh(p_mat).min())
    if min_eig < -1e-10 * (1.0 + np.linalg.norm(p_mat, "fro")):
        raise AdmissibilityError(
            f"policy evaluation produced an indefinite value matrix "
            f"(min eigenvalue {min_eig:.3e}); the gain is likely inadmissible"
        )
    return p_mat, optimal_gain(system, p_mat)


def solve(system, initial_gain, tol=1e-12, max_iter=64) -> RiccatiSolution:
    """Solve the generalized Riccati equation by policy iteration.

    ``initial_gain`` must be mean-square admissible (checked).  Stops when
    ``||P_{k+1} - P_k||_F <= tol (1 + ||P_k||_F)``.
    """
    gain = np.asarray(initial_gain, dtype=float)
    report = linops.mean_square_stability(system, gain)
    if not report.is_stable:
        raise AdmissibilityError(
            "initial gain is not mean-square admissible "
            f"(spectral abscissa {report.spectral_abscissa:.3e})"
        )
    p_prev = None
    for k in range(1, max_iter + 1):
        p_mat, gain = kleinman_step(system, gain)
        if p_prev is not None and (
            np.linalg.norm(p_mat - p_prev, "fro")
            <= tol * (1.0 + np.linalg.norm(p_prev, "fro"))
        ):
            residual = float(np.linalg.norm(riccati_residual(system, p_mat), "fro"))
            return RiccatiSolution(P_star=p_mat, K_star=optimal_gain(system, p_mat),
                                   iterations=k, final_residual=residual)
        p_prev = p_mat
    raise ConvergenceError(
        f"policy iteration did not converge within {max_iter} iterations "
        f"(tolerance {tol:g})"
    )


def perturbed_newton_step(system, p_mat, error_norm=0.0, rng=None) -> np.ndarray:
    """Newton iterate plus an injected symmetric error of Frobenius norm
    ``error_norm`` drawn in a random direction from ``rng``.

    With ``error_norm = 0`` this is exactly :func:`newton_step`; otherwise
    it models an inexact policy-evaluation oracle whose per-step error is
    bounded, the regime in which the iteration converges to a neighborhood
    of the solution of radius error/(1 - contraction factor).
    """
    p_next = newton_step(system, p_mat)
    if error_norm == 0.0:
        return p_next
    if error_norm < 0.0:
        raise ValueError("error_norm must be nonnegative")
    if rng is None:
        raise ValueError("an rng is required when error_norm > 0")
    n = p_next.shape[0]
    direction = linops.symmetrize(rng.standard_normal((n, n)))
    direction = direction / np.linalg.norm(direction, "fro")
    return p_next + error_norm * direction


def estimate_contraction(system, p_star, radius, samples=32, rng=None) -> float:
    """Empirical Lipschitz constant of the Newton map near ``p_star``.

    Samples pairs of symmetric perturbations within a Frobenius ball of
    ``radius`` and returns the largest observed ratio
    ``||Psi(P) - Psi(P')||_F / ||P - P'||_F``.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    p_star = np.asarray(p_star, dtype=float)
    n = p_star.shape[0]

    def sample_point():
        d = linops.symmetrize(rng.standard_normal((n, n)))
        d = d / np.linalg.norm(d, "fro")
        return p_star + rng.uniform(0.1, 1.0) * radius * d

    worst = 0.0
    for _ in range(samples):
        p_a, p_b = sample_point(), sample_point()
        gap = np.linalg.norm(p_a - p_b, "fro")
        if gap < 1e-14:
            continue
        ratio = np.linalg.norm(newton_step(system, p_a) - newton_step(system, p_b), "fro") / gap
        worst = max(worst, float(ratio))
    return worst
