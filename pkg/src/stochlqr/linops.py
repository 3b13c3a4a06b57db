"""Dense linear-algebra helpers for small control problems.

Kronecker/vectorization calculus, generalized Lyapunov solves with
quadratic noise terms, and mean-square stability tests.  Everything here
works on small dense arrays (n of order ten); solves go through full
vectorization (n^2 x n^2 systems), which keeps the noise quadratics exact
at the cost of asymptotic speed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SingularOperatorError

__all__ = [
    "StabilityReport",
    "kron",
    "vec",
    "unvec",
    "symmetrize",
    "solve_generalized_lyapunov",
    "second_moment_generator",
    "mean_square_stability",
]


@dataclass(frozen=True)
class StabilityReport:
    """Verdict of a mean-square stability test.

    ``spectral_abscissa`` is the largest real part over the eigenvalues of
    the closed-loop second-moment generator (units 1/time).  Stability in
    mean square requires it to be strictly negative.
    """

    is_stable: bool
    spectral_abscissa: float


def _as_matrix(a) -> np.ndarray:
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got array of ndim {a.ndim}")
    return a


def kron(a, b) -> np.ndarray:
    """Kronecker product of two matrices (scalars/1-D inputs are coerced to 2-D)."""
    return np.kron(_as_matrix(a), _as_matrix(b))


def vec(m) -> np.ndarray:
    """Stack the columns of ``m`` into a single vector."""
    return np.asarray(m, dtype=float).reshape(-1, order="F")


def unvec(v, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`vec`: rebuild a ``rows x cols`` matrix column by column."""
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size != rows * cols:
        raise ValueError(f"cannot reshape vector of size {v.size} into {rows}x{cols}")
    return v.reshape((rows, cols), order="F")


def symmetrize(m) -> np.ndarray:
    """Orthogonal projection onto symmetric matrices, (M + M^T)/2."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"symmetrize needs a square matrix, got shape {m.shape}")
    return 0.5 * (m + m.T)


def solve_generalized_lyapunov(m_mat, noise_maps, c_mat) -> np.ndarray:
    """Solve ``M^T P + P M + sum_j N_j^T P N_j + C = 0`` for symmetric P.

    Parameters
    ----------
    m_mat : (n, n) array
        Drift matrix M.
    noise_maps : sequence of (n, n) arrays
        Quadratic noise maps N_j.
    c_mat : (n, n) array
        Symmetric inhomogeneity C.

    The equation is vectorized into a dense n^2 x n^2 system
    ``(I (x) M^T + M^T (x) I + sum_j N_j^T (x) N_j^T) vec(P) = -vec(C)``
    and the solution is symmetrized.  Raises
    :class:`SingularOperatorError` if the operator is singular or the
    residual exceeds ``1e-10 * (1 + ||C||_F)``.
    """
    m_mat = _as_matrix(m_mat)
    n = m_mat.shape[0]
    if m_mat.shape != (n, n):
        raise ValueError(f"M must be square, got shape {m_mat.shape}")
    c_mat = _as_matrix(c_mat)
    if c_mat.shape != (n, n):
        raise ValueError(f"C must have shape {(n, n)}, got {c_mat.shape}")
    maps = [_as_matrix(nm) for nm in noise_maps]
    for idx, nm in enumerate(maps):
        if nm.shape != (n, n):
            raise ValueError(f"noise map {idx} must have shape {(n, n)}, got {nm.shape}")

    eye = np.eye(n)
    op = np.kron(eye, m_mat.T) + np.kron(m_mat.T, eye)
    for nm in maps:
        op = op + np.kron(nm.T, nm.T)

    try:
        p_vec = np.linalg.solve(op, -vec(c_mat))
    except np.linalg.LinAlgError as exc:
        cond = np.linalg.cond(op)
        raise SingularOperatorError(
            f"generalized Lyapunov operator is singular (condition estimate {cond:.3e})"
        ) from exc

    p_mat = symmetrize(unvec(p_vec, n, n))
    residual = m_mat.T @ p_mat + p_mat @ m_mat + c_mat
    for nm in maps:
        residual = residual + nm.T @ p_mat @ nm
    res_norm = np.linalg.norm(residual, "fro")
    tol = 1e-10 * (1.0 + np.linalg.norm(c_mat, "fro"))
    if not res_norm <= tol:
        cond = np.linalg.cond(op)
        raise SingularOperatorError(
            f"generalized Lyapunov solve failed the residual check: "
            f"residual {res_norm:.3e} > {tol:.3e} (condition estimate {cond:.3e})"
        )
    return p_mat


def second_moment_generator(a_mat, b_mat, state_noise, input_noise, gain) -> np.ndarray:
    """Generator of E[x x^T] under u = -K x for a linear system with
    state- and input-dependent noise entering through B.

    Returns the n^2 x n^2 matrix
    ``I (x) A_cl + A_cl (x) I + sum_i (B F_i) (x) (B F_i) + sum_i (B G_i K) (x) (B G_i K)``
    with ``A_cl = A - B K``.
    """
    a_mat = _as_matrix(a_mat)
    b_mat = _as_matrix(b_mat)
    gain = _as_matrix(gain)
    n = a_mat.shape[0]
    m = b_mat.shape[1]
    if a_mat.shape != (n, n) or b_mat.shape[0] != n:
        raise ValueError("A must be n x n and B must be n x m")
    if gain.shape != (m, n):
        raise ValueError(f"gain must have shape {(m, n)}, got {gain.shape}")
    a_cl = a_mat - b_mat @ gain
    eye = np.eye(n)
    gen = np.kron(eye, a_cl) + np.kron(a_cl, eye)
    for f_i in state_noise:
        bf = b_mat @ _as_matrix(f_i)
        gen = gen + np.kron(bf, bf)
    for g_i in input_noise:
        bgk = b_mat @ _as_matrix(g_i) @ gain
        gen = gen + np.kron(bgk, bgk)
    return gen


def mean_square_stability(system, gain) -> StabilityReport:
    """Test whether ``u = -K x`` makes the closed loop mean-square stable.

    ``system`` must expose ``A``, ``B``, ``F``, ``G`` attributes.  The
    verdict is ``spectral_abscissa < 0`` for the second-moment generator.
    """
    gen = second_moment_generator(system.A, system.B, system.F, system.G, gain)
    eigs = np.linalg.eigvals(gen)
    abscissa = float(np.max(eigs.real))
    return StabilityReport(is_stable=bool(abscissa < 0.0), spectral_abscissa=abscissa)
