"""Problem data for stochastic LQR.

A :class:`LinearStochasticSystem` is the Ito SDE

    dx = (A x + B u) dt + B dw,
    dw = sum_i F_i x dw1_i + sum_i G_i u dw2_i,

with state x in R^n, input u in R^m, independent scalar Wiener processes
dw1_i/dw2_i, state-noise maps F_i (m x n) and input-noise maps G_i (m x m),
together with quadratic running-cost weights Q (PSD) and R (PD).

The module also carries well-posedness diagnostics, admissibility checks,
JSON (de)serialization, and a planar reaching-arm preset whose actuation
noise grows with the commanded input (signal-dependent noise).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import scipy.linalg

from . import linops
from .errors import AdmissibilityError

__all__ = [
    "LinearStochasticSystem",
    "InitialState",
    "ArmParams",
    "validate_system",
    "check_admissible",
    "default_initial_gain",
    "sensorimotor_arm",
    "system_to_dict",
    "system_from_dict",
    "load_system",
]


def _frozen_array(a, ndim=2) -> np.ndarray:
    out = np.array(a, dtype=float)
    if ndim == 2:
        out = np.atleast_2d(out)
    else:
        out = np.atleast_1d(out)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class LinearStochasticSystem:
    """Immutable system description; arrays are copied and marked read-only.

    ``F`` and ``G`` are tuples of noise maps (possibly empty).  Construction
    only normalizes dtypes/shapes; call :func:`validate_system` for the full
    well-posedness diagnostics.
    """

    A: np.ndarray
    B: np.ndarray
    F: tuple = ()
    G: tuple = ()
    Q: np.ndarray = None
    R: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "A", _frozen_array(self.A))
        object.__setattr__(self, "B", _frozen_array(self.B))
        object.__setattr__(self, "F", tuple(_frozen_array(f) for f in self.F))
        object.__setattr__(self, "G", tuple(_frozen_array(g) for g in self.G))
        q = np.eye(self.A.shape[0]) if self.Q is None else self.Q
        r = np.eye(self.B.shape[1]) if self.R is None else self.R
        object.__setattr__(self, "Q", _frozen_array(q))
        object.__setattr__(self, "R", _frozen_array(r))

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class InitialState:
    """Gaussian initial condition x(0) ~ N(mean, cov)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = _frozen_array(self.mean, ndim=1)
        cov = _frozen_array(self.cov)
        n = mean.size
        if cov.shape != (n, n):
            raise ValueError(f"cov must have shape {(n, n)}, got {cov.shape}")
        if not np.allclose(cov, cov.T, atol=1e-10 * (1.0 + np.abs(cov).max())):
            raise ValueError("cov must be symmetric")
        if np.linalg.eigvalsh(0.5 * (cov + cov.T)).min() < -1e-10 * (1.0 + np.abs(cov).max()):
            raise ValueError("cov must be positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    def factor(self) -> np.ndarray:
        """A matrix L with L L^T = cov (eigfactor; works for singular cov)."""
        w, v = np.linalg.eigh(0.5 * (self.cov + self.cov.T))
        return v * np.sqrt(np.clip(w, 0.0, None))


def validate_system(system: LinearStochasticSystem) -> list:
    """Return a list of human-readable diagnostics; empty means well posed."""
    out = []
    a, b = system.A, system.B
    n = a.shape[0]
    if a.ndim != 2 or a.shape != (n, n):
        out.append(f"A must be square, got shape {a.shape}")
    if b.ndim != 2 or b.shape[0] != n:
        out.append(f"B must have {n} rows, got shape {b.shape}")
    m = b.shape[1] if b.ndim == 2 else 0
    for name, mats, want in (("F", system.F, (m, n)), ("G", system.G, (m, m))):
        for i, mat in enumerate(mats):
            if mat.shape != want:
                out.append(f"{name}[{i}] has shape {mat.shape}, expected {want}")
    for name, mat in (("A", a), ("B", b), ("Q", system.Q), ("R", system.R)):
        if not np.isfinite(mat).all():
            out.append(f"non-finite entries in {name}")
    q, r = system.Q, system.R
    if q.shape != (n, n):
        out.append(f"Q must have shape {(n, n)}, got {q.shape}")
    elif np.isfinite(q).all():
        scale = 1.0 + np.abs(q).max()
        if not np.allclose(q, q.T, atol=1e-10 * scale):
            out.append("Q not symmetric")
        elif np.linalg.eigvalsh(0.5 * (q + q.T)).min() < -1e-10 * scale:
            out.append("Q not positive semidefinite")
    if r.shape != (m, m):
        out.append(f"R must have shape {(m, m)}, got {r.shape}")
    elif np.isfinite(r).all():
        scale = 1.0 + np.abs(r).max()
        if not np.allclose(r, r.T, atol=1e-10 * scale):
            out.append("R not symmetric")
        elif np.linalg.eigvalsh(0.5 * (r + r.T)).min() <= 1e-12 * scale:
            out.append("R not positive definite")
    return out


def check_admissible(system: LinearStochasticSystem, gain) -> linops.StabilityReport:
    """Mean-square stability report for u = -K x (assumes a validated system)."""
    return linops.mean_square_stability(system, gain)


def default_initial_gain(system: LinearStochasticSystem) -> np.ndarray:
    """Initial admissible gain: the noise-free LQR gain for (A, B, Q, R).

    Solves the deterministic continuous-time algebraic Riccati equation,
    then verifies mean-square admissibility against the full noisy system.
    Raises :class:`AdmissibilityError` if the noise destabilizes it, in
    which case the caller must supply a gain explicitly.
    """
    p = scipy.linalg.solve_continuous_are(system.A, system.B, system.Q, system.R)
    gain = np.linalg.solve(system.R, system.B.T @ p)
    report = check_admissible(system, gain)
    if not report.is_stable:
        raise AdmissibilityError(
            "noise-free LQR gain is not mean-square admissible for the noisy system "
            f"(spectral abscissa {report.spectral_abscissa:.3e}); supply an initial gain"
        )
    return gain


# ---------------------------------------------------------------------------
# Planar reaching-arm preset
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ArmParams:
    """Parameters of the planar arm preset (defaults are documented
    placeholders, admissibility-checked at build time, not fitted to data).

    mass            point mass [kg]
    viscosity       velocity damping coefficient b
    time_constant   first-order actuator lag tau [s]
    c1, c2          signal-dependent noise scales of the two input channels
    force_field     2x2 matrix L coupling velocity into an external force f = L v
    """

    mass: float = 1.3
    viscosity: float = 10.0
    time_constant: float = 0.05
    c1: float = 0.075
    c2: float = 0.025
    force_field: tuple = ((0.0, 2.0), (-2.0, 0.0))
    q_weight: tuple = None
    r_weight: tuple = None
    x0_mean: tuple = None
    x0_cov: tuple = None


def sensorimotor_arm(params: ArmParams = None):
    """Build the 6-state planar arm with signal-dependent actuation noise.

    State layout: (px, py, vx, vy, ax, ay) where p is hand position, v its
    velocity, and a the actuator state driving it (n = 6, m = 2).  Dynamics:

        dp = v dt
        mass * dv = (a - viscosity * v + force_field @ v) dt
        tau * da = (u - a) dt + dw

    with the actuation noise dw = G1 u dw2_1 + G2 u dw2_2,
    G1 = [[c1, 0], [c2, 0]], G2 = [[0, c2], [0, c1]] (no state-dependent
    noise, so q1 = 0, q2 = 2).  Returns ``(system, initial_state)``.
    """
    p = params or ArmParams()
    if p.mass <= 0.0:
        raise ValueError("mass must be positive")
    if p.time_constant <= 0.0:
        raise ValueError("time_constant must be positive")
    if p.viscosity < 0.0:
        raise ValueError("viscosity must be nonnegative")
    ell = np.asarray(p.force_field, dtype=float)
    if ell.shape != (2, 2):
        raise ValueError(f"force_field must be 2x2, got shape {ell.shape}")

    eye2 = np.eye(2)
    a = np.zeros((6, 6))
    a[0:2, 2:4] = eye2
    a[2:4, 2:4] = (ell - p.viscosity * eye2) / p.mass
    a[2:4, 4:6] = eye2 / p.mass
    a[4:6, 4:6] = -eye2 / p.time_constant
    b = np.zeros((6, 2))
    b[4:6, :] = eye2 / p.time_constant
    g1 = np.array([[p.c1, 0.0], [p.c2, 0.0]])
    g2 = np.array([[0.0, p.c2], [0.0, p.c1]])

    q = np.eye(6) if p.q_weight is None else np.asarray(p.q_weight, dtype=float)
    r = np.eye(2) if p.r_weight is None else np.asarray(p.r_weight, dtype=float)
    system = LinearStochasticSystem(A=a, B=b, F=(), G=(g1, g2), Q=q, R=r)
    issues = validate_system(system)
    if issues:
        raise ValueError("arm preset failed validation: " + "; ".join(issues))

    mean = np.zeros(6) if p.x0_mean is None else np.asarray(p.x0_mean, dtype=float)
    cov = 0.01 * np.eye(6) if p.x0_cov is None else np.asarray(p.x0_cov, dtype=float)
    return system, InitialState(mean=mean, cov=cov)


# ---------------------------------------------------------------------------
# JSON (de)serialization
# ---------------------------------------------------------------------------


def system_to_dict(system: LinearStochasticSystem, x0: InitialState = None) -> dict:
    doc = {
        "A": system.A.tolist(),
        "B": system.B.tolist(),
        "F": [f.tolist() for f in system.F],
        "G": [g.tolist() for g in system.G],
        "Q": system.Q.tolist(),
        "R": system.R.tolist(),
    }
    if x0 is not None:
        doc["x0_mean"] = x0.mean.tolist()
        doc["x0_cov"] = x0.cov.tolist()
    return doc


def system_from_dict(doc: dict):
    """Parse a system document with keys A, B, F, G, Q, R[, x0_mean, x0_cov]."""
    missing = [k for k in ("A", "B") if k not in doc]
    if missing:
        raise ValueError(f"system document is missing keys: {missing}")
    system = LinearStochasticSystem(
        A=doc["A"],
        B=doc["B"],
        F=tuple(doc.get("F", ())),
        G=tuple(doc.get("G", ())),
        Q=doc.get("Q"),
        R=doc.get("R"),
    )
    x0 = None
    if "x0_mean" in doc or "x0_cov" in doc:
        n = system.n
        mean = doc.get("x0_mean", [0.0] * n)
        cov = doc.get("x0_cov", np.zeros((n, n)).tolist())
        x0 = InitialState(mean=mean, cov=cov)
    return system, x0


def load_system(doc: dict):
    """Load either an inline system document or a named preset.

    Presets are addressed as ``{"preset": "sensorimotor-arm", "params": {...}}``
    where ``params`` overrides :class:`ArmParams` fields.
    """
    if "preset" in doc:
        name = doc["preset"]
        if name != "sensorimotor-arm":
            raise ValueError(f"unknown preset {name!r}")
        overrides = doc.get("params", {})
        known = {f.name for f in fields(ArmParams)}
        bad = sorted(set(overrides) - known)
        if bad:
            raise ValueError(f"unknown arm parameters: {bad}")
        return sensorimotor_arm(ArmParams(**overrides))
    return system_from_dict(doc)
