"""Euler-Maruyama simulation with exploration and noise bookkeeping.

The simulator advances ``dx = (A x + B u) dt + B dw`` on a fixed grid of
step ``h`` under ``u = -K x + e(t)`` and records, per step, the combined
increment

    dw_hat(t_j) = e(t_j) h + sum_i F_i x(t_j) dW1_i(t_j) + sum_i G_i u(t_j) dW2_i(t_j)

which is everything a data-driven policy-iteration step needs, alongside
the raw Brownian increments.  Randomness is drawn from counter-based
Philox streams keyed by ``(seed, spawn_key)`` so each path is reproducible
independently of batching or scheduling; within a path the draw order is
fixed (initial state, then dW1, dW2, dither).
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from . import linops
from .errors import DivergenceError
from .model import InitialState

__all__ = [
    "ExplorationSignal",
    "Trajectory",
    "BatchTrajectory",
    "SampledPlant",
    "default_exploration",
    "zero_exploration",
    "exploration_value",
    "exploration_grid",
    "em_step",
    "simulate",
    "simulate_batch",
    "simulate_given_increments",
    "write_trajectory_csv",
]

_GOLDEN = 0.5 * (np.sqrt(5.0) - 1.0)

_DIVERGENCE_GUARD = 1e8


@dataclass(frozen=True)
class ExplorationSignal:
    """Additive input excitation e(t).

    kind          "sum-of-sinusoids", "gaussian" (dither only) or "zero"
    amplitudes    per-sinusoid amplitudes, shared across channels
    frequencies   per-sinusoid angular frequencies [rad/s]
    phases        one phase offset per input channel
    noise_std     standard deviation of an optional Gaussian dither

    Channel c evaluates to
    ``sum_i amplitudes[i] * sin(frequencies[i] t + 2 pi G i + (i+1) phases[c])``
    (G the golden-ratio conjugate), so channels sharing the ladder are not
    scalar multiples of each other.
    """

    kind: str = "sum-of-sinusoids"
    amplitudes: tuple = ()
    frequencies: tuple = ()
    phases: tuple = (0.0,)
    noise_std: float = 0.0

    def __post_init__(self):
        if self.kind not in ("sum-of-sinusoids", "gaussian", "zero"):
            raise ValueError(f"unknown exploration kind {self.kind!r}")
        amps = np.atleast_1d(np.asarray(self.amplitudes, dtype=float))
        freqs = np.atleast_1d(np.asarray(self.frequencies, dtype=float))
        phases = np.atleast_1d(np.asarray(self.phases, dtype=float))
        if amps.size != freqs.size:
            raise ValueError("amplitudes and frequencies must have equal length")
        if phases.size < 1:
            raise ValueError("phases must contain one entry per input channel")
        if self.noise_std < 0.0:
            raise ValueError("noise_std must be nonnegative")
        amps.setflags(write=False)
        freqs.setflags(write=False)
        phases.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "frequencies", freqs)
        object.__setattr__(self, "phases", phases)

    @property
    def channels(self) -> int:
        return self.phases.size

    def amplitude_bound(self) -> float:
        """Bound on |e_c(t)| excluding the dither."""
        return float(np.abs(self.amplitudes).sum())


def default_exploration(channels, amplitude=1.0, count=10, freq_lo=0.5,
                        freq_hi=12.0, noise_std=0.0) -> ExplorationSignal:
    """Per-channel sums of ``count`` sinusoids on a geometric frequency
    ladder with a golden-ratio jitter (pairwise-incommensurate frequencies)
    and harmonically decaying amplitudes."""
    if count < 1:
        raise ValueError("count must be at least 1")
    if not (0.0 < freq_lo < freq_hi):
        raise ValueError("need 0 < freq_lo < freq_hi")
    i = np.arange(count)
    if count == 1:
        freqs = np.array([freq_lo])
    else:
        freqs = freq_lo * (freq_hi / freq_lo) ** (i / (count - 1))
        freqs = freqs * (1.0 + _GOLDEN * i / (10.0 * count))
    amps = amplitude / (1.0 + i)
    phases = 2.0 * np.pi * np.mod(_GOLDEN * (np.arange(channels) + 1), 1.0)
    return ExplorationSignal(kind="sum-of-sinusoids", amplitudes=amps,
                             frequencies=freqs, phases=phases, noise_std=noise_std)


def zero_exploration(channels) -> ExplorationSignal:
    return ExplorationSignal(kind="zero", amplitudes=(), frequencies=(),
                             phases=np.zeros(channels), noise_std=0.0)


def exploration_grid(signal: ExplorationSignal, times) -> np.ndarray:
    """Deterministic part of e(t) at the given times; shape (len(times), m)."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    m = signal.channels
    if signal.kind != "sum-of-sinusoids" or signal.amplitudes.size == 0:
        return np.zeros((times.size, m))
    i = np.arange(signal.amplitudes.size)
    stagger = 2.0 * np.pi * _GOLDEN * i
    # arg[t, i, c] = w_i t + stagger_i + (i + 1) phi_c
    arg = (times[:, None, None] * signal.frequencies[None, :, None]
           + stagger[None, :, None]
           + ((i + 1)[:, None] * signal.phases[None, :])[None, :, :])
    return np.einsum("i,tic->tc", signal.amplitudes, np.sin(arg))


def exploration_value(signal: ExplorationSignal, t, rng=None) -> np.ndarray:
    """Evaluate e(t) for one time point, drawing the dither from ``rng``."""
    val = exploration_grid(signal, [float(t)])[0]
    if signal.noise_std > 0.0:
        if rng is None:
            raise ValueError("exploration signal has a dither; an rng is required")
        val = val + rng.normal(0.0, signal.noise_std, size=signal.channels)
    return val


# ---------------------------------------------------------------------------
# Stepping
# ---------------------------------------------------------------------------


def _input_noise(system, x, u, dw1, dw2) -> np.ndarray:
    """Input-space noise increment sum_i F_i x dW1_i + sum_i G_i u dW2_i.

    Works on single states (shape (n,)) and batches (shape (N, n)) alike.
    """
    u = np.asarray(u, dtype=float)
    w = np.zeros(u.shape, dtype=float)
    dw1 = np.asarray(dw1, dtype=float)
    dw2 = np.asarray(dw2, dtype=float)
    for i, f_i in enumerate(system.F):
        w = w + (x @ f_i.T) * np.expand_dims(dw1[..., i], -1)
    for i, g_i in enumerate(system.G):
        w = w + (u @ g_i.T) * np.expand_dims(dw2[..., i], -1)
    return w


def em_step(system, x, u, dw1, dw2, h) -> np.ndarray:
    """One Euler-Maruyama step x + (A x + B u) h + B (F x dW1 + G u dW2)."""
    if h <= 0.0:
        raise ValueError("h must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    w = _input_noise(system, x, u, dw1, dw2)
    return x + (x @ system.A.T + u @ system.B.T) * h + w @ system.B.T


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """A single sampled path.  ``states`` has one more row than the
    per-step arrays; ``dw_hat`` follows the Ito (left-endpoint) bookkeeping
    convention described in the module docstring."""

    h: float
    times: np.ndarray      # (T+1,)
    states: np.ndarray     # (T+1, n)
    inputs: np.ndarray     # (T, m)
    dw_hat: np.ndarray     # (T, m)
    dw1: np.ndarray        # (T, q1)
    dw2: np.ndarray        # (T, q2)
    seed: object = None


@dataclass(frozen=True)
class BatchTrajectory:
    """A batch of paths sharing the time grid (leading axis = path)."""

    h: float
    times: np.ndarray      # (T+1,)
    states: np.ndarray     # (N, T+1, n)
    inputs: np.ndarray     # (N, T, m)
    dw_hat: np.ndarray     # (N, T, m)
    dw1: np.ndarray        # (N, T, q1)
    dw2: np.ndarray        # (N, T, q2)
    seed: object = None
    spawn_keys: tuple = ()

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    def path(self, i: int) -> Trajectory:
        key = self.spawn_keys[i] if i < len(self.spawn_keys) else None
        return Trajectory(h=self.h, times=self.times, states=self.states[i],
                          inputs=self.inputs[i], dw_hat=self.dw_hat[i],
                          dw1=self.dw1[i], dw2=self.dw2[i],
                          seed=(self.seed, key))


def _n_steps(duration, h) -> int:
    steps = duration / h
    n = int(round(steps))
    if n < 1 or abs(steps - n) > 1e-9 * max(1.0, abs(steps)):
        raise ValueError(f"duration {duration} is not a positive multiple of h {h}")
    return n


def _path_rng(seed, spawn_key) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in spawn_key))
    return np.random.Generator(np.random.Philox(ss))


def simulate_given_increments(system, gain, explore, x0s, t0, h, dw1, dw2,
                              dither=None) -> BatchTrajectory:
    """Run batched Euler-Maruyama steps from externally supplied Brownian
    increments (used for coupled-path refinement studies and by
    :func:`simulate_batch`).

    ``x0s`` is (N, n); ``dw1``/``dw2`` are (N, T, q1)/(N, T, q2) increments
    ~ N(0, h); ``dither`` is an optional (N, T, m) addition to e(t).
    """
    x0s = np.asarray(x0s, dtype=float)
    dw1 = np.asarray(dw1, dtype=float)
    dw2 = np.asarray(dw2, dtype=float)
    n_paths, n = x0s.shape
    t = dw1.shape[1]
    m = system.B.shape[1]
    if h <= 0.0:
        raise ValueError("h must be positive")
    gain = np.asarray(gain, dtype=float)
    if gain.shape != (m, n):
        raise ValueError(f"gain must have shape {(m, n)}, got {gain.shape}")

    times = t0 + h * np.arange(t + 1)
    e_det = exploration_grid(explore, times[:-1])

    a_t = np.ascontiguousarray(system.A.T)
    b_t = np.ascontiguousarray(system.B.T)
    neg_k_t = np.ascontiguousarray(-gain.T)

    states = np.empty((n_paths, t + 1, n))
    inputs = np.empty((n_paths, t, m))
    dw_hat = np.empty((n_paths, t, m))

    x = x0s.copy()
    states[:, 0] = x
    for j in range(t):
        e = e_det[j] if dither is None else e_det[j] + dither[:, j]
        u = x @ neg_k_t + e
        w = _input_noise(system, x, u, dw1[:, j], dw2[:, j])
        x = x + (x @ a_t + u @ b_t) * h + w @ b_t
        xmax = np.abs(x).max()
        if not xmax <= _DIVERGENCE_GUARD:
            path = int(np.abs(x).max(axis=1).argmax())
            raise DivergenceError(
                f"state exceeded {_DIVERGENCE_GUARD:.1e} at step {j + 1} "
                f"(t = {times[j + 1]:.6g}, path {path}); the gain is likely "
                "inadmissible or h is too coarse"
            )
        states[:, j + 1] = x
        inputs[:, j] = u
        dw_hat[:, j] = e * h + w
    return BatchTrajectory(h=float(h), times=times, states=states, inputs=inputs,
                           dw_hat=dw_hat, dw1=dw1, dw2=dw2)


def simulate_batch(system, gain, explore, t0, duration, h, seed, spawn_keys,
                   x0=None, check_admissible=True) -> BatchTrajectory:
    """Simulate one path per entry of ``spawn_keys`` (tuples of ints keying
    independent Philox streams under the master ``seed``).

    ``x0`` may be None (origin), a fixed state vector, or an
    :class:`~stochlqr.model.InitialState` sampled per path.
    """
    steps = _n_steps(duration, h)
    n, m = system.A.shape[0], system.B.shape[1]
    q1, q2 = len(system.F), len(system.G)
    gain = np.asarray(gain, dtype=float)

    if check_admissible:
        report = linops.mean_square_stability(system, gain)
        if not report.is_stable:
            warnings.warn(
                "simulating with a gain that is not mean-square admissible "
                f"(spectral abscissa {report.spectral_abscissa:.3e})",
                RuntimeWarning, stacklevel=2,
            )

    n_paths = len(spawn_keys)
    x0s = np.zeros((n_paths, n))
    factor = mean = None
    if isinstance(x0, InitialState):
        factor, mean = x0.factor(), x0.mean
    elif x0 is not None:
        x0s[:] = np.asarray(x0, dtype=float)

    root = np.sqrt(h)
    dw1 = np.empty((n_paths, steps, q1))
    dw2 = np.empty((n_paths, steps, q2))
    dither = np.empty((n_paths, steps, m)) if explore.noise_std > 0.0 else None
    for p, key in enumerate(spawn_keys):
        rng = _path_rng(seed, key)
        if factor is not None:
            x0s[p] = mean + factor @ rng.standard_normal(n)
        dw1[p] = root * rng.standard_normal((steps, q1))
        dw2[p] = root * rng.standard_normal((steps, q2))
        if dither is not None:
            dither[p] = rng.normal(0.0, explore.noise_std, size=(steps, m))

    batch = simulate_given_increments(system, gain, explore, x0s, t0, h, dw1, dw2,
                                      dither=dither)
    return BatchTrajectory(h=batch.h, times=batch.times, states=batch.states,
                           inputs=batch.inputs, dw_hat=batch.dw_hat,
                           dw1=batch.dw1, dw2=batch.dw2, seed=seed,
                           spawn_keys=tuple(tuple(k) for k in spawn_keys))


def simulate(system, gain, explore, t0, duration, h, seed, x0=None,
             spawn_key=()) -> Trajectory:
    """Simulate a single path (a batch of one; see :func:`simulate_batch`)."""
    batch = simulate_batch(system, gain, explore, t0, duration, h, seed,
                           spawn_keys=[tuple(spawn_key)], x0=x0)
    return batch.path(0)


class SampledPlant:
    """Simulation access to a system without exposing its matrices.

    Learners receive only state dimensions and sampled trajectories
    (including the recorded dw_hat increments); the underlying A, B, F, G
    stay private to the plant.
    """

    def __init__(self, system, x0=None):
        self._system = system
        self._x0 = x0
        self._n = system.A.shape[0]
        self._m = system.B.shape[1]

    @property
    def n(self) -> int:
        return self._n

    @property
    def m(self) -> int:
        return self._m

    def simulate_batch(self, gain, explore, duration, h, seed, spawn_keys) -> BatchTrajectory:
        return simulate_batch(self._system, gain, explore, 0.0, duration, h,
                              seed, spawn_keys, x0=self._x0)

    def simulate(self, gain, explore, duration, h, seed, spawn_key=()) -> Trajectory:
        return self.simulate_batch(gain, explore, duration, h, seed,
                                   [tuple(spawn_key)]).path(0)


def write_trajectory_csv(traj: Trajectory, path, header_comment=None) -> None:
    """Debug CSV with columns t, x1..xn, u1..um, dwhat1..dwhatm.

    The final row carries the terminal state only (inputs/increments are
    per-step quantities and left empty there).
    """
    n = traj.states.shape[1]
    m = traj.inputs.shape[1]
    with open(path, "w", newline="") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x{i+1}" for i in range(n)]
                        + [f"u{i+1}" for i in range(m)]
                        + [f"dwhat{i+1}" for i in range(m)])
        steps = traj.inputs.shape[0]
        for j in range(steps):
            writer.writerow([repr(float(traj.times[j]))]
                            + [repr(float(v)) for v in traj.states[j]]
                            + [repr(float(v)) for v in traj.inputs[j]]
                            + [repr(float(v)) for v in traj.dw_hat[j]])
        writer.writerow([repr(float(traj.times[steps]))]
                        + [repr(float(v)) for v in traj.states[steps]]
                        + [""] * (2 * m))
