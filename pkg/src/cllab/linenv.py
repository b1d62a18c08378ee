"""Linear plants and the sinusoidal reference generator.

All plants are discrete-time, ``x[t+1] = A x[t] + B u[t]`` with observation
``y[t] = C x[t]``. The tracking plant additionally clamps its state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi


class EnvError(ValueError):
    """Invalid plant construction or stepping input."""


class DivergenceError(RuntimeError):
    """A rollout left the finite (or guarded) range."""


@dataclass(frozen=True)
class EnvModel:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    beta: float = 0.0
    state_clamp: Optional[float] = None
    divergence_guard: Optional[float] = None
    target: Optional[np.ndarray] = None
    name: str = "linear"
    dt: float = 1.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n):
            raise EnvError(f"A must be square, got {A.shape}")
        if B.shape[0] != n:
            raise EnvError(f"B must have {n} rows, got {B.shape}")
        if C.shape[1] != n:
            raise EnvError(f"C must have {n} columns, got {C.shape}")
        if self.beta < 0:
            raise EnvError(f"beta must be >= 0, got {self.beta}")
        if self.state_clamp is not None and self.state_clamp <= 0:
            raise EnvError("state_clamp must be positive")
        target = np.zeros(n) if self.target is None else np.asarray(self.target, dtype=float)
        if target.shape != (n,):
            raise EnvError(f"target must have shape ({n},)")
        for name, arr in (("A", A), ("B", B), ("C", C), ("target", target)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def n_inputs(self) -> int:
        return self.B.shape[1]

    @property
    def n_obs(self) -> int:
        return self.C.shape[0]

    @property
    def partially_observable(self) -> bool:
        return np.linalg.matrix_rank(self.C) < np.linalg.matrix_rank(self.A)

    def with_beta(self, beta: float) -> "EnvModel":
        return replace(self, beta=beta)


@dataclass(frozen=True)
class EnvState:
    x: np.ndarray
    t: int = 0


def make_double_integrator(beta: float = 0.0, dt: float = 1.0) -> EnvModel:
    """The unit-mass double integrator observed through its position.

    ``dt=1`` gives the canonical task; other values give the Euler
    discretisation used alongside the continuous-time agent.
    """
    if beta < 0:
        raise EnvError(f"beta must be >= 0, got {beta}")
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([[0.0], [dt]])
    C = np.array([[1.0, 0.0]])
    name = "double_integrator" if dt == 1.0 else f"double_integrator_dt{dt:g}"
    return EnvModel(A, B, C, beta=beta, name=name, dt=dt)


def make_k_integrator(k: int, b: int = 1, c: int = 1, beta: float = 0.0) -> EnvModel:
    """Cascade of ``k`` integrators with ``b`` actuators and ``c`` sensors.

    Actuator ``j`` drives state ``k - j`` (0-based), so the first actuator sits
    on the last integrator. Sensors read the leading ``c`` states.
    """
    if k < 1 or not 1 <= b <= k or not 1 <= c <= k:
        raise EnvError(f"need k >= 1, 1 <= b <= k, 1 <= c <= k; got k={k}, b={b}, c={c}")
    A = np.eye(k) + np.eye(k, k=1)
    B = np.zeros((k, b))
    for j in range(min(k, b)):
        B[k - 1 - j, j] = 1.0
    C = np.zeros((c, k))
    C[np.arange(c), np.arange(c)] = 1.0
    return EnvModel(A, B, C, beta=beta, name=f"k_integrator_k{k}_b{b}_c{c}")


def make_tracking_plant(dt: float = 0.1, clamp: float = 10.0, beta: float = 0.0) -> EnvModel:
    """Two independent Euler-discretised point masses, state (x, xdot, y, ydot)."""
    a = np.array([[1.0, dt], [0.0, 1.0]])
    bb = np.array([[0.0], [dt]])
    A = np.zeros((4, 4))
    A[:2, :2] = a
    A[2:, 2:] = a
    B = np.zeros((4, 2))
    B[:2, :1] = bb
    B[2:, 1:] = bb
    C = np.array([[1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]])
    return EnvModel(A, B, C, beta=beta, state_clamp=clamp, name="tracking", dt=dt)


def _check_finite(arr: np.ndarray, what: str, t: int) -> None:
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite {what} at step {t}")


def env_step(env: EnvModel, state: EnvState, u) -> EnvState:
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape != (env.n_inputs,):
        raise EnvError(f"control must have shape ({env.n_inputs},), got {u.shape}")
    x = np.asarray(state.x, dtype=float)
    if x.shape != (env.n,):
        raise EnvError(f"state must have shape ({env.n},), got {x.shape}")
    _check_finite(x, "state", state.t)
    _check_finite(u, "control", state.t)
    x_next = env.A @ x + env.B @ u
    if env.state_clamp is not None:
        x_next = np.clip(x_next, -env.state_clamp, env.state_clamp)
    if env.divergence_guard is not None and np.max(np.abs(x_next)) > env.divergence_guard:
        raise DivergenceError(f"|x| exceeded {env.divergence_guard:g} at step {state.t + 1}")
    return EnvState(x_next, state.t + 1)


def observe(env: EnvModel, state: EnvState) -> np.ndarray:
    return env.C @ np.asarray(state.x, dtype=float)


def episode_loss(states: Sequence, controls: Sequence, env: EnvModel,
                 reference: Optional[np.ndarray] = None) -> float:
    """Mean squared state error plus ``beta`` times the summed control energy.

    ``states`` and ``controls`` are the T post-step states and their controls.
    With ``reference`` (T x c positions) the error is ``C x - r`` instead of
    ``x - target``.
    """
    xs = np.array([np.asarray(getattr(s, "x", s), dtype=float) for s in states])
    us = np.array([np.atleast_1d(np.asarray(u, dtype=float)) for u in controls])
    if len(xs) == 0:
        raise EnvError("episode_loss needs at least one state")
    if len(xs) != len(us):
        raise EnvError(f"{len(xs)} states but {len(us)} controls")
    T = len(xs)
    if reference is None:
        err = xs - env.target
    else:
        err = xs @ env.C.T - np.asarray(reference, dtype=float).reshape(T, -1)
    return float(np.sum(err**2) / T + env.beta * np.sum(us**2))


def sample_x0(env: EnvModel, batch: int, rng: np.random.Generator, low: float = -2.0,
              high: float = 2.0) -> np.ndarray:
    """Initial plant states; the tracking cursor starts at rest at the origin."""
    if env.name == "tracking":
        return np.zeros((batch, env.n))
    return rng.uniform(low, high, size=(batch, env.n))


# ---------------------------------------------------------------------------
# reference generator


DEFAULT_FREQS = tuple(TWO_PI * f for f in (0.10, 0.20, 0.30, 0.40))
# component k drives this output axis (0 = x, 1 = y)
COMPONENT_AXIS = (0, 1, 0, 1)
# block order of the oscillator state: omega1, omega3 (x axis), omega2, omega4 (y axis)
_BLOCK_ORDER = (0, 2, 1, 3)


@dataclass(frozen=True)
class ReferenceModel:
    """Sum of two cosines per axis.

    ``amplitudes``, ``frequencies`` and ``phases`` are indexed by component
    (omega1..omega4); components 1 and 3 drive x, 2 and 4 drive y.
    """

    amplitudes: tuple = (2.31, 2.31, 2.31, 2.31)
    frequencies: tuple = DEFAULT_FREQS
    phases: tuple = (0.0, 0.0, 0.0, 0.0)
    ramp_duration: float = 1.0
    dt: float = 0.1

    @property
    def a1(self) -> float:
        return self.amplitudes[0]

    @property
    def a2(self) -> float:
        return self.amplitudes[2]

    @property
    def R_d(self) -> np.ndarray:
        """Exact discretisation of the oscillator bank, one rotation block per component."""
        Rd = np.zeros((8, 8))
        for blk, k in enumerate(_BLOCK_ORDER):
            w = self.frequencies[k]
            c, s = math.cos(w * self.dt), math.sin(w * self.dt)
            i = 2 * blk
            Rd[i:i + 2, i:i + 2] = [[c, s / w], [-w * s, c]]
        return Rd

    @property
    def C_R(self) -> np.ndarray:
        out = np.zeros((2, 8))
        for blk, k in enumerate(_BLOCK_ORDER):
            out[COMPONENT_AXIS[k], 2 * blk] = 1.0
        return out

    def initial_state(self, phases=None) -> np.ndarray:
        """Oscillator state at t=0 (no ramp) for the given phases."""
        ph = self.phases if phases is None else phases
        r0 = np.zeros(8)
        for blk, k in enumerate(_BLOCK_ORDER):
            a, w = self.amplitudes[k], self.frequencies[k]
            r0[2 * blk] = a * math.cos(ph[k])
            r0[2 * blk + 1] = -a * w * math.sin(ph[k])
        return r0

    def only(self, k: int) -> "ReferenceModel":
        """Same reference with every component but ``k`` silenced."""
        amps = tuple(a if i == k else 0.0 for i, a in enumerate(self.amplitudes))
        return replace(self, amplitudes=amps)


def make_reference(a1: float = 2.31, a2: float = 2.31, frequencies=DEFAULT_FREQS,
                   phases=(0.0, 0.0, 0.0, 0.0), ramp_duration: float = 1.0,
                   dt: float = 0.1) -> ReferenceModel:
    return ReferenceModel((a1, a1, a2, a2), tuple(frequencies), tuple(phases), ramp_duration, dt)


def _ramp(t: np.ndarray, duration: float) -> np.ndarray:
    if duration <= 0:
        return np.ones_like(t)
    return np.minimum(t / duration, 1.0)


def reference_positions(ref: ReferenceModel, phases: np.ndarray, n_samples: int) -> np.ndarray:
    """Batched reference positions, shape (batch, n_samples, 2), for phases (batch, 4)."""
    phases = np.atleast_2d(np.asarray(phases, dtype=float))
    t = np.arange(n_samples) * ref.dt
    amp = np.asarray(ref.amplitudes, dtype=float)
    w = np.asarray(ref.frequencies, dtype=float)
    # (batch, n, 4)
    comps = amp * np.cos(t[None, :, None] * w + phases[:, None, :])
    out = np.zeros((phases.shape[0], n_samples, 2))
    for k, axis in enumerate(COMPONENT_AXIS):
        out[:, :, axis] += comps[:, :, k]
    return out * _ramp(t, ref.ramp_duration)[None, :, None]


def reference_trajectory(ref: ReferenceModel, n_samples: int) -> np.ndarray:
    """Reference positions for the model's own phases, shape (2, n_samples)."""
    if n_samples < 1:
        raise EnvError("n_samples must be >= 1")
    return reference_positions(ref, np.asarray(ref.phases)[None, :], n_samples)[0].T


def sample_phases(batch: int, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-math.pi, math.pi, size=(batch, 4))
