"""RNN controllers: discrete-time and Euler-discretised continuous-time.

The hidden update is ``h' = phi(W h + m y)`` (discrete) or
``h' = (1 - dt/tau) h + (dt/tau) phi(W h + m y)`` (continuous), with output
``u = z^T h'``. ``W`` is stored either in full or as a rank-1 pair ``u v^T``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .spectral import OrderParams

ACTIVATIONS = ("linear", "tanh")


class AgentError(ValueError):
    pass


@dataclass(frozen=True)
class RnnParams:
    m: np.ndarray                      # (N, d_in)
    z: np.ndarray                      # (N, d_out)
    W: Optional[np.ndarray] = None     # (N, N)
    u: Optional[np.ndarray] = None     # (N,)
    v: Optional[np.ndarray] = None     # (N,)
    activation: str = "linear"
    dt: Optional[float] = None         # None -> discrete time
    tau: float = 1.0
    g: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self):
        m = np.asarray(self.m, dtype=float)
        z = np.asarray(self.z, dtype=float)
        if m.ndim == 1:
            m = m[:, None]
        if z.ndim == 1:
            z = z[:, None]
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "z", z)
        N = m.shape[0]
        if N < 1 or z.shape[0] != N:
            raise AgentError(f"m and z must share N >= 1 rows, got {m.shape}, {z.shape}")
        full = self.W is not None
        low = self.u is not None or self.v is not None
        if full == low:
            raise AgentError("exactly one of W or (u, v) must be given")
        if full:
            W = np.asarray(self.W, dtype=float)
            if W.shape != (N, N):
                raise AgentError(f"W must be {N}x{N}, got {W.shape}")
            object.__setattr__(self, "W", W)
        else:
            if self.u is None or self.v is None:
                raise AgentError("rank-1 mode needs both u and v")
            u = np.asarray(self.u, dtype=float).reshape(-1)
            v = np.asarray(self.v, dtype=float).reshape(-1)
            if u.shape != (N,) or v.shape != (N,):
                raise AgentError("u and v must have length N")
            object.__setattr__(self, "u", u)
            object.__setattr__(self, "v", v)
        if self.activation not in ACTIVATIONS:
            raise AgentError(f"activation must be one of {ACTIVATIONS}")
        if self.dt is not None and not 0 < self.dt <= self.tau:
            raise AgentError(f"continuous mode needs 0 < dt <= tau, got dt={self.dt}, tau={self.tau}")
        for name in ("m", "z", "W", "u", "v"):
            arr = getattr(self, name)
            if arr is not None and not np.all(np.isfinite(arr)):
                raise AgentError(f"non-finite entries in {name}")

    @property
    def N(self) -> int:
        return self.m.shape[0]

    @property
    def d_in(self) -> int:
        return self.m.shape[1]

    @property
    def d_out(self) -> int:
        return self.z.shape[1]

    @property
    def rank1(self) -> bool:
        return self.W is None

    @property
    def continuous(self) -> bool:
        return self.dt is not None

    @property
    def leak(self) -> float:
        """Fraction of the new drive mixed in per step (1 in discrete time)."""
        return 1.0 if self.dt is None else self.dt / self.tau

    @property
    def W_eff(self) -> np.ndarray:
        return self.W if self.W is not None else np.outer(self.u, self.v)

    def groups(self) -> dict:
        """Parameter arrays keyed by trainable-group name."""
        out = {"m": self.m, "z": self.z}
        if self.rank1:
            out["u"], out["v"] = self.u, self.v
        else:
            out["W"] = self.W
        return out

    def with_groups(self, **arrays) -> "RnnParams":
        return replace(self, **arrays)


@dataclass
class AgentState:
    h: np.ndarray

    @classmethod
    def zeros(cls, N: int) -> "AgentState":
        return cls(np.zeros(N))


def phi(a: np.ndarray, activation: str) -> np.ndarray:
    return np.tanh(a) if activation == "tanh" else a


def init_rnn(N: int, g: float = 0.1, d_in: int = 1, d_out: int = 1, *, rank1: bool = False,
             activation: str = "linear", dt: Optional[float] = None, tau: float = 1.0,
             rng=None, seed: Optional[int] = None) -> RnnParams:
    """Random initialisation: m, z ~ N(0, 1/N) and W ~ N(0, g^2/N).

    In rank-1 mode u and v have variance g/sqrt(N) each, so the entries of
    u v^T have the same variance g^2/N as the full matrix.
    """
    if N < 1:
        raise AgentError("N must be >= 1")
    if g < 0:
        raise AgentError("g must be >= 0")
    if rng is None:
        rng = np.random.default_rng(seed)
    std = 1.0 / np.sqrt(N)
    m = rng.normal(0.0, std, size=(N, d_in))
    z = rng.normal(0.0, std, size=(N, d_out))
    if rank1:
        s = np.sqrt(g) / N**0.25
        u = rng.normal(0.0, 1.0, size=N) * s
        v = rng.normal(0.0, 1.0, size=N) * s
        return RnnParams(m, z, u=u, v=v, activation=activation, dt=dt, tau=tau, g=g, seed=seed)
    W = rng.normal(0.0, 1.0, size=(N, N)) * (g * std)
    return RnnParams(m, z, W=W, activation=activation, dt=dt, tau=tau, g=g, seed=seed)


def rnn_step(p: RnnParams, s: AgentState, y) -> tuple[AgentState, np.ndarray]:
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.shape != (p.d_in,):
        raise AgentError(f"input must have shape ({p.d_in},), got {y.shape}")
    if not np.all(np.isfinite(y)):
        raise AgentError("non-finite input")
    h = np.asarray(s.h, dtype=float)
    if p.rank1:
        rec = p.u * (p.v @ h)
    else:
        rec = p.W @ h
    drive = phi(rec + p.m @ y, p.activation)
    a = p.leak
    h_new = drive if a == 1.0 else (1.0 - a) * h + a * drive
    return AgentState(h_new), p.z.T @ h_new


def overlaps(p: RnnParams) -> OrderParams:
    if not p.rank1:
        raise AgentError("overlaps need rank-1 connectivity; use spectral.build_P for full W")
    if p.d_in != 1 or p.d_out != 1:
        raise AgentError("overlaps need scalar input and output")
    m, z = p.m[:, 0], p.z[:, 0]
    return OrderParams(float(z @ m), float(z @ p.u), float(p.v @ m), float(p.v @ p.u))


# ---------------------------------------------------------------------------
# JSON checkpoints


def params_to_dict(p: RnnParams) -> dict:
    d = {}
    if p.rank1:
        d["u"] = p.u.tolist()
        d["v"] = p.v.tolist()
    else:
        d["W"] = p.W.tolist()
    d["m"] = p.m.tolist()
    d["z"] = p.z.tolist()
    d["activation"] = p.activation
    if p.continuous:
        d["time_mode"] = {"kind": "continuous", "dt": p.dt, "tau": p.tau}
    else:
        d["time_mode"] = {"kind": "discrete"}
    d["g"] = p.g
    d["seed"] = p.seed
    return d


def params_from_dict(d: dict) -> RnnParams:
    known = {"W", "u", "v", "m", "z", "activation", "time_mode", "g", "seed"}
    extra = set(d) - known
    if extra:
        raise AgentError(f"unknown checkpoint fields: {sorted(extra)}")
    tm = d.get("time_mode", {"kind": "discrete"})
    if tm.get("kind") == "continuous":
        dt, tau = float(tm["dt"]), float(tm.get("tau", 1.0))
    elif tm.get("kind") == "discrete":
        dt, tau = None, 1.0
    else:
        raise AgentError(f"bad time_mode {tm!r}")
    kw = dict(activation=d.get("activation", "linear"), dt=dt, tau=tau,
              g=float(d.get("g", 0.0)), seed=d.get("seed"))
    if "W" in d:
        return RnnParams(np.array(d["m"]), np.array(d["z"]), W=np.array(d["W"]), **kw)
    return RnnParams(np.array(d["m"]), np.array(d["z"]), u=np.array(d["u"]), v=np.array(d["v"]), **kw)


def save_params(p: RnnParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_dict(p), fh)


def load_params(path) -> RnnParams:
    with open(path) as fh:
        return params_from_dict(json.load(fh))
