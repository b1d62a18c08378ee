"""Batched deterministic rollouts and their exact reverse-mode gradients.

Step convention (closed loop), for t = 0..T-1 with h_0 = 0::

    u_t     = Z^T h_t
    x_{t+1} = clamp(A x_t + B u_t)
    i_{t+1} = (C x_{t+1}, r_t)              # r only for the tracking task
    h_{t+1} = (1 - a) h_t + a phi(W h_t + M i_{t+1})

so the agent sees the post-step observation, matching the coupled matrix
``P``. The episode cost is ``(1/T) sum_{t=1..T} |e_t|^2 + beta sum_{t=1..T} |u_t|^2``
averaged over the batch, where ``e_t = x_t - x*`` or ``C x_t - r_t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .linenv import DivergenceError


@dataclass
class ClosedRollout:
    xs: np.ndarray      # (T+1, B, n)
    hs: np.ndarray      # (T+1, B, N)
    us: np.ndarray      # (T+1, B, d_out)
    pre: np.ndarray     # (T, B, N) pre-activations of h_{t+1}
    ins: np.ndarray     # (T, B, d_in) inputs consumed by h_{t+1}
    masks: Optional[np.ndarray]  # (T, B, n) True where x_{t+1} was not clamped
    err: np.ndarray     # (T+1, B, n_err); row 0 unused

    @property
    def T(self) -> int:
        return self.pre.shape[0]


def _phi(a, activation):
    return np.tanh(a) if activation == "tanh" else a


def _dphi(a, activation):
    if activation == "tanh":
        th = np.tanh(a)
        return 1.0 - th * th
    return 1.0


def _check(arr, what, t):
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(f"non-finite {what} at step {t}")


def _agent_inputs(env, x_next, refs, t):
    y = x_next @ env.C.T
    if refs is None:
        return y
    return np.concatenate([y, refs[:, t, :]], axis=1)


def _errors(env, x, refs, t):
    if refs is None:
        return x - env.target
    return x @ env.C.T - refs[:, t, :]


def forward_closed(p, env, x0, T: int, refs=None) -> ClosedRollout:
    """Roll agent ``p`` against ``env`` from states ``x0`` (B, n).

    ``refs`` (B, T+1, 2) switches on tracking inputs and errors.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    Bsz, n = x0.shape
    N, a = p.N, p.leak
    W, M, Z = p.W_eff, p.m, p.z
    xs = np.zeros((T + 1, Bsz, n))
    hs = np.zeros((T + 1, Bsz, N))
    us = np.zeros((T + 1, Bsz, p.d_out))
    pre = np.zeros((T, Bsz, N))
    ins = np.zeros((T, Bsz, p.d_in))
    n_err = n if refs is None else env.n_obs
    err = np.zeros((T + 1, Bsz, n_err))
    clamp = env.state_clamp
    masks = np.zeros((T, Bsz, n), dtype=bool) if clamp is not None else None
    xs[0] = x0
    guard = env.divergence_guard
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            xn = xs[t] @ env.A.T + us[t] @ env.B.T
            if clamp is not None:
                masks[t] = np.abs(xn) <= clamp
                xn = np.clip(xn, -clamp, clamp)
            _check(xn, "plant state", t + 1)
            if guard is not None and np.max(np.abs(xn)) > guard:
                raise DivergenceError(f"|x| exceeded {guard:g} at step {t + 1}")
            xs[t + 1] = xn
            err[t + 1] = _errors(env, xn, refs, t + 1)
            inp = _agent_inputs(env, xn, refs, t)
            ins[t] = inp
            act = hs[t] @ W.T + inp @ M.T
            pre[t] = act
            drive = _phi(act, p.activation)
            hs[t + 1] = drive if a == 1.0 else (1.0 - a) * hs[t] + a * drive
            _check(hs[t + 1], "hidden state", t + 1)
            us[t + 1] = hs[t + 1] @ Z
    return ClosedRollout(xs, hs, us, pre, ins, masks, err)


def forward_policy(env, policy: Callable, x0, T: int, refs=None):
    """Plant driven by a state-feedback ``policy(x) -> u``.

    Returns states (T+1, B, n), controls (T+1, B, d_out) with u_t = policy(x_t),
    and the agent-facing inputs (T, B, d_in) of steps 1..T.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    Bsz, n = x0.shape
    xs = np.zeros((T + 1, Bsz, n))
    xs[0] = x0
    us = [np.atleast_2d(policy(x0))]
    ins = []
    clamp = env.state_clamp
    for t in range(T):
        xn = xs[t] @ env.A.T + us[t] @ env.B.T
        if clamp is not None:
            xn = np.clip(xn, -clamp, clamp)
        _check(xn, "plant state", t + 1)
        xs[t + 1] = xn
        ins.append(_agent_inputs(env, xn, refs, t))
        us.append(np.atleast_2d(policy(xn)))
    return xs, np.stack(us), np.stack(ins)


def closed_loss(ro: ClosedRollout, beta: float, per_episode: bool = False):
    T = ro.T
    state = np.sum(ro.err[1:] ** 2, axis=(0, 2)) / T
    effort = beta * np.sum(ro.us[1:] ** 2, axis=(0, 2))
    per = state + effort
    if per_episode:
        return per
    return float(np.mean(per))


def _group_grads(p, gW, gM, gZ) -> dict:
    out = {"m": gM, "z": gZ}
    if p.rank1:
        out["u"] = gW @ p.v
        out["v"] = gW.T @ p.u
    else:
        out["W"] = gW
    return out


def backward_closed(p, env, ro: ClosedRollout, beta: float) -> dict:
    T = ro.T
    Bsz = ro.xs.shape[1]
    N, a = p.N, p.leak
    W, M, Z = p.W_eff, p.m, p.z
    A, Bm, C = env.A, env.B, env.C
    c = env.n_obs
    tracking = ro.err.shape[2] != ro.xs.shape[2]
    E = C if tracking else None
    k_err = 2.0 / (T * Bsz)
    k_u = 2.0 * beta / Bsz
    gx = np.zeros((Bsz, env.n))
    gh = np.zeros((Bsz, N))
    gW = np.zeros((N, N))
    gM = np.zeros_like(M)
    gZ = np.zeros_like(Z)
    for t in range(T, 0, -1):
        ge = k_err * ro.err[t]
        gx += ge @ E if tracking else ge
        if beta:
            gu_d = k_u * ro.us[t]
            gZ += ro.hs[t].T @ gu_d
            gh += gu_d @ Z.T
        ga = gh * (a * _dphi(ro.pre[t - 1], p.activation))
        gW += ga.T @ ro.hs[t - 1]
        gM += ga.T @ ro.ins[t - 1]
        gx += (ga @ M[:, :c]) @ C
        gpre = gx if ro.masks is None else gx * ro.masks[t - 1]
        gu = gpre @ Bm
        gZ += ro.hs[t - 1].T @ gu
        gh = ga @ W + gu @ Z.T + ((1.0 - a) * gh if a != 1.0 else 0.0)
        gx = gpre @ A
    return _group_grads(p, gW, gM, gZ)


# ---------------------------------------------------------------------------
# open loop: student and teacher read the same input sequence


@dataclass
class OpenRollout:
    hs: np.ndarray    # (T+1, B, N)
    pre: np.ndarray   # (T, B, N)
    ins: np.ndarray   # (T, B, d_in) input i_t consumed by h_t, t = 1..T
    out: np.ndarray   # (T, B, d_out) u_t, t = 1..T


def forward_open(p, ins) -> OpenRollout:
    ins = np.asarray(ins, dtype=float)
    T, Bsz, _ = ins.shape
    N, a = p.N, p.leak
    W, M, Z = p.W_eff, p.m, p.z
    hs = np.zeros((T + 1, Bsz, N))
    pre = np.zeros((T, Bsz, N))
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            act = hs[t] @ W.T + ins[t] @ M.T
            pre[t] = act
            drive = _phi(act, p.activation)
            hs[t + 1] = drive if a == 1.0 else (1.0 - a) * hs[t] + a * drive
            _check(hs[t + 1], "hidden state", t + 1)
    out = hs[1:] @ Z
    return OpenRollout(hs, pre, ins, out)


def imitation_loss(ro: OpenRollout, targets) -> float:
    T = ro.out.shape[0]
    return float(np.mean(np.sum((ro.out - targets) ** 2, axis=(0, 2)) / T))


def backward_open(p, ro: OpenRollout, targets) -> dict:
    T, Bsz, _ = ro.ins.shape
    a = p.leak
    W, M, Z = p.W_eff, p.m, p.z
    diff = (ro.out - targets) * (2.0 / (T * Bsz))
    gW = np.zeros((p.N, p.N))
    gM = np.zeros_like(M)
    gZ = np.zeros_like(Z)
    gh = np.zeros((Bsz, p.N))
    for t in range(T, 0, -1):
        g_out = diff[t - 1]
        gZ += ro.hs[t].T @ g_out
        gh = gh + g_out @ Z.T
        ga = gh * (a * _dphi(ro.pre[t - 1], p.activation))
        gW += ga.T @ ro.hs[t - 1]
        gM += ga.T @ ro.ins[t - 1]
        gh = ga @ W + ((1.0 - a) * gh if a != 1.0 else 0.0)
    return _group_grads(p, gW, gM, gZ)
