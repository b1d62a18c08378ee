"""Classical control companions to the learned controllers.

State feedback ``u = -K x`` on the double integrator gives the closed-loop
matrix ``[[1, 1], [-k1, 1 - k2]]`` with characteristic polynomial
``lam^2 - (2 - k2) lam + (1 - k2 + k1)``. This module classifies that
system, estimates effective gains of a trained agent, and solves the
Riccati and Kalman fixed points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .linenv import EnvModel, make_double_integrator
from .spectral import OrderParams, build_P_eff, sort_roots

STABLE = "stable"
OSC_UNSTABLE = "oscillatory_unstable"
REAL_UNSTABLE = "real_unstable"
REGIMES = (STABLE, OSC_UNSTABLE, REAL_UNSTABLE)

# |lam| within this of 1 counts as unstable
MARGINAL_TOL = 1e-9


class ControlError(ValueError):
    pass


@dataclass(frozen=True)
class GainEstimate:
    k1: float
    k2: float
    method: str
    residual: Optional[float] = None
    regime: str = ""

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.k1, self.k2]])


@dataclass(frozen=True)
class RiccatiSolution:
    M: np.ndarray
    K: np.ndarray
    iterations: int
    residual: float


# ---------------------------------------------------------------------------
# stability of u = -k1 x1 - k2 x2 on the double integrator


def closed_loop_matrix(k1: float, k2: float) -> np.ndarray:
    return np.array([[1.0, 1.0], [-k1, 1.0 - k2]])


def closed_loop_eigs(k1: float, k2: float) -> np.ndarray:
    b = 2.0 - k2
    c = 1.0 - k2 + k1
    disc = b * b - 4.0 * c
    if disc >= 0:
        s = math.sqrt(disc)
        roots = [complex((b + s) / 2.0), complex((b - s) / 2.0)]
    else:
        s = math.sqrt(-disc)
        roots = [complex(b / 2.0, s / 2.0), complex(b / 2.0, -s / 2.0)]
    return sort_roots(roots)


def _regime(eigs) -> str:
    if all(abs(l) < 1.0 - MARGINAL_TOL for l in eigs):
        return STABLE
    if abs(eigs[0].imag) > 0.0:
        return OSC_UNSTABLE
    return REAL_UNSTABLE


def stability_classify(k1: float, k2: float) -> tuple[str, np.ndarray]:
    eigs = closed_loop_eigs(k1, k2)
    return _regime(eigs), eigs


def _rollout_loss(k1: float, k2: float, x0: np.ndarray, T: int) -> float:
    Mcl = closed_loop_matrix(k1, k2)
    x = x0.copy()
    total = 0.0
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(T):
            x = x @ Mcl.T
            total += float(np.mean(np.sum(x * x, axis=1)))
    return total / T


@dataclass
class StabilityMap:
    k1: np.ndarray            # (n1,) cell centres
    k2: np.ndarray            # (n2,)
    regime: np.ndarray        # (n2, n1) str
    radius: np.ndarray        # (n2, n1) max |lam|
    log_loss: np.ndarray      # (n2, n1) log10 of the rollout loss

    def rows(self):
        for j, b in enumerate(self.k2):
            for i, a in enumerate(self.k1):
                yield float(a), float(b), str(self.regime[j, i]), float(self.log_loss[j, i])

    def to_csv(self) -> str:
        lines = ["k1,k2,regime,log_loss"]
        lines += [f"{a!r},{b!r},{r},{l!r}" for a, b, r, l in self.rows()]
        return "\n".join(lines) + "\n"


def default_x0_set(n: int = 16, seed: int = 0) -> np.ndarray:
    """Fixed initial states for the background loss, uniform on [-2, 2]^2."""
    return np.random.default_rng(seed).uniform(-2.0, 2.0, size=(n, 2))


def stability_map(k1_range=(-1.0, 3.0), k2_range=(-1.0, 4.0), n1: int = 81, n2: int = 101,
                  T: int = 50, x0: Optional[np.ndarray] = None) -> StabilityMap:
    """Regime, spectral radius and 50-step rollout loss on a grid of gains."""
    if n1 < 1 or n2 < 1:
        raise ControlError("grid needs at least one cell per axis")
    x0 = default_x0_set() if x0 is None else np.atleast_2d(np.asarray(x0, dtype=float))
    k1 = np.linspace(*k1_range, n1)
    k2 = np.linspace(*k2_range, n2)
    regime = np.empty((n2, n1), dtype=object)
    radius = np.zeros((n2, n1))
    logl = np.zeros((n2, n1))
    for j, b in enumerate(k2):
        for i, a in enumerate(k1):
            reg, eigs = stability_classify(a, b)
            regime[j, i] = reg
            radius[j, i] = abs(eigs[0])
            loss = _rollout_loss(a, b, x0, T)
            logl[j, i] = math.log10(loss) if math.isfinite(loss) and loss > 0 else math.inf
    return StabilityMap(k1, k2, regime, radius, logl)


def stability_boundary(k1: np.ndarray, n_k2: int = 2001, k2_range=(-1.0, 4.0)) -> list:
    """Lower and upper k2 edge of the stable region for each k1 (None if empty), by scanning k2."""
    out = []
    ks = np.linspace(*k2_range, n_k2)
    for a in np.atleast_1d(k1):
        st = [b for b in ks if stability_classify(a, b)[0] == STABLE]
        out.append((min(st), max(st)) if st else None)
    return out


# ---------------------------------------------------------------------------
# effective gains


def fit_gain(xs, us, ridge: float = 1e-8, truncate: Optional[float] = 50.0) -> GainEstimate:
    """Least-squares fit of ``u = -k1 x1 - k2 x2``.

    ``xs`` is (T, B, 2) or (n, 2) and ``us`` matches with a trailing scalar.
    With ``truncate`` each episode is cut at its first step with
    ``|x| > truncate`` so divergent rollouts do not dominate the design.
    """
    xs = np.asarray(xs, dtype=float)
    us = np.asarray(us, dtype=float)
    if xs.ndim == 2:
        xs = xs[:, None, :]
    us = us.reshape(xs.shape[0], xs.shape[1])
    if truncate is not None:
        big = np.linalg.norm(xs, axis=2) > truncate
        first = np.where(big.any(axis=0), big.argmax(axis=0), xs.shape[0])
        keep = np.arange(xs.shape[0])[:, None] < first[None, :]
    else:
        keep = np.ones(xs.shape[:2], dtype=bool)
    X = xs[keep]
    y = us[keep]
    if X.shape[0] < 2:
        raise ControlError("need at least two state samples")
    G = X.T @ X
    if np.linalg.matrix_rank(X) < 2:
        raise ControlError("state samples are linearly dependent")
    G = G + ridge * np.eye(2)
    k = -np.linalg.solve(G, X.T @ y)
    resid = float(np.sqrt(np.mean((y + X @ k) ** 2)))
    reg, _ = stability_classify(k[0], k[1])
    return GainEstimate(float(k[0]), float(k[1]), "least_squares", resid, reg)


def fit_gain_from_agent(p, x0, T: int = 50, env: Optional[EnvModel] = None,
                        truncate: Optional[float] = 50.0) -> GainEstimate:
    """Roll the agent in closed loop and fit its effective gain on (x_t, u_t), t=1..T."""
    from .rollout import forward_closed
    env = make_double_integrator() if env is None else env
    r = forward_closed(p, env, x0, T)
    return fit_gain(r.xs[1:], r.us[1:, :, 0], truncate=truncate)


def recover_gain_exact(op: OrderParams, gap: float = 1.0) -> GainEstimate:
    """Gains implied by the dominant complex eigenvector of the 4x4 effective system.

    On the invariant plane of the dominant pair the control is an exact
    linear function of the plant state. With ``q`` the eigenvector for
    ``lam`` and ``(q1, q2)`` its plant part, the velocity row gives
    ``(lam - 1) q2 = -(k1 q1 + k2 q2)``; its real and imaginary parts form a
    2x2 real system for (k1, k2). ``gap`` requires ``|lam3| < gap |lam1|``.
    """
    P = build_P_eff(op)
    vals, vecs = np.linalg.eig(P)
    order = sorted(range(4), key=lambda i: (-abs(vals[i]), -vals[i].imag))
    top = order[0]
    lam = complex(vals[top])
    if abs(lam.imag) <= 1e-12 * max(1.0, abs(lam)):
        raise ControlError("no dominant complex-conjugate pair")
    rest = [i for i in order if abs(vals[i] - lam.conjugate()) > 1e-9 and i != top]
    if rest and not abs(vals[rest[0]]) < gap * abs(lam):
        raise ControlError("no spectral gap below the dominant pair")
    # the relation is invariant to complex rescaling of q
    q1, q2 = vecs[0, top], vecs[1, top]
    Q = np.array([[q1.real, q2.real], [q1.imag, q2.imag]])
    rhs = -(lam - 1.0) * q2
    b = np.array([rhs.real, rhs.imag])
    if abs(np.linalg.det(Q)) < 1e-12 * max(1.0, float(np.sum(Q * Q))):
        raise ControlError("degenerate eigenvector: its plant part spans a line")
    k = np.linalg.solve(Q, b)
    reg, _ = stability_classify(k[0], k[1])
    return GainEstimate(float(k[0]), float(k[1]), "eigenvector_exact", None, reg)


# ---------------------------------------------------------------------------
# optimal control and estimation


def _riccati_map(M, A, B, Q, R):
    S = R + B.T @ M @ B
    K = np.linalg.solve(S, B.T @ M @ A)
    Mn = Q + A.T @ M @ A - A.T @ M @ B @ K
    return 0.5 * (Mn + Mn.T), K


def solve_lqr(env: EnvModel, Q=None, R=None, tol: float = 1e-12, max_iter: int = 100000
              ) -> RiccatiSolution:
    """Infinite-horizon LQR by value iteration on the Riccati map, from M = Q."""
    A, B = env.A, env.B
    n, b = B.shape
    Q = np.eye(n) if Q is None else np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.eye(b) if R is None else np.atleast_2d(np.asarray(R, dtype=float))
    if np.min(np.linalg.eigvalsh(0.5 * (Q + Q.T))) < -1e-12:
        raise ControlError("Q must be positive semidefinite")
    if np.min(np.linalg.eigvalsh(0.5 * (R + R.T))) <= 0:
        raise ControlError("R must be positive definite")
    M = Q.copy()
    res = math.inf
    for it in range(1, max_iter + 1):
        Mn, K = _riccati_map(M, A, B, Q, R)
        if not np.all(np.isfinite(Mn)):
            raise ControlError(f"Riccati iteration diverged at step {it}; (A, B) not stabilizable")
        res = float(np.max(np.abs(Mn - M)))
        M = Mn
        if res < tol * max(1.0, float(np.max(np.abs(M)))):
            _, K = _riccati_map(M, A, B, Q, R)
            rho = float(np.max(np.abs(np.linalg.eigvals(A - B @ K))))
            if not rho < 1.0:
                raise ControlError(f"Riccati fixed point does not stabilize (rho={rho:.6g}); "
                                   "(A, B) not stabilizable")
            Mf, _ = _riccati_map(M, A, B, Q, R)
            return RiccatiSolution(M, K, it, float(np.max(np.abs(Mf - M))))
    raise ControlError(f"Riccati iteration did not converge in {max_iter} steps "
                       f"(last residual {res:.3g}); (A, B) may not be stabilizable")


def riccati_residual(M, env: EnvModel, Q=None, R=None) -> float:
    n, b = env.B.shape
    Q = np.eye(n) if Q is None else np.atleast_2d(Q)
    R = np.eye(b) if R is None else np.atleast_2d(R)
    Mn, _ = _riccati_map(np.asarray(M, dtype=float), env.A, env.B, Q, R)
    return float(np.max(np.abs(Mn - M)))


def kalman_gain(env: EnvModel, W_n=None, V=None, tol: float = 1e-13, max_iter: int = 100000):
    """Steady-state predictor gain ``L`` and error covariance ``Sigma``.

    Iterates ``L = A S C^T (C S C^T + V)^-1`` and
    ``S' = (A - L C) S A^T + W_n`` from ``S = W_n`` to a fixed point.
    """
    A, C = env.A, env.C
    n, c = env.n, env.n_obs
    W_n = np.eye(n) if W_n is None else np.atleast_2d(np.asarray(W_n, dtype=float))
    V = np.eye(c) if V is None else np.atleast_2d(np.asarray(V, dtype=float))
    if np.min(np.linalg.eigvalsh(0.5 * (V + V.T))) <= 0:
        raise ControlError("V must be positive definite")
    if np.min(np.linalg.eigvalsh(0.5 * (W_n + W_n.T))) < -1e-12:
        raise ControlError("W_n must be positive semidefinite")

    def step(S):
        L = np.linalg.solve(C @ S @ C.T + V, C @ S @ A.T).T
        Sn = (A - L @ C) @ S @ A.T + W_n
        return 0.5 * (Sn + Sn.T), L

    S = W_n.copy()
    res = math.inf
    for it in range(1, max_iter + 1):
        Sn, L = step(S)
        res = float(np.max(np.abs(Sn - S)))
        S = Sn
        if res < tol * max(1.0, float(np.max(np.abs(S)))):
            _, L = step(S)
            return L, S, it, kalman_residual(S, env, W_n, V)
    raise ControlError(f"Kalman iteration did not converge in {max_iter} steps (last residual {res:.3g})")


def kalman_residual(S, env: EnvModel, W_n, V) -> float:
    A, C = env.A, env.C
    L = np.linalg.solve(C @ S @ C.T + V, C @ S @ A.T).T
    Sn = (A - L @ C) @ S @ A.T + W_n
    return float(np.max(np.abs(Sn - S)))


def lqr_teacher_policy(K) -> Callable:
    """State-feedback policy ``u = -K x`` for batched states (B, n) or a single state."""
    K = np.atleast_2d(np.asarray(K, dtype=float))

    def policy(x):
        x = np.asarray(x, dtype=float)
        return -(x @ K.T)

    policy.K = K
    return policy
