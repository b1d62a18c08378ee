"""Closed-form approximations for the rank-1 linear agent on the double integrator.

Everything here is a function of the four overlaps (zm, zu, vm, vu) of
:class:`~cllab.spectral.OrderParams`:

* the early-learning loss when the recurrence is negligible,
* the squared modulus of the dominant complex pair given the real root,
* a first-order estimate of that real root,
* the loss at a fixed early step,
* a blend of the asymptotic and early terms, and gradient descent on it,
* the finite-horizon loss of the 4x4 effective system itself.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .spectral import (CoupledSpectrum, OrderParams, build_P_eff, char_poly_rank1, effective_spectrum,
                       solve_cubic, track_modes)

# second moment of Uniform(-2, 2)
X0_VAR = 4.0 / 3.0


class TheoryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# scalar approximations


def stage1_ratio(zm: float) -> float:
    """Squared modulus of the dominant root of lam^2 - 2 lam + (1 - zm)."""
    if zm >= 0:
        return (1.0 + math.sqrt(zm)) ** 2
    return 1.0 - zm


def stage1_loss(zm: float, T: int) -> float:
    """Geometric-series loss ``sum_{t=0..T} r^t`` with ``r`` from :func:`stage1_ratio`."""
    if T < 1:
        raise TheoryError("T must be >= 1")
    r = stage1_ratio(zm)
    if abs(r - 1.0) < 1e-12:
        return float(T + 1)
    return (1.0 - r ** (T + 1)) / (1.0 - r)


def stage1_roots(zm: float) -> tuple[complex, complex]:
    s = math.sqrt(zm) if zm >= 0 else 1j * math.sqrt(-zm)
    return (1.0 + s, 1.0 - s)


def vieta_mod_lambda1_sq(op: OrderParams, lam3: float) -> float:
    """|lam1|^2 implied by the cubic's coefficients and its real root ``lam3``."""
    return (2.0 * op.vu - op.zm + 1.0) + (-op.vu - 2.0) * lam3 + lam3 * lam3


def _perturbation_denominator(op: OrderParams) -> float:
    return op.vu * op.vu - 2.0 * op.vu - op.zm + 1.0


def lambda3_perturbation(op: OrderParams, tol: float = 1e-6) -> float:
    """Real root to first order in the cross overlaps zu*vm, around lam = vu."""
    D = _perturbation_denominator(op)
    if abs(D) <= tol:
        raise TheoryError(f"perturbation breaks down: denominator {D:.3g} is within {tol:g} of 0")
    return op.vu + op.zu * op.vm / D


def exact_lambda3(op: OrderParams) -> float:
    """Real root of the cubic nearest the first-order estimate."""
    roots = solve_cubic(*char_poly_rank1(op))
    real = [r.real for r in roots if abs(r.imag) <= 1e-9 * max(1.0, abs(r))]
    if not real:
        raise TheoryError("cubic has no real root")
    guess = op.vu + (op.zu * op.vm / _perturbation_denominator(op)
                     if abs(_perturbation_denominator(op)) > 1e-12 else 0.0)
    return min(real, key=lambda r: abs(r - guess))


@dataclass(frozen=True)
class PerturbationSweep:
    eps: np.ndarray
    errors: np.ndarray
    slope: float


def perturbation_sweep(zm: float = -0.05, vu: float = -0.5, eps=(0.2, 0.1, 0.05, 0.025),
                       scaling: str = "coupling") -> PerturbationSweep:
    """Error of :func:`lambda3_perturbation` over a range of perturbation sizes.

    With ``scaling="coupling"`` eps is the input-output coupling ``zu * vm``
    (split as ``zu = vm = sqrt(eps)``) and a first-order formula shows slope
    2. With ``scaling="overlaps"`` each of ``zu`` and ``vm`` equals eps, so the
    coupling is eps^2 and the slope is 4. ``slope`` is the least-squares
    log-log slope of error against eps.
    """
    if scaling not in ("coupling", "overlaps"):
        raise TheoryError(f"unknown scaling {scaling!r}")
    eps = np.asarray(eps, dtype=float)
    if eps.size < 2 or np.any(eps <= 0):
        raise TheoryError("need at least two positive eps values")
    errs = []
    for e in eps:
        s = math.sqrt(float(e)) if scaling == "coupling" else float(e)
        op = OrderParams(zm, s, s, vu)
        errs.append(abs(exact_lambda3(op) - lambda3_perturbation(op)))
    errs = np.array(errs)
    if np.any(errs <= 0):
        raise TheoryError("zero error: slope undefined")
    slope = float(np.polyfit(np.log(eps), np.log(errs), 1)[0])
    return PerturbationSweep(eps, errs, slope)


def L_inf(op: OrderParams, power: float = 1.0) -> float:
    v = vieta_mod_lambda1_sq(op, lambda3_perturbation(op))
    return _pow(v, power)


def _pow(v: float, power: float) -> float:
    if power == 1.0:
        return v
    if v <= 0:
        raise TheoryError(f"cannot raise non-positive |lam1|^2 estimate {v:.3g} to power {power}")
    return v ** power


def early_loss(op: OrderParams, t: int = 2) -> float:
    """Sum of squares of the plant block of ``P_eff^t``."""
    zm, a = op.zm, op.zu * op.vm
    if t == 1:
        return 3.0
    if t == 2:
        return 2.0 * zm * zm + 2.0 * zm + 6.0
    if t == 3:
        return (zm + 1.0) ** 2 + (zm + 3.0) ** 2 + (a + 2.0 * zm) ** 2 + (a + 3.0 * zm + 1.0) ** 2
    raise TheoryError(f"early loss is defined for t in {{1, 2, 3}}, got {t}")


def early_loss_grad(op: OrderParams, t: int = 2) -> np.ndarray:
    zm, zu, vm, vu = op.as_tuple()
    a = zu * vm
    if t == 1:
        return np.zeros(4)
    if t == 2:
        return np.array([4.0 * zm + 2.0, 0.0, 0.0, 0.0])
    if t == 3:
        dzm = 2 * (zm + 1) + 2 * (zm + 3) + 4 * (a + 2 * zm) + 6 * (a + 3 * zm + 1)
        da = 2 * (a + 2 * zm) + 2 * (a + 3 * zm + 1)
        return np.array([dzm, da * vm, da * zu, 0.0])
    raise TheoryError(f"early loss is defined for t in {{1, 2, 3}}, got {t}")


def L_inf_grad(op: OrderParams, power: float = 1.0) -> np.ndarray:
    zm, zu, vm, vu = op.as_tuple()
    D = _perturbation_denominator(op)
    lam3 = lambda3_perturbation(op)
    # d lam3 / d(zm, zu, vm, vu)
    dl3 = np.array([zu * vm / D ** 2, vm / D, zu / D, 1.0 - zu * vm * (2.0 * vu - 2.0) / D ** 2])
    dV_dl3 = -vu - 2.0 + 2.0 * lam3
    direct = np.array([-1.0, 0.0, 0.0, 2.0 - lam3])
    g = direct + dV_dl3 * dl3
    if power != 1.0:
        v = vieta_mod_lambda1_sq(op, lam3)
        g = g * power * _pow(v, power - 1.0) if v > 0 else g * math.nan
    return g


# ---------------------------------------------------------------------------
# blended surrogate


@dataclass(frozen=True)
class SurrogateConfig:
    alpha: float = 0.5
    t_early: int = 2
    T_horizon: int = 50
    lr: float = 1e-4
    steps: int = 50
    power: float = 1.0
    beta: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise TheoryError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.t_early not in (1, 2, 3):
            raise TheoryError(f"t_early must be 1, 2 or 3, got {self.t_early}")
        if self.T_horizon < 1 or self.steps < 0 or not self.lr > 0 or not self.power > 0:
            raise TheoryError("need T_horizon >= 1, steps >= 0, lr > 0, power > 0")


def surrogate_loss(op: OrderParams, cfg: SurrogateConfig) -> float:
    a = cfg.alpha
    out = 0.0
    if a > 0:
        out += a * L_inf(op, cfg.power)
    if a < 1:
        out += (1.0 - a) * early_loss(op, cfg.t_early)
    return out


def surrogate_grad(op: OrderParams, cfg: SurrogateConfig) -> np.ndarray:
    a = cfg.alpha
    g = np.zeros(4)
    if a > 0:
        g += a * L_inf_grad(op, cfg.power)
    if a < 1:
        g += (1.0 - a) * early_loss_grad(op, cfg.t_early)
    return g


# ---------------------------------------------------------------------------
# finite-horizon loss of the effective 4D system


def _effective_init(x0) -> np.ndarray:
    """Second-moment matrix of the initial 4D state (kappas start at 0)."""
    S = np.zeros((4, 4))
    if x0 is None:
        S[0, 0] = S[1, 1] = X0_VAR
    else:
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        S[:2, :2] = x0.T @ x0 / x0.shape[0]
    return S


def effective_loss(op: OrderParams, T: int = 50, beta: float = 0.0, x0=None) -> float:
    """Episode cost of ``s' = P_eff s`` with ``u_t = zm k_m + zu k_u``.

    Averaged exactly over ``x0 ~ U([-2, 2]^2)`` through second moments, or
    over the rows of ``x0`` if a batch is given.
    """
    return effective_loss_and_grad(op, T, beta, x0)[0]


def effective_loss_and_grad(op: OrderParams, T: int = 50, beta: float = 0.0, x0=None):
    P = build_P_eff(op)
    c = np.array([0.0, 0.0, op.zm, op.zu])
    E = np.zeros((4, 4))
    E[0, 0] = E[1, 1] = 1.0 / T
    G = E + beta * np.outer(c, c)
    S = [_effective_init(x0)]
    loss = 0.0
    for _ in range(T):
        S.append(P @ S[-1] @ P.T)
        loss += float(np.sum(G * S[-1]))
    if not math.isfinite(loss):
        raise TheoryError("effective rollout diverged")
    # adjoint: Lam_t = dLoss/dS_t
    gP = np.zeros((4, 4))
    gc = np.zeros(4)
    Lam = np.zeros((4, 4))
    for t in range(T, 0, -1):
        Lam = G + Lam
        gc += 2.0 * beta * S[t] @ c
        gP += 2.0 * Lam @ P @ S[t - 1]
        Lam = P.T @ Lam @ P
    grad = np.array([gP[1, 2] + gc[2], gP[1, 3] + gc[3], gP[3, 2], gP[3, 3]])
    return loss, grad


# ---------------------------------------------------------------------------
# descent on the order parameters


@dataclass
class DescentResult:
    ops: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    spectra: list = field(default_factory=list)
    mode: str = "surrogate"

    @property
    def lambda1_path(self) -> np.ndarray:
        """Positive-imaginary dominant eigenvalue per step (nan when none)."""
        return np.array([s.lambda1 if s.lambda1 is not None else complex(math.nan, math.nan)
                         for s in self.spectra])

    def rows(self) -> list:
        out = []
        for k, (op, l, s) in enumerate(zip(self.ops, self.losses, self.spectra)):
            lam = s.lambda1
            out.append({"step": k, "loss": l, "zm": op.zm, "zu": op.zu, "vm": op.vm, "vu": op.vu,
                        "rho": s.spectral_radius,
                        "lambda1_re": None if lam is None else float(lam.real),
                        "lambda1_im": None if lam is None else float(lam.imag),
                        "lambda3": s.lambda3_value})
        return out


def descend_order_params(op0: OrderParams, cfg: SurrogateConfig, mode: str = "surrogate",
                         x0=None) -> DescentResult:
    """Plain gradient descent on (zm, zu, vm, vu).

    ``mode="surrogate"`` minimises :func:`surrogate_loss`; ``mode="effective"``
    minimises the finite-horizon cost of the 4D system over ``cfg.T_horizon``
    steps with penalty ``cfg.beta``. The spectrum of ``P_eff`` is recorded
    at every step with modes continued between steps.
    """
    if mode not in ("surrogate", "effective"):
        raise TheoryError(f"unknown descent mode {mode!r}")

    def value_grad(op):
        if mode == "surrogate":
            return surrogate_loss(op, cfg), surrogate_grad(op, cfg)
        return effective_loss_and_grad(op, cfg.T_horizon, cfg.beta, x0)

    res = DescentResult(mode=mode)
    op = op0
    prev: Optional[CoupledSpectrum] = None
    for k in range(cfg.steps + 1):
        loss, g = value_grad(op)
        spec = effective_spectrum(op)
        if prev is not None:
            _, spec = track_modes(prev, spec)
        res.ops.append(op)
        res.losses.append(loss)
        res.spectra.append(spec)
        prev = spec
        if k == cfg.steps:
            break
        new = op.as_array() - cfg.lr * g
        if not np.all(np.isfinite(new)):
            raise TheoryError(f"descent produced non-finite order parameters at step {k + 1}")
        op = OrderParams.from_array(new)
    return res
