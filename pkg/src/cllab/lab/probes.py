"""Per-epoch measurements attached to a training run.

A probe is a callable ``probe(params) -> dict`` with a ``columns`` attribute
listing the keys it fills; :func:`cllab.optim.train` calls it every
``probe_stride`` epochs.
"""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Optional

import numpy as np

from ..agent import overlaps
from ..control import ControlError, fit_gain_from_agent, recover_gain_exact
from ..linenv import DivergenceError, EnvModel, ReferenceModel
from ..optim import closed_loop_loss
from ..spectral import build_P, eigenvalues, label_spectrum
from ..linenv import reference_positions


def linearised(p):
    """The agent with tanh replaced by its slope at the origin."""
    return p if p.activation == "linear" else replace(p, activation="linear")


class SpectrumProbe:
    """Spectral radius and labelled modes of the coupled (plant, agent) matrix.

    Nonlinear agents are linearised at ``h = 0``. For the tracking task only
    the (plant, agent) block is analysed: the reference oscillators sit on the
    unit circle and do not depend on the other states.
    """

    def __init__(self, env: EnvModel, ref: Optional[ReferenceModel] = None, rank1: bool = False):
        self.env = env
        self.ref = ref
        self.rank1 = rank1
        self.columns = ["rho", "lambda1_re", "lambda1_im", "lambda3"]
        if rank1:
            self.columns += ["zm", "zu", "vm", "vu"]

    def __call__(self, p) -> dict:
        q = linearised(p)
        P = build_P(self.env, q, self.ref)
        if self.ref is not None:
            nr = self.ref.R_d.shape[0]
            P = P[nr:, nr:]
        spec = label_spectrum(eigenvalues(P))
        lam = spec.lambda1
        out = {"rho": spec.spectral_radius,
               "lambda1_re": None if lam is None else float(lam.real),
               "lambda1_im": None if lam is None else float(lam.imag),
               "lambda3": spec.lambda3_value}
        if self.rank1:
            op = overlaps(p)
            out.update(zm=op.zm, zu=op.zu, vm=op.vm, vu=op.vu)
        return out


class GainProbe:
    """Least-squares effective gain, plus the eigenvector route for rank-1 linear agents."""

    def __init__(self, env: EnvModel, x0: np.ndarray, T: int = 50, exact: bool = False):
        self.env = env
        self.x0 = np.asarray(x0, dtype=float)
        self.T = T
        self.exact = exact
        self.columns = ["k1", "k2", "gain_regime", "gain_residual"]
        if exact:
            self.columns += ["k1_exact", "k2_exact"]

    def __call__(self, p) -> dict:
        out = dict.fromkeys(self.columns)
        try:
            g = fit_gain_from_agent(p, self.x0, self.T, self.env)
            out.update(k1=g.k1, k2=g.k2, gain_regime=g.regime, gain_residual=g.residual)
        except (ControlError, DivergenceError):
            pass
        if self.exact:
            try:
                e = recover_gain_exact(overlaps(p))
                out.update(k1_exact=e.k1, k2_exact=e.k2)
            except ControlError:
                pass
        return out


def freq_columns(n: int = 4) -> list:
    return [f"freq_loss_{k + 1}" for k in range(n)]


def _phase_grid(ref: ReferenceModel, k: int, n_phases: int) -> np.ndarray:
    ph = np.zeros((n_phases, len(ref.frequencies)))
    ph[:, k] = 2.0 * math.pi * np.arange(n_phases) / n_phases - math.pi
    return ph


def freq_decompose(p, env: EnvModel, ref: ReferenceModel, T: int = 300,
                   n_phases: int = 8) -> np.ndarray:
    """Tracking loss against each single-frequency component of ``ref``.

    Component ``k`` keeps its amplitude with the others silenced and is
    evaluated over ``n_phases`` evenly spaced phases.
    """
    out = np.zeros(len(ref.frequencies))
    for k in range(len(ref.frequencies)):
        single = ref.only(k)
        refs = reference_positions(single, _phase_grid(ref, k, n_phases), T + 1)
        x0 = np.zeros((n_phases, env.n))
        out[k] = closed_loop_loss(p, env, x0, T, refs, beta=0.0)
    return out


def silent_baseline(p, env: EnvModel, ref: ReferenceModel, T: int = 300,
                    n_phases: int = 8) -> np.ndarray:
    """Per-component loss of ``p`` with its readout zeroed: the cost of not tracking at all."""
    return freq_decompose(replace(p, z=np.zeros_like(p.z)), env, ref, T, n_phases)


class FreqProbe:
    def __init__(self, env: EnvModel, ref: ReferenceModel, T: int = 300, n_phases: int = 8):
        self.env, self.ref, self.T, self.n_phases = env, ref, T, n_phases
        self.columns = freq_columns(len(ref.frequencies))

    def __call__(self, p) -> dict:
        losses = freq_decompose(p, self.env, self.ref, self.T, self.n_phases)
        return {c: float(v) for c, v in zip(self.columns, losses)}
