"""Coupled agent-plant matrices and their spectra.

The joint state ``s = (x, h)`` of a linear agent in closed loop evolves as
``s' = P s``. With rank-1 recurrence ``W = u v^T`` the non-zero spectrum of
``P`` is carried by a 4x4 effective matrix parameterised by four overlaps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class SpectralError(ValueError):
    pass


@dataclass(frozen=True)
class OrderParams:
    """Overlaps z.m, z.u, v.m and v.u of a rank-1 linear agent."""

    zm: float
    zu: float
    vm: float
    vu: float

    def __post_init__(self):
        if not all(math.isfinite(x) for x in self.as_tuple()):
            raise SpectralError(f"non-finite order parameters {self.as_tuple()}")

    def as_tuple(self) -> tuple:
        return (self.zm, self.zu, self.vm, self.vu)

    def as_array(self) -> np.ndarray:
        return np.array(self.as_tuple())

    @classmethod
    def from_array(cls, a) -> "OrderParams":
        a = np.asarray(a, dtype=float)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


# ---------------------------------------------------------------------------
# matrices


def build_P(env, p, ref=None) -> np.ndarray:
    """Closed-loop transition matrix of plant ``env`` driven by linear agent ``p``.

    Block layout is (x, h), or (r, x, h) when a reference model is given;
    in the latter case the agent input is ``(C x, C_R r)``. The (h, h) block
    carries ``m C B z^T`` which vanishes whenever the sensors do not see the
    actuated states directly.
    """
    if p.activation != "linear":
        raise SpectralError("the coupled matrix is only defined for linear agents")
    A, B, C = env.A, env.B, env.C
    n, N = env.n, p.N
    a = p.leak
    Z = p.z
    if Z.shape[1] != env.n_inputs:
        raise SpectralError(f"agent has {Z.shape[1]} outputs but plant takes {env.n_inputs}")
    c = env.n_obs
    M_x = p.m[:, :c]
    if ref is None and p.d_in != c:
        raise SpectralError(f"agent reads {p.d_in} inputs but plant emits {c}")
    if ref is not None and p.d_in != c + ref.C_R.shape[0]:
        raise SpectralError("tracking agent must read (C x, C_R r)")
    BZ = B @ Z.T
    hh = (1.0 - a) * np.eye(N) + a * (p.W_eff + M_x @ (C @ BZ))
    hx = a * (M_x @ (C @ A))
    if ref is None:
        return np.block([[A, BZ], [hx, hh]])
    Rd, CR = ref.R_d, ref.C_R
    M_r = p.m[:, c:]
    nr = Rd.shape[0]
    return np.block([
        [Rd, np.zeros((nr, n)), np.zeros((nr, N))],
        [np.zeros((n, nr)), A, BZ],
        [a * (M_r @ CR), hx, hh],
    ])


def build_P_eff(op: OrderParams) -> np.ndarray:
    """4x4 dynamics of (x1, x2, kappa_m, kappa_u) with h = kappa_m m + kappa_u u."""
    return np.array([
        [1.0, 1.0, 0.0, 0.0],
        [0.0, 1.0, op.zm, op.zu],
        [1.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, op.vm, op.vu],
    ])


def char_poly_rank1(op: OrderParams) -> tuple:
    """Coefficients (a, b, c, d) of the cubic whose roots are the non-zero eigenvalues."""
    zm, zu, vm, vu = op.as_tuple()
    return (1.0, -vu - 2.0, 2.0 * vu - zm + 1.0, vu * zm - vu - zu * vm)


def general_W_char_equation(env, p, lam: complex) -> complex:
    """Schur-complement form of det(P - lam I) in terms of the agent block.

    For the double integrator this is
    ``(1 - lam)^2 det(W + lam/(1 - lam)^2 m z^T - lam I)``.
    """
    P = build_P(env, p)
    n = env.n
    P11, P12, P21, P22 = P[:n, :n], P[:n, n:], P[n:, :n], P[n:, n:]
    lam = complex(lam)
    lhs = P11 - lam * np.eye(n)
    plant_eigs = np.linalg.eigvals(P11)
    if np.min(np.abs(plant_eigs - lam)) < 1e-12:
        raise SpectralError(f"lambda={lam} is a plant eigenvalue; the Schur pivot is singular")
    schur = P22 - lam * np.eye(p.N) - P21 @ np.linalg.solve(lhs, P12)
    return complex(np.linalg.det(lhs) * np.linalg.det(schur))


# ---------------------------------------------------------------------------
# root finding


def sort_roots(roots) -> np.ndarray:
    r = np.asarray(roots, dtype=complex)
    order = np.lexsort((-r.imag, -np.abs(r)))
    return r[order]


def _polish(coefs, lam: complex) -> complex:
    a, b, c, d = coefs
    f = ((a * lam + b) * lam + c) * lam + d
    df = (3 * a * lam + 2 * b) * lam + c
    if df == 0:
        return lam
    step = f / df
    new = lam - step
    fn = ((a * new + b) * new + c) * new + d
    return new if abs(fn) <= abs(f) else lam


def solve_cubic(a: float, b: float, c: float, d: float) -> np.ndarray:
    """Roots of a x^3 + b x^2 + c x + d with real coefficients.

    Trigonometric form for three real roots, Cardano otherwise, then one
    Newton step per root. Returned in order of descending modulus, ties by
    descending imaginary part; complex pairs are exact conjugates.
    """
    if a == 0:
        raise SpectralError("leading coefficient must be non-zero")
    B, C, D = b / a, c / a, d / a
    shift = B / 3.0
    p = C - B * B / 3.0
    q = 2.0 * B**3 / 27.0 - B * C / 3.0 + D
    scale = max(1.0, abs(B), abs(C) ** 0.5, abs(D) ** (1.0 / 3.0))
    eps = 1e-14 * scale**6
    disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
    if abs(p) <= 1e-15 * scale**2 and abs(q) <= 1e-15 * scale**3:
        ts = [0.0, 0.0, 0.0]
        real = True
    elif abs(disc) <= eps:
        # repeated real root
        ts = [3.0 * q / p, -1.5 * q / p, -1.5 * q / p]
        real = True
    elif disc < 0:
        r = 2.0 * math.sqrt(-p / 3.0)
        arg = 3.0 * q / (p * r)
        theta = math.acos(max(-1.0, min(1.0, arg))) / 3.0
        ts = [r * math.cos(theta - 2.0 * math.pi * k / 3.0) for k in range(3)]
        real = True
    else:
        sq = math.sqrt(disc)
        big = -math.copysign(1.0, q) * (abs(q) / 2.0 + sq)
        u1 = math.copysign(abs(big) ** (1.0 / 3.0), big)
        t1 = u1 - p / (3.0 * u1) if u1 != 0 else 0.0
        ts = [t1]
        real = False
    coefs = (1.0, B, C, D)
    if real:
        roots = [complex(_polish(coefs, t - shift).real, 0.0) for t in ts]
    else:
        r = _polish(coefs, complex(ts[0] - shift)).real
        s = -B - r
        prod = C - r * s
        im2 = prod - s * s / 4.0
        if im2 <= 0:
            half = math.sqrt(-im2)
            roots = [complex(r), complex(s / 2 + half), complex(s / 2 - half)]
        else:
            lam = complex(s / 2.0, math.sqrt(im2))
            lam = _polish(coefs, lam)
            roots = [complex(r), lam, lam.conjugate()]
    return sort_roots(roots)


def eigenvalues(M, validate: bool = False) -> np.ndarray:
    """All eigenvalues of a square matrix, sorted like :func:`solve_cubic`.

    Backed by LAPACK's Hessenberg/shifted-QR driver. For real input, complex
    eigenvalues come in exact conjugate pairs and real ones have zero
    imaginary part.
    """
    M = np.asarray(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise SpectralError(f"need a square matrix, got {M.shape}")
    if M.shape[0] > 512:
        raise SpectralError("matrices larger than 512 are not supported")
    if not np.all(np.isfinite(M)):
        raise SpectralError("matrix has non-finite entries")
    try:
        if validate:
            lam, Q = np.linalg.eig(M)
        else:
            lam = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as exc:
        raise SpectralError(f"eigenvalue iteration failed (cond={np.linalg.cond(M):.3g}): {exc}") from exc
    lam = np.asarray(lam, dtype=complex)
    if validate:
        norm = max(np.linalg.norm(M, 2), 1e-300)
        for i in range(len(lam)):
            q = Q[:, i] / np.linalg.norm(Q[:, i])
            res = np.linalg.norm(M @ q - lam[i] * q)
            if res > 1e-8 * norm:
                raise SpectralError(f"eigenpair {i} residual {res:.3g} exceeds 1e-8*|M|")
    if np.isrealobj(M):
        lam = np.where(np.abs(lam.imag) == 0, lam.real + 0j, lam)
    return sort_roots(lam)


# ---------------------------------------------------------------------------
# labelled spectra


@dataclass(frozen=True)
class CoupledSpectrum:
    eigenvalues: np.ndarray
    dominant_pair: tuple = ()
    lambda3: Optional[int] = None
    spectral_radius: float = 0.0

    @property
    def lambda1(self) -> Optional[complex]:
        """Positive-imaginary member of the dominant pair."""
        if not self.dominant_pair:
            return None
        a, b = (self.eigenvalues[i] for i in self.dominant_pair)
        return a if a.imag >= b.imag else b

    @property
    def lambda3_value(self) -> Optional[float]:
        if self.lambda3 is None:
            return None
        return float(self.eigenvalues[self.lambda3].real)

    @property
    def stable(self) -> bool:
        return self.spectral_radius < 1.0


def _is_complex(lam: complex, tol: float = 1e-9) -> bool:
    return abs(lam.imag) > tol * max(1.0, abs(lam))


def label_spectrum(eigs, exclude: Sequence[complex] = (), tol: float = 1e-9) -> CoupledSpectrum:
    """Attach dominant-pair and real-mode labels to a set of eigenvalues.

    ``exclude`` lists eigenvalues (e.g. the open-loop plant pair at 1) that
    are reported but ignored when choosing the dominant modes.
    """
    eigs = np.asarray(eigs, dtype=complex)
    skip = set()
    for e in exclude:
        for i, lam in enumerate(eigs):
            if i not in skip and abs(lam - e) < 1e-9:
                skip.add(i)
                break
    radius = float(np.max(np.abs(eigs))) if len(eigs) else 0.0
    cand = [i for i in range(len(eigs)) if i not in skip]
    cand.sort(key=lambda i: (-abs(eigs[i]), -eigs[i].imag))
    pair: tuple = ()
    lam3 = None
    if cand:
        top = cand[0]
        if _is_complex(eigs[top], tol):
            best = min((j for j in cand if j != top),
                       key=lambda j: abs(eigs[j] - eigs[top].conjugate()), default=None)
            if best is not None:
                pair = tuple(sorted((top, best), key=lambda i: -eigs[i].imag))
            reals = [i for i in cand if not _is_complex(eigs[i], tol) and i not in pair]
            lam3 = reals[0] if reals else None
        else:
            lam3 = top
    return CoupledSpectrum(eigs, pair, lam3, radius)


def coupled_spectrum(env, p, ref=None) -> CoupledSpectrum:
    P = build_P(env, p, ref)
    exclude = ()
    if np.allclose(env.B @ p.z.T, 0.0) or np.allclose(p.m[:, :env.n_obs] @ env.C, 0.0):
        exclude = tuple(eigenvalues(env.A))
    return label_spectrum(eigenvalues(P), exclude=exclude)


def effective_spectrum(op: OrderParams) -> CoupledSpectrum:
    return label_spectrum(eigenvalues(build_P_eff(op)))


def track_modes(prev: CoupledSpectrum, nxt: CoupledSpectrum) -> tuple[np.ndarray, CoupledSpectrum]:
    """Greedy nearest-neighbour continuation of eigenvalues between snapshots.

    Returns ``assign`` with ``assign[i]`` the index in ``nxt`` continuing mode
    ``i`` of ``prev``, and ``nxt`` reordered to ``prev``'s order with the
    dominant-pair and lambda3 labels carried over. Conjugate partners are
    matched together by comparing (Re, |Im|) and then pairing by sign.
    """
    a = np.asarray(prev.eigenvalues, dtype=complex)
    b = np.asarray(nxt.eigenvalues, dtype=complex)
    if a.shape != b.shape:
        raise SpectralError("spectra must have the same size")
    ca = a.real + 1j * np.abs(a.imag)
    cb = b.real + 1j * np.abs(b.imag)
    dist = np.abs(ca[:, None] - cb[None, :])
    n = len(a)
    cells = [(round(dist[i, j] / 1e-12), -b[j].real, -b[j].imag, i, j)
             for i in range(n) for j in range(n)]
    cells.sort()
    assign = -np.ones(n, dtype=int)
    used = np.zeros(n, dtype=bool)
    for _, _, _, i, j in cells:
        if assign[i] < 0 and not used[j]:
            assign[i] = j
            used[j] = True
    # within each matched conjugate pair, keep the sign of the imaginary part
    for i in range(n):
        for k in range(i + 1, n):
            ji, jk = assign[i], assign[k]
            same_prev = abs(ca[i] - ca[k]) < 1e-12 and a[i].imag * a[k].imag < 0
            same_next = abs(cb[ji] - cb[jk]) < 1e-12
            if same_prev and same_next and (a[i].imag > 0) != (b[ji].imag > 0):
                assign[i], assign[k] = jk, ji
    reordered = b[assign]
    relabeled = CoupledSpectrum(reordered, prev.dominant_pair, prev.lambda3,
                                float(np.max(np.abs(b))) if n else 0.0)
    return assign, relabeled
