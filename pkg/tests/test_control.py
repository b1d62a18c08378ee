import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cllab.agent import RnnParams
from cllab.control import (
    MARGINAL_TOL, OSC_UNSTABLE, REAL_UNSTABLE, REGIMES, STABLE, ControlError, closed_loop_eigs,
    closed_loop_matrix, default_x0_set, fit_gain, fit_gain_from_agent, kalman_gain, kalman_residual, lqr_teacher_policy,
    recover_gain_exact, riccati_residual, solve_lqr, stability_boundary, stability_classify,
    stability_map,
)
from cllab.linenv import EnvModel, make_double_integrator, make_k_integrator
from cllab.spectral import OrderParams, build_P_eff, eigenvalues

ENV = make_double_integrator()
STAGE2_OP = OrderParams(-0.015132821782782427, -0.0015299661141721327,
                        -0.050426270139994775, 0.027819300648722296)
gain = st.floats(-1, 3, allow_nan=False)


def agent_with_overlaps(op, N=20):
    """Rank-1 linear agent whose hidden state stays in span(m, u), so its closed loop is P_eff."""
    Q, _ = np.linalg.qr(np.random.default_rng(0).normal(size=(N, 2)))
    m, u = Q[:, 0], Q[:, 1]
    return RnnParams(m, op.zm * m + op.zu * u, u=u, v=op.vm * m + op.vu * u)


# --- classification --------------------------------------------------------------

def test_classify_examples():
    reg, eigs = stability_classify(0.0, 0.0)
    assert reg == REAL_UNSTABLE
    np.testing.assert_allclose(eigs, [1, 1])
    reg, eigs = stability_classify(0.25, 1.0)
    assert reg == STABLE
    np.testing.assert_allclose(eigs, [0.5, 0.5], atol=1e-12)
    # discriminant (2 - k2)^2 - 4 (1 - k2 + k1) < 0 and modulus^2 = 1 - k2 + k1 > 1
    reg, eigs = stability_classify(1.0, 0.5)
    assert reg == OSC_UNSTABLE
    assert abs(eigs[0]) ** 2 == pytest.approx(1.5)


def test_partition_exhaustive_and_exclusive_on_400_grid():
    for a in np.linspace(-1, 3, 400):
        for b in np.linspace(-1, 4, 400):
            reg, eigs = stability_classify(a, b)
            # marginal modes count as unstable
            stable = all(abs(l) < 1 - MARGINAL_TOL for l in eigs)
            osc = not stable and abs(eigs[0].imag) > 0
            real = not stable and not osc
            assert [stable, osc, real].count(True) == 1
            assert reg == (STABLE if stable else OSC_UNSTABLE if osc else REAL_UNSTABLE)


def test_classify_agrees_with_general_eigenvalues():
    rng = np.random.default_rng(0)
    for a, b in rng.uniform([-1, -1], [3, 4], size=(1000, 2)):
        eigs = eigenvalues(closed_loop_matrix(a, b))
        rho = max(abs(eigs))
        if abs(rho - 1) < 1e-8:
            continue
        want = STABLE if rho < 1 else (OSC_UNSTABLE if abs(eigs[0].imag) > 1e-12 else REAL_UNSTABLE)
        assert stability_classify(a, b)[0] == want


@given(gain, gain)
def test_closed_loop_eigs_are_roots(a, b):
    for lam in closed_loop_eigs(a, b):
        assert abs(lam * lam - (2 - b) * lam + (1 - b + a)) < 1e-9


# --- stability map ----------------------------------------------------------------

@pytest.fixture(scope="module")
def smap():
    return stability_map(n1=41, n2=51)


def test_map_cells_match_classify(smap):
    for j, b in enumerate(smap.k2):
        for i, a in enumerate(smap.k1):
            reg, eigs = stability_classify(a, b)
            assert smap.regime[j, i] == reg
            assert smap.radius[j, i] == pytest.approx(abs(eigs[0]))
    assert set(np.unique(smap.regime)) <= set(REGIMES)


def test_map_boundary_by_bisection(smap):
    def rho(a, b):
        return abs(closed_loop_eigs(a, b)[0])

    n = 0
    for j in range(len(smap.k2)):
        for i in range(len(smap.k1) - 1):
            s0, s1 = smap.regime[j, i] == STABLE, smap.regime[j, i + 1] == STABLE
            if s0 == s1:
                continue
            lo, hi = smap.k1[i], smap.k1[i + 1]
            for _ in range(40):
                mid = 0.5 * (lo + hi)
                if (stability_classify(mid, smap.k2[j])[0] == STABLE) == s0:
                    lo = mid
                else:
                    hi = mid
            assert abs(rho(0.5 * (lo + hi), smap.k2[j]) - 1) < 1e-2
            n += 1
    assert n > 10


def test_stability_boundary_edges_are_marginal():
    k1 = np.array([0.1, 0.5, 1.0, 2.0])
    for a, edge in zip(k1, stability_boundary(k1)):
        assert edge is not None
        for b in edge:
            assert abs(abs(closed_loop_eigs(a, b)[0]) - 1) < 1e-2
    assert stability_boundary(np.array([-0.5]))[0] is None


def test_stable_cells_have_lower_loss_than_unstable_neighbours(smap):
    n1, n2 = len(smap.k1), len(smap.k2)
    checked = 0
    for j in range(n2):
        for i in range(n1):
            if smap.regime[j, i] != STABLE or smap.radius[j, i] > 0.9:
                continue
            assert math.isfinite(smap.log_loss[j, i])
            for dj, di in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                jj, ii = j + dj, i + di
                if 0 <= jj < n2 and 0 <= ii < n1 and smap.regime[jj, ii] != STABLE:
                    assert smap.log_loss[j, i] < smap.log_loss[jj, ii]
                    checked += 1
    assert checked > 0


def test_map_csv_and_validation(smap):
    lines = smap.to_csv().splitlines()
    assert lines[0] == "k1,k2,regime,log_loss"
    assert len(lines) == 1 + 41 * 51
    with pytest.raises(ControlError):
        stability_map(n1=0)


# --- gain fits --------------------------------------------------------------------

def test_fit_gain_exact_linear_data():
    xs = np.random.default_rng(0).normal(size=(200, 2))
    est = fit_gain(xs, -(0.3 * xs[:, 0] + 0.7 * xs[:, 1]))
    assert est.k1 == pytest.approx(0.3, abs=1e-7) and est.k2 == pytest.approx(0.7, abs=1e-7)
    assert est.residual < 1e-10
    assert est.regime == stability_classify(est.k1, est.k2)[0]
    zero = fit_gain(xs, np.zeros(200))
    assert zero.k1 == 0 and zero.k2 == 0


def test_fit_gain_errors_and_truncation():
    with pytest.raises(ControlError):
        fit_gain(np.ones((5, 2)), np.zeros(5))
    with pytest.raises(ControlError):
        fit_gain(np.ones((1, 2)), np.zeros(1))
    # the second half of the episode is off by far and beyond the truncation radius
    rng = np.random.default_rng(1)
    xs = rng.normal(size=(40, 3, 2))
    us = -(0.5 * xs[..., 0] + 0.2 * xs[..., 1])
    xs[20:] *= 1000
    us[20:] = 7.0
    est = fit_gain(xs, us)
    assert est.k1 == pytest.approx(0.5, abs=1e-7) and est.k2 == pytest.approx(0.2, abs=1e-7)


def _plane_gain(op):
    """Control restricted to the dominant invariant plane, expressed in plant coordinates."""
    vals, vecs = np.linalg.eig(build_P_eff(op))
    q = vecs[:, int(np.argmax(np.abs(vals) + 1e-9 * vals.imag))]
    V = np.column_stack([q.real, q.imag])
    c = np.array([0.0, 0.0, op.zm, op.zu])
    return -(c @ V) @ np.linalg.inv(V[:2])


@pytest.mark.parametrize("op", [STAGE2_OP, OrderParams(-0.3, 0.1, -0.2, 0.1),
                                OrderParams(-0.6, -0.3, -0.4, -0.1)])
def test_recover_gain_exact_forward_construction(op):
    est = recover_gain_exact(op)
    np.testing.assert_allclose([est.k1, est.k2], _plane_gain(op), atol=1e-8)
    lam1 = max(np.linalg.eigvals(build_P_eff(op)), key=lambda l: (abs(l), l.imag))
    assert min(abs(lam1 - l) for l in closed_loop_eigs(est.k1, est.k2)) < 1e-8
    assert est.method == "eigenvector_exact"


def test_recover_gain_exact_errors():
    with pytest.raises(ControlError):
        recover_gain_exact(OrderParams(0.1, 0.0, 0.0, 0.0))
    with pytest.raises(ControlError):
        recover_gain_exact(OrderParams(-0.02, 0.0, 0.0, 2.0))


def test_fit_agrees_with_exact_on_stage2_agent():
    p = agent_with_overlaps(STAGE2_OP)
    fit = fit_gain_from_agent(p, default_x0_set(100, 0), 50, ENV)
    ex = recover_gain_exact(STAGE2_OP)
    assert abs(fit.k1 - ex.k1) < 1e-3 and abs(fit.k2 - ex.k2) < 1e-3


# --- LQR --------------------------------------------------------------------------

def _backward_recursion(A, B, Q, R, horizon=3000):
    M = np.zeros_like(Q)
    for _ in range(horizon):
        K = np.linalg.solve(R + B.T @ M @ B, B.T @ M @ A)
        Acl = A - B @ K
        M = Q + K.T @ R @ K + Acl.T @ M @ Acl
    return K


def test_lqr_double_integrator():
    sol = solve_lqr(ENV)
    assert np.max(np.abs(sol.M - sol.M.T)) < 1e-10
    assert sol.residual < 1e-10
    assert riccati_residual(sol.M, ENV) < 1e-10
    assert max(abs(np.linalg.eigvals(ENV.A - ENV.B @ sol.K))) < 1
    np.testing.assert_allclose(sol.K, _backward_recursion(ENV.A, ENV.B, np.eye(2), np.eye(1)), atol=1e-6)


def test_lqr_matches_scipy_dare():
    la = pytest.importorskip("scipy.linalg")
    for env in (ENV, make_k_integrator(3, 2, 1)):
        sol = solve_lqr(env)
        M = la.solve_discrete_are(env.A, env.B, np.eye(env.n), np.eye(env.B.shape[1]))
        np.testing.assert_allclose(sol.M, M, rtol=1e-8, atol=1e-8)


def test_lqr_gain_shrinks_with_R():
    norms = [np.linalg.norm(solve_lqr(ENV, R=[[r]]).K) for r in (1.0, 10.0, 100.0)]
    assert norms[0] > norms[1] > norms[2]


def test_lqr_errors():
    unact = EnvModel(ENV.A, np.zeros((2, 1)), ENV.C)
    with pytest.raises(ControlError):
        solve_lqr(unact, max_iter=5000)
    with pytest.raises(ControlError):
        solve_lqr(ENV, Q=-np.eye(2))
    with pytest.raises(ControlError):
        solve_lqr(ENV, R=[[0.0]])


def test_lqr_teacher_policy():
    pol = lqr_teacher_policy(solve_lqr(ENV).K)
    x = np.array([[0.7, -0.3], [1.0, 2.0]])
    np.testing.assert_array_equal(pol(np.zeros((1, 2))), 0.0)
    np.testing.assert_allclose(pol(2 * x), 2 * pol(x))
    state = np.array([[2.0, 0.0]])
    for _ in range(50):
        state = state @ ENV.A.T + pol(state) @ ENV.B.T
    assert np.linalg.norm(state) < 2.0


# --- Kalman -----------------------------------------------------------------------

def test_kalman_full_trust_limit():
    A = np.array([[1.0, 1.0], [0.0, 1.0]])
    env = EnvModel(A, np.array([[0.0], [1.0]]), np.eye(2))
    L, S, _, _ = kalman_gain(env, np.eye(2), 1e-10 * np.eye(2))
    np.testing.assert_allclose(L, A, atol=1e-3)


def test_kalman_no_process_noise():
    env = EnvModel(0.5 * np.eye(2), np.array([[0.0], [1.0]]), np.array([[1.0, 0.0]]))
    L, S, _, _ = kalman_gain(env, np.zeros((2, 2)), np.eye(1), tol=1e-14)
    assert np.max(np.abs(S)) < 1e-10


def test_kalman_double_integrator_fixed_point_and_simulation():
    L, S, _, resid = kalman_gain(ENV, np.eye(2), np.eye(1))
    assert resid < 1e-10
    assert kalman_residual(S, ENV, np.eye(2), np.eye(1)) < 1e-10
    # predictor xhat' = A xhat + L (y - C xhat); error e' = (A - L C) e + w - L v
    rng = np.random.default_rng(0)
    n = 2000
    e = np.zeros((n, 2))
    traces = []
    Acl = ENV.A - L @ ENV.C
    for _ in range(1000):
        w = rng.normal(size=(n, 2))
        v = rng.normal(size=(n, 1))
        e = e @ Acl.T + w - v @ L.T
        traces.append(np.trace(e.T @ e / n))
    assert max(traces) < 1.5 * np.trace(S)
    assert np.mean(traces[100:]) == pytest.approx(np.trace(S), rel=0.05)


def test_kalman_errors():
    with pytest.raises(ControlError):
        kalman_gain(ENV, np.eye(2), np.zeros((1, 1)))
    with pytest.raises(ControlError):
        kalman_gain(ENV, -np.eye(2), np.eye(1))
