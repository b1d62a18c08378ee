import numpy as np
import pytest
from hypothesis import given, strategies as st

from cllab.agent import RnnParams, init_rnn, overlaps
from cllab.linenv import make_double_integrator, make_reference, make_tracking_plant
from cllab.optim import closed_loop_loss
from cllab.spectral import (
    CoupledSpectrum, OrderParams, SpectralError, build_P, build_P_eff, char_poly_rank1,
    coupled_spectrum, effective_spectrum, eigenvalues, general_W_char_equation, label_spectrum,
    solve_cubic, track_modes,
)

ENV = make_double_integrator()
coef = st.floats(-3, 3, allow_nan=False)
overlap = st.floats(-1.5, 1.5, allow_nan=False)


def random_rank1(rng, N=50):
    """Rank-1 linear agent with overlaps of order one."""
    m = rng.normal(size=N) / np.sqrt(N)
    z = rng.normal(size=N) / np.sqrt(N) * rng.uniform(0.2, 2.0)
    u = rng.normal(size=N) / np.sqrt(N) * rng.uniform(0.2, 2.0)
    v = rng.normal(size=N) / np.sqrt(N)
    return RnnParams(m, z, u=u, v=v)


def nontrivial(eigs, n_zero):
    eigs = np.asarray(eigs)
    keep = np.argsort(np.abs(eigs))[n_zero:]
    return eigs[keep]


def match(a, b):
    """Max distance of an optimal greedy pairing between two small root sets."""
    b = list(b)
    worst = 0.0
    for x in sorted(a, key=lambda v: (-abs(v), -v.imag)):
        j = int(np.argmin([abs(x - y) for y in b]))
        worst = max(worst, abs(x - b.pop(j)))
    return worst


def test_P_decoupled():
    N = 5
    p = RnnParams(np.zeros(N), np.zeros(N), W=np.zeros((N, N)))
    lam = eigenvalues(build_P(ENV, p))
    np.testing.assert_allclose(sorted(lam.real), [0] * N + [1, 1])


def test_P_hand_assembly():
    m, z = np.array([0.3, -0.2]), np.array([0.5, 0.7])
    W = np.array([[0.1, 0.2], [-0.3, 0.4]])
    P = build_P(ENV, RnnParams(m, z, W=W))
    want = np.zeros((4, 4))
    want[:2, :2] = [[1, 1], [0, 1]]
    want[0, 2:] = 0.0
    want[1, 2:] = z
    want[2:, :2] = np.outer(m, [1, 1])
    want[2:, 2:] = W
    np.testing.assert_array_equal(P, want)


def test_P_agent_block_is_W():
    p = init_rnn(8, 0.7, seed=3)
    np.testing.assert_array_equal(build_P(ENV, p)[2:, 2:], p.W)


def test_P_continuous_blocks():
    p = init_rnn(6, 0.5, dt=0.1, seed=1)
    P = build_P(ENV, p)
    np.testing.assert_allclose(P[2:, 2:], 0.9 * np.eye(6) + 0.1 * p.W, atol=1e-15)
    np.testing.assert_allclose(P[2:, :2], 0.1 * np.outer(p.m[:, 0], [1, 1]), atol=1e-15)


def test_P_rejects_tanh():
    with pytest.raises(SpectralError):
        build_P(ENV, init_rnn(4, 0.1, activation="tanh", seed=0))


def test_P_tracking_three_blocks():
    ref = make_reference()
    env = make_tracking_plant()
    p = init_rnn(7, 0.3, d_in=4, d_out=2, dt=0.1, seed=0)
    P = build_P(env, p, ref)
    assert P.shape == (8 + 4 + 7, 8 + 4 + 7)
    np.testing.assert_array_equal(P[:8, :8], ref.R_d)
    np.testing.assert_array_equal(P[:8, 8:], 0.0)
    np.testing.assert_allclose(P[12:, :8], 0.1 * p.m[:, 2:] @ ref.C_R)


def test_P_eff_examples():
    np.testing.assert_array_equal(build_P_eff(OrderParams(0, 0, 0, 0)),
                                  [[1, 1, 0, 0], [0, 1, 0, 0], [1, 1, 0, 0], [0, 0, 0, 0]])
    assert build_P_eff(OrderParams(-0.1, 0, 0, 0))[1, 2] == -0.1


def test_char_poly_examples():
    assert char_poly_rank1(OrderParams(0, 0, 0, 0)) == (1.0, -2.0, 1.0, 0.0)
    a, b, c, d = char_poly_rank1(OrderParams(-0.3, 0, 0, 0))
    assert (a, b, c, d) == (1.0, -2.0, 1.3, 0.0)


@given(overlap, overlap, overlap, overlap)
def test_char_poly_matches_determinant(zm, zu, vm, vu):
    op = OrderParams(zm, zu, vm, vu)
    # det(lam I - P_eff) = lam * cubic(lam)
    full = np.poly(build_P_eff(op))
    np.testing.assert_allclose(full[:4], char_poly_rank1(op), atol=1e-10)
    assert abs(full[4]) < 1e-10


def test_cubic_examples():
    np.testing.assert_allclose(solve_cubic(1, -2, 1, 0), [1, 1, 0], atol=1e-7)
    r = solve_cubic(*char_poly_rank1(OrderParams(0.04, 0, 0, 0)))
    np.testing.assert_allclose(r, [1.2, 0.8, 0.0], atol=1e-12)
    r = solve_cubic(*char_poly_rank1(OrderParams(-0.04, 0, 0, 0)))
    assert r[0] == pytest.approx(1 + 0.2j, abs=1e-12)
    assert r[1] == r[0].conjugate()
    assert abs(r[0]) ** 2 == pytest.approx(1.04, abs=1e-12)
    with pytest.raises(SpectralError):
        solve_cubic(0, 1, 2, 3)


@given(coef, coef, coef)
def test_cubic_roots_are_roots(b, c, d):
    r = solve_cubic(1.0, b, c, d)
    for lam in r:
        chi = ((lam + b) * lam + c) * lam + d
        assert abs(chi) < 1e-9 * max(1.0, abs(lam) ** 3) * max(1.0, abs(b), abs(c), abs(d))
    mods = np.abs(r)
    assert np.all(np.diff(mods) <= 1e-12)
    cplx = [x for x in r if x.imag != 0]
    if cplx:
        assert len(cplx) == 2 and cplx[0] == cplx[1].conjugate() and cplx[0].imag > 0


@pytest.mark.parametrize("s", [-0.25, -0.01, 0.0, 0.01, 0.25])
def test_stage1_quadratic_closure(s):
    r = solve_cubic(*char_poly_rank1(OrderParams(s, 0, 0, 0)))
    quad = sorted(r, key=abs)[1:]
    want = [1 + np.sqrt(complex(s)), 1 - np.sqrt(complex(s))]
    assert match(quad, want) < 1e-12


def test_eigenvalue_examples():
    np.testing.assert_array_equal(eigenvalues(np.eye(5)), np.ones(5))
    np.testing.assert_allclose(eigenvalues([[1, 1], [0, 1]]), [1, 1])
    comp = np.array([[4.0, -1.0, -6.0], [1, 0, 0], [0, 1, 0]])  # (l-2)(l-3)(l+1)
    np.testing.assert_allclose(eigenvalues(comp, validate=True), [3, 2, -1], atol=1e-12)


def test_eigenvalues_rejects_bad_input():
    with pytest.raises(SpectralError):
        eigenvalues(np.ones((2, 3)))
    with pytest.raises(SpectralError):
        eigenvalues([[np.nan]])


def test_eigenvalues_conjugate_pairs():
    M = np.random.default_rng(0).normal(size=(30, 30))
    lam = eigenvalues(M, validate=True)
    np.testing.assert_array_equal(np.sort_complex(lam), np.sort_complex(lam.conjugate()))


def test_eigenvalues_agree_with_cubic_solver():
    rng = np.random.default_rng(1)
    for _ in range(100):
        b, c, d = rng.uniform(-3, 3, 3)
        comp = np.array([[-b, -c, -d], [1, 0, 0], [0, 1, 0]])
        assert match(eigenvalues(comp), solve_cubic(1, b, c, d)) < 1e-8


def test_eigenvalues_match_scipy():
    scipy_linalg = pytest.importorskip("scipy.linalg")
    M = np.random.default_rng(2).normal(size=(40, 40))
    want = scipy_linalg.eigvals(M)
    got = eigenvalues(M)
    assert match(got, want) < 1e-10


def test_spectral_identity_small():
    rng = np.random.default_rng(7)
    for _ in range(20):
        p = random_rank1(rng, N=20)
        lam = nontrivial(eigenvalues(build_P(ENV, p)), p.N - 1)
        assert match(lam, solve_cubic(*char_poly_rank1(overlaps(p)))) < 1e-7


def test_P_eff_spectrum_matches_P():
    p = random_rank1(np.random.default_rng(3), N=30)
    a = nontrivial(eigenvalues(build_P(ENV, p)), p.N - 1)
    b = nontrivial(effective_spectrum(overlaps(p)).eigenvalues, 1)
    assert match(a, b) < 1e-8


def test_general_W_equation_vanishes_on_spectrum():
    p = init_rnn(10, 0.8, seed=4)
    P = build_P(ENV, p)
    scale = np.linalg.norm(P, 2) ** P.shape[0]
    for lam in eigenvalues(P):
        if abs(lam - 1) > 1e-6:
            assert abs(general_W_char_equation(ENV, p, lam)) < 1e-6 * max(1.0, scale)


def test_general_W_equation_without_feedback():
    N = 6
    p = RnnParams(np.ones(N), np.zeros(N), W=np.zeros((N, N)))
    assert general_W_char_equation(ENV, p, 0.5) == pytest.approx(0.25 * (-0.5) ** N)
    with pytest.raises(SpectralError):
        general_W_char_equation(ENV, p, 1.0)


def test_general_W_equation_rank1_hand_case():
    m, z = np.array([0.4, -0.3]), np.array([0.2, 0.6])
    u, v = np.array([0.5, 0.1]), np.array([-0.3, 0.9])
    p = RnnParams(m, z, W=np.outer(u, v))
    for lam in solve_cubic(*char_poly_rank1(OrderParams(z @ m, z @ u, v @ m, v @ u))):
        if abs(lam) > 1e-8:
            assert abs(general_W_char_equation(ENV, p, lam)) < 1e-10


def test_label_spectrum():
    s = label_spectrum([0.5, 0.9 + 0.3j, 0.9 - 0.3j, 0.0])
    assert s.lambda1 == 0.9 + 0.3j
    assert s.lambda3_value == 0.5
    assert s.spectral_radius == pytest.approx(abs(0.9 + 0.3j))
    r = label_spectrum([1.2, 0.3 + 0.1j, 0.3 - 0.1j])
    assert r.dominant_pair == () and r.lambda3_value == 1.2 and not r.stable


def test_label_spectrum_excludes_plant_pair():
    s = label_spectrum([1.0, 1.0, 0.5 + 0.5j, 0.5 - 0.5j], exclude=(1.0, 1.0))
    assert s.lambda1 == 0.5 + 0.5j
    assert s.spectral_radius == 1.0


def test_coupled_spectrum_decoupled_agent():
    N = 4
    p = RnnParams(np.zeros(N), np.zeros(N), W=0.5 * np.eye(N))
    s = coupled_spectrum(ENV, p)
    assert s.spectral_radius == 1.0
    assert s.lambda3_value == 0.5


def test_track_modes_identity():
    s = effective_spectrum(OrderParams(-0.05, 0.1, -0.2, 0.3))
    assign, t = track_modes(s, s)
    np.testing.assert_array_equal(assign, np.arange(4))
    np.testing.assert_array_equal(t.eigenvalues, s.eigenvalues)


def test_track_modes_single_move():
    e = np.array([0.9 + 0.2j, 0.9 - 0.2j, 0.4, 0.1])
    moved = e.copy()
    moved[2] += 1e-3
    prev = label_spectrum(e)
    nxt = CoupledSpectrum(moved[[3, 2, 1, 0]])
    assign, t = track_modes(prev, nxt)
    np.testing.assert_array_equal(t.eigenvalues, moved)
    assert t.dominant_pair == prev.dominant_pair


def test_track_modes_through_crossing():
    # a real mode overtakes a complex pair in modulus, so the sorted order swaps
    steps = np.linspace(0, 1, 11)
    real = 0.5 + 0.5 * steps
    pair = 0.6 + 0.6j - 0.02 * steps
    first = np.array([pair[0], pair[0].conjugate(), real[0], 0.05])
    prev = label_spectrum(first)
    order0 = prev.eigenvalues.copy()
    for k in range(1, 11):
        raw = np.array([pair[k], pair[k].conjugate(), real[k], 0.05])
        nxt = CoupledSpectrum(raw[np.argsort(-np.abs(raw), kind="stable")])
        _, prev = track_modes(prev, nxt)
        i_real = int(np.argmin(np.abs(order0 - real[0])))
        assert prev.eigenvalues[i_real] == pytest.approx(real[k])
        assert prev.lambda1 == pytest.approx(pair[k])
    assert abs(real[-1]) > abs(pair[-1])


def test_stability_agrees_with_rollout():
    rng = np.random.default_rng(5)
    x0 = rng.uniform(-2, 2, size=(16, 2))
    found = 0
    while found < 20:
        p = random_rank1(rng, N=10)
        op = overlaps(p)
        roots = solve_cubic(*char_poly_rank1(op))
        rho = coupled_spectrum(ENV, p).spectral_radius
        inside = bool(np.all(np.abs(roots) < 1))
        assert (rho < 1) == inside
        l200 = closed_loop_loss(p, ENV, x0, 200)
        l400 = closed_loop_loss(p, ENV, x0, 400)
        if inside and rho < 0.98:
            found += 1
            # bounded: the sum barely grows, so the mean roughly halves
            assert l400 * 400 < l200 * 200 * 1.01
        elif rho > 1.02:
            assert l400 > l200
