import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cllab.linenv import (
    DivergenceError, EnvError, EnvModel, EnvState, env_step, episode_loss,
    make_double_integrator, make_k_integrator, make_reference, make_tracking_plant,
    observe, reference_positions, reference_trajectory, sample_x0,
)
from cllab.spectral import eigenvalues


def test_double_integrator_matrices():
    env = make_double_integrator()
    np.testing.assert_array_equal(env.A, [[1, 1], [0, 1]])
    np.testing.assert_array_equal(env.B, [[0], [1]])
    np.testing.assert_array_equal(env.C, [[1, 0]])
    assert env.beta == 0.0
    assert env.partially_observable


def test_double_integrator_beta():
    env = make_double_integrator(0.1)
    assert env.beta == 0.1
    np.testing.assert_array_equal(env.A, make_double_integrator().A)
    with pytest.raises(EnvError):
        make_double_integrator(-1.0)


def test_env_model_validates_dims():
    with pytest.raises(EnvError):
        EnvModel(np.ones((2, 3)), np.ones((2, 1)), np.ones((1, 2)))
    with pytest.raises(EnvError):
        EnvModel(np.eye(2), np.ones((3, 1)), np.ones((1, 2)))
    with pytest.raises(EnvError):
        EnvModel(np.eye(2), np.ones((2, 1)), np.ones((1, 3)))


def test_k_integrator_matches_double_integrator():
    a, b = make_k_integrator(2, 1, 1), make_double_integrator()
    for m in ("A", "B", "C"):
        np.testing.assert_array_equal(getattr(a, m), getattr(b, m))


def test_k3_integrator_by_hand():
    env = make_k_integrator(3, 1, 1)
    np.testing.assert_array_equal(env.A, [[1, 1, 0], [0, 1, 1], [0, 0, 1]])
    np.testing.assert_array_equal(env.B, [[0], [0], [1]])
    np.testing.assert_array_equal(env.C, [[1, 0, 0]])


def test_k_integrator_full_observation():
    np.testing.assert_array_equal(make_k_integrator(2, 2, 2).C, np.eye(2))
    assert not make_k_integrator(2, 2, 2).partially_observable


@pytest.mark.parametrize("k,b,c", [(0, 1, 1), (2, 3, 1), (2, 1, 0), (3, 1, 4)])
def test_k_integrator_rejects_bad_dims(k, b, c):
    with pytest.raises(EnvError):
        make_k_integrator(k, b, c)


@pytest.mark.parametrize("x,u,expected", [((1, 0), 0, (1, 0)), ((0, 1), 0, (1, 1)),
                                          ((0, 0), -2, (0, -2))])
def test_env_step(x, u, expected):
    s = env_step(make_double_integrator(), EnvState(np.array(x, float)), u)
    np.testing.assert_array_equal(s.x, expected)
    assert s.t == 1


def test_env_step_rejects_nonfinite_control():
    s = EnvState(np.zeros(2), t=7)
    with pytest.raises(DivergenceError, match="step 7"):
        env_step(make_double_integrator(), s, np.nan)


def test_tracking_plant_clamps():
    env = make_tracking_plant()
    s = env_step(env, EnvState(np.array([9.99, 50.0, 0.0, 0.0])), np.zeros(2))
    assert np.all(np.abs(s.x) <= 10.0)
    assert s.x[0] == 10.0


def test_observe():
    assert observe(make_double_integrator(), EnvState(np.array([3.0, -5.0]))) == 3.0
    np.testing.assert_array_equal(observe(make_k_integrator(2, 2, 2),
                                          EnvState(np.array([3.0, -5.0]))), [3, -5])
    np.testing.assert_array_equal(observe(make_tracking_plant(),
                                          EnvState(np.array([1.0, 2, 3, 4]))), [1, 3])


def test_episode_loss_examples():
    env = make_double_integrator()
    assert episode_loss([np.zeros(2)], [0.0], env) == 0.0
    assert episode_loss([np.array([1.0, 0]), np.array([1.0, 0])], [0.0, 0.0], env) == 1.0
    assert episode_loss([np.array([1.0, 0])], [2.0], make_double_integrator(0.5)) == 3.0
    with pytest.raises(EnvError):
        episode_loss([], [], env)


@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(1, 20))
def test_episode_loss_identical_states(a, b, T):
    env = make_double_integrator()
    x = np.array([a, b])
    assert episode_loss([x] * T, [0.0] * T, env) == pytest.approx(a * a + b * b, rel=1e-12, abs=1e-300)


def test_uncontrolled_drift_is_exact():
    env = make_double_integrator()
    v = 3
    s = EnvState(np.array([0.0, float(v)]))
    for t in range(1, 10001):
        s = env_step(env, s, 0.0)
        if t % 1000 == 0:
            assert s.x[0] == t * v and s.x[1] == v


def test_sample_x0_ranges():
    rng = np.random.default_rng(0)
    x = sample_x0(make_double_integrator(), 1000, rng)
    assert x.shape == (1000, 2) and np.all(np.abs(x) <= 2)
    assert sample_x0(make_k_integrator(3), 5, rng).shape == (5, 3)
    np.testing.assert_array_equal(sample_x0(make_tracking_plant(), 3, rng), 0.0)


def test_reference_at_zero_phase():
    ref = make_reference(ramp_duration=0.0)
    r = reference_trajectory(ref, 5)
    assert r.shape == (2, 5)
    assert r[0, 0] == pytest.approx(4.62)
    assert r[1, 0] == pytest.approx(4.62)


def test_reference_zero_amplitude():
    np.testing.assert_array_equal(reference_trajectory(make_reference(0.0, 0.0), 50), 0.0)


def test_reference_single_component():
    ref = make_reference(ramp_duration=1.0).only(0)
    r = reference_trajectory(ref, 300)
    t = np.arange(300) * 0.1
    after = t >= 1.0
    np.testing.assert_allclose(r[0, after], 2.31 * np.cos(ref.frequencies[0] * t[after]), atol=1e-12)
    np.testing.assert_array_equal(r[1], 0.0)


def test_reference_ramp_is_linear():
    ref = make_reference()
    full = reference_trajectory(make_reference(ramp_duration=0.0), 12)
    ramped = reference_trajectory(ref, 12)
    np.testing.assert_allclose(ramped[:, :10], full[:, :10] * (np.arange(10) / 10.0), atol=1e-12)
    np.testing.assert_allclose(ramped[:, 10:], full[:, 10:], atol=1e-12)


def test_reference_rotation_blocks_on_unit_circle():
    eig = np.linalg.eigvals(make_reference().R_d)
    np.testing.assert_allclose(np.abs(eig), 1.0, atol=1e-10)
    w = sorted(np.abs(np.angle(eig)) / 0.1)
    np.testing.assert_allclose(w[::2], sorted(make_reference().frequencies), rtol=1e-10)


@given(st.lists(st.floats(-math.pi, math.pi), min_size=4, max_size=4))
def test_reference_matches_state_space(phases):
    ref = make_reference(ramp_duration=0.0)
    closed = reference_positions(ref, np.array(phases), 300)[0]
    r = ref.initial_state(phases)
    prop = np.empty((300, 2))
    for t in range(300):
        prop[t] = ref.C_R @ r
        r = ref.R_d @ r
    assert closed.shape == (300, 2)
    np.testing.assert_allclose(closed, prop, atol=1e-8)


def test_actuators_fill_from_last_state():
    np.testing.assert_array_equal(make_k_integrator(3, 2, 1).B, [[0, 0], [0, 1], [1, 0]])


@pytest.mark.parametrize("k", [1, 2, 3])
def test_full_state_unit_feedback_is_stable(k):
    # every actuator feeds back the state it drives: u = -B^T x
    env = make_k_integrator(k, k, k)
    rho = max(abs(eigenvalues(env.A - env.B @ env.B.T)))
    assert rho < 1.0
