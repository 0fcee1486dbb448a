import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskstack.core import (
    Control,
    DynamicsParams,
    Gaussian2,
    NoiseModel,
    VehicleState,
    gaussian_fuse,
    propagate_samples,
    rollout,
    step_dynamics,
    wrap_angle,
)
from riskstack.errors import FusionError, InvalidInputError


def test_straight_line_motion():
    s = step_dynamics(VehicleState(0, 0, 0, 10), Control(0.0, 0.0), dt=0.1)
    assert s.x == pytest.approx(1.0)
    assert s.y == 0.0
    assert s.heading == 0.0
    assert s.speed == 10.0


def test_zero_speed_freezes_pose():
    before = VehicleState(5, 5, 1.0, 0)
    after = step_dynamics(before, Control(0.0, 0.3), dt=0.1)
    assert (after.x, after.y, after.heading) == (before.x, before.y, before.heading)


def test_heading_update_matches_euler_formula():
    s = step_dynamics(VehicleState(0, 0, 0, 10), Control(0.0, 0.1), dt=0.1)
    expected = 10 / 2.7 * math.tan(0.1) * 0.1
    assert s.heading == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.03716, abs=5e-5)


def test_heading_wraps_into_half_open_interval():
    s = step_dynamics(VehicleState(0, 0, math.pi - 1e-3, 10), Control(0.0, 0.5), dt=0.1)
    assert -math.pi < s.heading <= math.pi
    # Large left steer from just below pi lands on the negative side.
    assert s.heading < 0


def test_wrap_angle_boundary():
    assert wrap_angle(math.pi) == pytest.approx(math.pi)
    assert wrap_angle(-math.pi) == pytest.approx(math.pi)
    assert wrap_angle(0.0) == 0.0


def test_non_finite_input_rejected():
    with pytest.raises(InvalidInputError):
        VehicleState(float("nan"), 0, 0, 1)
    with pytest.raises(InvalidInputError):
        step_dynamics(VehicleState(0, 0, 0, 1), Control(0, 0), dt=0.0)
    with pytest.raises(InvalidInputError):
        step_dynamics(VehicleState(0, 0, 0, 1), Control(5.0, 0), dt=0.1)


@given(
    x=st.floats(-1e3, 1e3),
    y=st.floats(-1e3, 1e3),
    heading=st.floats(-10, 10),
    speed=st.floats(0, 40),
    accel=st.floats(-3, 3),
    steer=st.floats(-0.5, 0.5),
)
def test_step_preserves_invariants(x, y, heading, speed, accel, steer):
    s = step_dynamics(VehicleState(x, y, heading, speed), Control(accel, steer), dt=0.1)
    assert all(math.isfinite(v) for v in (s.x, s.y, s.heading, s.speed))
    assert s.speed >= 0.0
    assert -math.pi < s.heading <= math.pi


def test_zero_noise_equals_deterministic_rollout():
    state = VehicleState(1, 2, 0.3, 8)
    controls = [Control(0.5, 0.05)] * 12
    samples = propagate_samples(state, controls, NoiseModel(0, 0), n=7, seed=3)
    ref = rollout(state, controls, dt=0.1)
    ref_arr = np.array([[s.x, s.y, s.heading, s.speed] for s in ref])
    assert samples.shape == (7, 13, 4)
    for i in range(7):
        assert np.array_equal(samples[i], ref_arr)


def test_same_seed_bit_identical():
    state = VehicleState(0, 0, 0, 10)
    controls = [Control(0.2, 0.01)] * 20
    noise = NoiseModel(0.3, 0.02)
    a = propagate_samples(state, controls, noise, n=50, seed=42)
    b = propagate_samples(state, controls, noise, n=50, seed=42)
    assert np.array_equal(a, b)
    c = propagate_samples(state, controls, noise, n=50, seed=43)
    assert not np.array_equal(a, c)


def test_sample_count_validation():
    state = VehicleState(0, 0, 0, 10)
    with pytest.raises(InvalidInputError):
        propagate_samples(state, [Control(0, 0)], NoiseModel(), n=0, seed=1)
    with pytest.raises(InvalidInputError):
        propagate_samples(state, [], NoiseModel(), n=5, seed=1)


def test_speed_variance_growth_matches_independent_sampler():
    # Straight driving with accel noise only: speed at step k is
    # v0 + sum of k iid N(0, sigma^2) increments scaled by dt.
    dt, sigma, n, steps = 0.1, 0.5, 10000, 15
    state = VehicleState(0, 0, 0, 10)
    controls = [Control(0.0, 0.0)] * steps
    samples = propagate_samples(state, controls, NoiseModel(sigma, 0.0), n=n, seed=7)
    speeds = samples[:, :, 3]

    # Independent oracle: accumulate the same distribution without the
    # dynamics code path.
    rng = np.random.default_rng(1234)
    oracle = 10 + np.cumsum(rng.normal(0.0, sigma * dt, size=(n, steps)), axis=1)

    for k in (5, 10, 15):
        got = speeds[:, k].var(ddof=1)
        want = oracle[:, k - 1].var(ddof=1)
        theory = k * (sigma * dt) ** 2
        se = theory * math.sqrt(2.0 / (n - 1))
        assert abs(got - theory) < 3 * se
        assert abs(want - theory) < 3 * se


def test_fuse_equal_variances():
    a = Gaussian2([0, 0], np.eye(2))
    b = Gaussian2([2, 0], np.eye(2))
    f = gaussian_fuse(a, b)
    assert np.allclose(f.mean, [1, 0])
    assert np.allclose(f.cov, 0.5 * np.eye(2))


def test_fuse_uninformative_measurement():
    a = Gaussian2([1, -2], [[0.5, 0.1], [0.1, 0.4]])
    b = Gaussian2([50, 50], 1e9 * np.eye(2))
    f = gaussian_fuse(a, b)
    assert np.allclose(f.mean, a.mean, atol=1e-3)
    assert np.allclose(f.cov, a.cov, atol=1e-3)


def test_fuse_matches_grid_integration_oracle():
    # Product of the two densities, renormalized, integrated on a grid.
    rng = np.random.default_rng(5)
    for _ in range(3):
        m_a = rng.normal(0, 1, 2)
        m_b = rng.normal(0, 1, 2)
        q_a = rng.normal(0, 1, (2, 2))
        q_b = rng.normal(0, 1, (2, 2))
        cov_a = q_a @ q_a.T + 0.2 * np.eye(2)
        cov_b = q_b @ q_b.T + 0.2 * np.eye(2)
        a, b = Gaussian2(m_a, cov_a), Gaussian2(m_b, cov_b)
        f = gaussian_fuse(a, b)

        xs = np.linspace(-8, 8, 401)
        gx, gy = np.meshgrid(xs, xs, indexing="ij")
        pts = np.stack([gx.ravel(), gy.ravel()], axis=1)

        def density(mean, cov):
            d = pts - mean
            inv = np.linalg.inv(cov)
            expo = -0.5 * np.einsum("ni,ij,nj->n", d, inv, d)
            return np.exp(expo) / (2 * np.pi * math.sqrt(np.linalg.det(cov)))

        w = density(m_a, cov_a) * density(m_b, cov_b)
        w /= w.sum()
        mean_grid = (pts * w[:, None]).sum(axis=0)
        centered = pts - mean_grid
        cov_grid = np.einsum("n,ni,nj->ij", w, centered, centered)

        assert np.allclose(f.mean, mean_grid, atol=2e-3)
        assert np.allclose(f.cov, cov_grid, atol=2e-3)


@st.composite
def psd_gaussians(draw):
    mean = [draw(st.floats(-5, 5)), draw(st.floats(-5, 5))]
    a = draw(st.floats(0.1, 3))
    c = draw(st.floats(0.1, 3))
    b = draw(st.floats(-0.9, 0.9)) * math.sqrt(a * c)
    return Gaussian2(mean, [[a, b], [b, c]])


@given(psd_gaussians(), psd_gaussians())
@settings(max_examples=60)
def test_fuse_symmetric_and_contracting(a, b):
    ab = gaussian_fuse(a, b)
    ba = gaussian_fuse(b, a)
    assert np.allclose(ab.mean, ba.mean, atol=1e-12)
    assert np.allclose(ab.cov, ba.cov, atol=1e-12)
    assert np.trace(ab.cov) <= min(np.trace(a.cov), np.trace(b.cov)) + 1e-9


def test_fuse_singular_sum_raises():
    a = Gaussian2([0, 0], np.zeros((2, 2)))
    b = Gaussian2([1, 1], np.zeros((2, 2)))
    with pytest.raises(FusionError):
        gaussian_fuse(a, b)


def test_gaussian2_validation():
    with pytest.raises(InvalidInputError):
        Gaussian2([0, 0], [[1, 0.5], [0.2, 1]])  # asymmetric
    with pytest.raises(InvalidInputError):
        Gaussian2([0, 0], [[-1, 0], [0, 1]])  # negative eigenvalue
    g = Gaussian2([0, 0], [[1, 0.5 + 4e-10], [0.5 - 4e-10, 1]])  # within tolerance
    assert g.cov[0, 1] == g.cov[1, 0]


def test_custom_params_used():
    p = DynamicsParams(wheelbase=2.0, accel_max=1.0, steer_max=0.2)
    s = step_dynamics(VehicleState(0, 0, 0, 4), Control(0.0, 0.2), dt=0.1, params=p)
    assert s.heading == pytest.approx(4 / 2.0 * math.tan(0.2) * 0.1)
    with pytest.raises(InvalidInputError):
        step_dynamics(VehicleState(0, 0, 0, 4), Control(2.0, 0.0), dt=0.1, params=p)
