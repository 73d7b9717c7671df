import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from auvrl import hydrodyn as hd
from auvrl import so3

from oracles import box_drag_force, solid_box_inertia

P = hd.VehicleParams()
NO_FLUID = P.with_(rho=0.0, mu=0.0)

# Closed-form surge drag on the default box at u = 1 and u = 2 m/s (oracle values).
SURGE_DRAG_U1 = -57.15699006667479
SURGE_DRAG_U2 = -228.62129648225385


def state(v=(0, 0, 0), w=(0, 0, 0), q=(1, 0, 0, 0), p=(0, 0, 0)):
    return hd.BodyState(np.array(p, float), np.array(q, float), np.array(v, float), np.array(w, float))


def random_states(rng, n, vscale=1.0, wscale=1.0):
    return hd.StateBatch(rng.normal(size=(n, 3)), so3.random_quat(rng, (n,)),
                         rng.normal(scale=vscale, size=(n, 3)), rng.normal(scale=wscale, size=(n, 3)))


# --- equivalent box ------------------------------------------------------------

def test_cube_half_extents():
    np.testing.assert_allclose(hd.equivalent_box(12.0, np.diag([4.0, 4.0, 4.0])), [0.70710678118654757] * 3,
                               atol=1e-12)


def test_doubling_mass_shrinks_extents_by_sqrt2():
    a = hd.equivalent_box(11.5, [0.26, 0.23, 0.37])
    b = hd.equivalent_box(23.0, [0.26, 0.23, 0.37])
    np.testing.assert_allclose(a / b, math.sqrt(2.0), rtol=1e-12)


def test_box_reproduces_inertia():
    rng = np.random.default_rng(0)
    for _ in range(100):
        ext = rng.uniform(0.05, 1.0, 3)
        m = rng.uniform(1, 50)
        inertia = solid_box_inertia(m, ext)
        np.testing.assert_allclose(solid_box_inertia(m, hd.equivalent_box(m, inertia)), inertia, rtol=1e-12)
        np.testing.assert_allclose(hd.equivalent_box(m, inertia), ext, rtol=1e-10)


def test_inconsistent_inertia_is_rejected():
    with pytest.raises(hd.ValidationError):
        hd.equivalent_box(1.0, [1.0, 1.0, 5.0])
    with pytest.raises(hd.ValidationError):
        hd.equivalent_box(-1.0, [1.0, 1.0, 1.0])


@pytest.mark.parametrize("kw", [dict(mass=0.0), dict(rho=-1.0), dict(f_max=0.0),
                                dict(inertia=np.diag([1.0, -1.0, 1.0]))])
def test_vehicle_params_validation(kw):
    with pytest.raises(hd.ValidationError):
        hd.VehicleParams(**kw)


def test_buoyancy_sets_effective_gravity():
    assert hd.VehicleParams.from_buoyancy(1.0).g_eff == 0.0
    assert hd.VehicleParams.from_buoyancy(0.9).g_eff == pytest.approx(0.981)


# --- fluid wrench ----------------------------------------------------------------

def test_zero_velocity_zero_wrench():
    np.testing.assert_array_equal(hd.fluid_wrench(state(), P), np.zeros(6))


def test_pure_surge_is_decoupled_and_opposes_motion():
    f = hd.fluid_wrench(state(v=(0.7, 0, 0)), P)
    assert f[0] < 0
    np.testing.assert_array_equal(f[1:], 0.0)


def test_surge_drag_matches_closed_form():
    for u, want in ((1.0, SURGE_DRAG_U1), (2.0, SURGE_DRAG_U2)):
        assert hd.fluid_wrench(state(v=(u, 0, 0)), P)[0] == pytest.approx(want, rel=1e-12)
    assert abs(SURGE_DRAG_U2) > 2 * abs(SURGE_DRAG_U1)


def test_linear_drag_matches_oracle_for_random_velocities():
    rng = np.random.default_rng(1)
    for _ in range(50):
        v = rng.normal(size=3)
        np.testing.assert_allclose(hd.fluid_wrench(state(v=v), P)[:3],
                                   box_drag_force(v, P.box_dims, P.rho, P.mu), rtol=1e-12)


vel = arrays(np.float64, 3, elements=st.floats(-5, 5, allow_nan=False))


@settings(max_examples=200, deadline=None)
@given(vel, vel)
def test_drag_opposes_motion(v, w):
    f = hd.fluid_wrench(state(v=v, w=w), P)
    assert f[:3] @ v <= 0.0
    assert f[3:] @ w <= 0.0


@settings(max_examples=50, deadline=None)
@given(vel, vel)
def test_drag_ignores_world_orientation(v, w):
    q = so3.random_quat(np.random.default_rng(abs(int(v[0] * 1000))))
    np.testing.assert_array_equal(hd.fluid_wrench(state(v=v, w=w), P),
                                  hd.fluid_wrench(state(v=v, w=w, q=q, p=(3, -2, 1)), P))


# --- step ------------------------------------------------------------------------

def test_rest_stays_at_rest():
    s = state(p=(1, 2, 3))
    out = hd.step(s, np.zeros(6), P, 0.02)
    np.testing.assert_array_equal(out.as_array(), s.as_array())


def test_single_push_by_hand():
    F, dt, m = 6.0, 0.02, P.mass
    out = hd.step(state(), np.array([F, 0, 0, 0, 0, 0]), NO_FLUID, dt)
    np.testing.assert_allclose(out.v, [F * dt / m, 0, 0], atol=1e-15)
    np.testing.assert_allclose(out.p, [F * dt / m * dt, 0, 0], atol=1e-15)


def test_effective_gravity_pulls_down_in_world_frame():
    s = state(q=so3.axis_angle_to_quat(np.array([0.4, -0.2, 1.0])))
    out = hd.step(s, np.zeros(6), NO_FLUID.with_(g_eff=2.0), 0.01)
    np.testing.assert_allclose(so3.quat_rotate(out.q, out.v), [0, 0, -0.02], atol=1e-12)


def test_spinning_top_conserves_energy():
    s = state(w=(1.0, 2.0, -1.5))
    e0 = hd.kinetic_energy(s, NO_FLUID)
    for _ in range(1000):
        s = hd.step(s, np.zeros(6), NO_FLUID, 1e-3)
    assert abs(hd.kinetic_energy(s, NO_FLUID) - e0) < 1e-6


def test_non_finite_result_is_poisoned():
    with pytest.raises(hd.PoisonedStateError):
        hd.step(state(v=(np.inf, 0, 0)), np.zeros(6), P, 0.02)


def test_dissipation_over_random_states():
    rng = np.random.default_rng(2)
    b = random_states(rng, 1000, 2.0, 3.0)
    e0 = hd.kinetic_energy(b, P)
    b1 = hd.step_batch(b, np.zeros((1000, 6)), P, 0.02)
    assert np.all(hd.kinetic_energy(b1, P) <= e0)


def test_quaternion_stays_unit_over_many_steps():
    rng = np.random.default_rng(3)
    b = random_states(rng, 16, 1.0, 4.0)
    a = rng.uniform(-1, 1, (16, 6)) * P.action_scale
    for _ in range(2000):
        b = hd.step_batch(b, a, P, 0.02)
    np.testing.assert_allclose(np.linalg.norm(b.q, axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("n", [1, 64, 257])
def test_batch_equals_loop_bitwise(n):
    rng = np.random.default_rng(n)
    b = random_states(rng, n)
    b.g_eff = rng.normal(size=n)
    a = rng.uniform(-30, 30, (n, 6))
    out = hd.step_batch(b, a, P, 0.02)
    for i in range(n):
        one = hd.step(b.row(i), a[i], P, 0.02, g_eff=b.g_eff[i])
        assert np.array_equal(one.as_array(), out.row(i).as_array())


def test_batch_shape_mismatch():
    with pytest.raises(hd.ValidationError):
        hd.step_batch(hd.StateBatch.at_rest(4), np.zeros((3, 6)), P)


def test_batch_throughput_scales():
    def rate(n, k):
        b = hd.StateBatch.at_rest(n)
        a = np.full((n, 6), 0.5)
        t = time.perf_counter()
        for _ in range(k):
            b = hd.step_batch(b, a, P)
        return n * k / (time.perf_counter() - t)

    rate(1, 20)
    assert rate(4096, 10) >= 100 * rate(1, 200)


# --- Fossen model ------------------------------------------------------------------

FP = hd.FossenParams.from_vehicle(P)


def test_fossen_equilibrium():
    np.testing.assert_array_equal(hd.fossen_dynamics(np.zeros(6), np.zeros(6), np.zeros(6), FP), np.zeros(6))


def test_fossen_pure_heave():
    acc = hd.fossen_dynamics(np.zeros(6), np.zeros(6), np.array([0, 0, 5.0, 0, 0, 0]), FP)
    np.testing.assert_allclose(acc, [0, 0, 5.0 / (P.mass + FP.added_mass[2]), 0, 0, 0], atol=1e-15)


def test_fossen_residual():
    rng = np.random.default_rng(4)
    fp = hd.FossenParams.from_vehicle(P.with_(g_eff=0.3))
    for _ in range(100):
        eta = np.concatenate([rng.normal(size=3), rng.uniform(-1, 1, 3)])
        nu, tau = rng.normal(size=6), rng.normal(scale=10, size=6)
        M, C, D, g = hd.fossen_matrices(eta, nu, fp)
        acc = hd.fossen_dynamics(eta, nu, tau, fp)
        assert np.max(np.abs(M @ acc + C @ nu + D @ nu + g - tau)) < 1e-10


def test_fossen_pitch_singularity():
    with pytest.raises(hd.ValidationError):
        hd.fossen_dynamics(np.array([0, 0, 0, 0, math.pi / 2 - 0.01, 0]), np.zeros(6), np.zeros(6), FP)


def test_euler_round_trip():
    rng = np.random.default_rng(5)
    rpy = np.column_stack([rng.uniform(-3, 3, 200), rng.uniform(-1.4, 1.4, 200), rng.uniform(-3, 3, 200)])
    np.testing.assert_allclose(hd.quat_to_euler(hd.euler_to_quat(rpy)), rpy, atol=1e-12)
    R = hd.euler_rotation(rpy)
    np.testing.assert_allclose(R, so3.quat_to_rotmat(hd.euler_to_quat(rpy)), atol=1e-12)
