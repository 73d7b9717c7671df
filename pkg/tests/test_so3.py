import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from auvrl import so3

from oracles import rk4_quaternion, rotmat, trace_angle

YAW90 = np.array([math.cos(math.pi / 4), 0.0, 0.0, math.sin(math.pi / 4)])

finite = st.floats(-3.0, 3.0, allow_nan=False, allow_infinity=False)
raw_quat = arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 1e-3)
vec3 = arrays(np.float64, 3, elements=finite)


def unit(q):
    return q / np.linalg.norm(q)


def same_rotation(a, b, tol):
    return min(np.max(np.abs(a - b)), np.max(np.abs(a + b))) < tol


def test_identity_composes_to_input():
    q = unit(np.array([0.3, -0.2, 0.9, 0.1]))
    np.testing.assert_allclose(so3.quat_mul(so3.identity(), q), q, atol=1e-15)


def test_two_quarter_yaws_make_half_yaw():
    np.testing.assert_allclose(so3.quat_mul(YAW90, YAW90), [0, 0, 0, 1], atol=1e-15)


def test_composition_matches_matrix_product():
    rng = np.random.default_rng(0)
    for _ in range(200):
        a, b = so3.random_quat(rng), so3.random_quat(rng)
        np.testing.assert_allclose(rotmat(so3.quat_mul(a, b)), rotmat(a) @ rotmat(b), atol=1e-9)


def test_rotate_identity_and_quarter_yaw():
    np.testing.assert_array_equal(so3.quat_rotate(so3.identity(), np.array([1.0, 2.0, 3.0])), [1, 2, 3])
    np.testing.assert_allclose(so3.quat_rotate(YAW90, np.array([1.0, 0, 0])), [0, 1, 0], atol=1e-15)


def test_rotate_matches_matrix_and_inverse_undoes_it():
    rng = np.random.default_rng(1)
    q = so3.random_quat(rng, (500,))
    v = rng.normal(size=(500, 3))
    out = so3.quat_rotate(q, v)
    for i in range(500):
        np.testing.assert_allclose(out[i], rotmat(q[i]) @ v[i], atol=1e-9)
    np.testing.assert_allclose(so3.quat_rotate_inv(q, out), v, atol=1e-12)


def test_error_of_equal_attitudes_is_zero():
    q = unit(np.array([0.5, 0.5, -0.5, 0.5]))
    np.testing.assert_allclose(so3.quat_error_axis_angle(q, q), 0.0, atol=1e-15)


def test_quarter_yaw_error():
    np.testing.assert_allclose(so3.quat_error_axis_angle(YAW90, so3.identity()), [0, 0, math.pi / 2], atol=1e-15)


def test_error_round_trip_recovers_reference():
    rng = np.random.default_rng(2)
    for _ in range(500):
        q_ref, q_meas = so3.random_quat(rng), so3.random_quat(rng)
        e = so3.quat_error_axis_angle(q_ref, q_meas)
        back = so3.quat_mul(q_meas, so3.axis_angle_to_quat(e))
        assert same_rotation(back, q_ref, 1e-8)


def test_error_is_expressed_in_measured_body_frame():
    # vehicle yawed 90 deg, reference rolled about world x: body sees it about -y
    q_ref = so3.quat_mul(so3.axis_angle_to_quat(np.array([0.3, 0, 0])), YAW90)
    e = so3.quat_error_axis_angle(q_ref, YAW90)
    np.testing.assert_allclose(e, [0, -0.3, 0], atol=1e-12)


def test_zero_axis_angle_is_identity():
    np.testing.assert_array_equal(so3.axis_angle_to_quat(np.zeros(3)), [1, 0, 0, 0])


def test_rotmat_round_trip_1000_samples():
    rng = np.random.default_rng(3)
    q = so3.random_quat(rng, (1000,))
    back = so3.rotmat_to_quat(so3.quat_to_rotmat(q))
    for a, b in zip(q, back):
        assert same_rotation(a, b, 1e-9)


def test_rotmat_matches_textbook_formula():
    rng = np.random.default_rng(4)
    q = so3.random_quat(rng, (50,))
    R = so3.quat_to_rotmat(q)
    for i in range(50):
        np.testing.assert_allclose(R[i], rotmat(q[i]), atol=1e-15)


def test_rotmat_to_quat_rejects_non_rotation():
    with pytest.raises(so3.RotationError):
        so3.rotmat_to_quat(np.diag([1.0, 1.0, 2.0]))
    with pytest.raises(so3.RotationError):
        so3.rotmat_to_quat(np.diag([1.0, 1.0, -1.0]))


@pytest.mark.parametrize("repr,ident", [
    ("axis_angle", np.zeros(3)),
    ("quaternion", np.array([1.0, 0, 0, 0])),
    ("rotmat", np.eye(3).ravel()),
])
def test_flat_error_of_identity_is_identity_element(repr, ident):
    q = unit(np.array([0.1, 0.7, -0.2, 0.4]))
    out = so3.quat_to_flat_error(q, q, repr)
    assert out.shape == (so3.REPR_WIDTH[repr],)
    np.testing.assert_allclose(out, ident, atol=1e-15)


def test_flat_error_rejects_unknown_representation():
    with pytest.raises(so3.RotationError):
        so3.quat_to_flat_error(so3.identity(), so3.identity(), "euler")


def test_flat_error_angle_agrees_across_representations():
    rng = np.random.default_rng(5)
    a, b = so3.random_quat(rng, (300,)), so3.random_quat(rng, (300,))
    ref = so3.geodesic_angle(a, b)
    for repr in so3.REPRS:
        got = so3.flat_error_angle(so3.quat_to_flat_error(a, b, repr), repr)
        np.testing.assert_allclose(got, ref, atol=1e-9)


def test_integrate_with_zero_rate_is_noop():
    q = unit(np.array([0.2, 0.3, 0.4, 0.5]))
    np.testing.assert_allclose(so3.quat_integrate(q, np.zeros(3), 0.1), q, atol=1e-16)


def test_integrate_exact_single_axis():
    got = so3.quat_integrate(so3.identity(), np.array([0, 0, math.pi]), 0.5)
    np.testing.assert_allclose(got, YAW90, atol=1e-15)


def test_integrate_rejects_non_positive_dt():
    with pytest.raises(ValueError):
        so3.quat_integrate(so3.identity(), np.zeros(3), 0.0)


def test_integrate_matches_rk4_reference():
    rng = np.random.default_rng(6)
    for _ in range(100):
        q = so3.random_quat(rng)
        w = rng.normal(scale=2.0, size=3)
        np.testing.assert_allclose(so3.quat_integrate(q, w, 1e-3), rk4_quaternion(q, w, 1e-3), atol=1e-6)


def test_near_identity_series_is_continuous():
    for th in (1e-6, 1.01e-7, 0.99e-7, 1e-9, 0.0):
        v = np.array([th, -th, 0.5 * th])
        back = so3.quat_to_axis_angle(so3.axis_angle_to_quat(v))
        np.testing.assert_allclose(back, v, rtol=1e-9, atol=1e-20)


def test_batched_equals_loop_bitwise():
    rng = np.random.default_rng(7)
    a, b = so3.random_quat(rng, (64,)), so3.random_quat(rng, (64,))
    batch = so3.quat_error_axis_angle(a, b)
    for i in range(64):
        assert np.array_equal(batch[i], so3.quat_error_axis_angle(a[i], b[i]))


@settings(max_examples=200, deadline=None)
@given(raw_quat, raw_quat)
def test_outputs_are_unit_norm(a, b):
    for q in (so3.quat_mul(unit(a), unit(b)), so3.normalize(a),
              so3.quat_integrate(unit(a), b[:3], 0.02), so3.quat_error(unit(a), unit(b))):
        assert abs(np.linalg.norm(q) - 1.0) < 1e-9


@settings(max_examples=200, deadline=None)
@given(raw_quat)
def test_rotmat_is_proper_orthonormal(a):
    R = so3.quat_to_rotmat(unit(a))
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-9)
    assert abs(np.linalg.det(R) - 1.0) < 1e-9


@settings(max_examples=300, deadline=None)
@given(raw_quat, raw_quat)
def test_error_magnitude_is_trace_geodesic(a, b):
    a, b = unit(a), unit(b)
    e = so3.quat_error_axis_angle(a, b)
    n = np.linalg.norm(e)
    assert n <= math.pi + 1e-9
    Ra, Rb = rotmat(a), rotmat(b)
    # acos loses digits near 0 and pi, so compare cosines there
    assert abs(math.cos(n) - (np.trace(Rb.T @ Ra) - 1) / 2) < 1e-12
    if math.sin(n) > 1e-4:
        assert abs(n - trace_angle(Ra, Rb)) < 1e-8


@settings(max_examples=100, deadline=None)
@given(vec3)
def test_axis_angle_round_trip(v):
    if np.linalg.norm(v) >= math.pi - 1e-6:
        v = v / np.linalg.norm(v) * (math.pi - 0.1)
    np.testing.assert_allclose(so3.quat_to_axis_angle(so3.axis_angle_to_quat(v)), v, atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(raw_quat)
def test_double_cover_gives_same_error(a):
    a = unit(a)
    ref = unit(np.array([0.9, 0.1, 0.2, -0.3]))
    np.testing.assert_allclose(so3.quat_error_axis_angle(ref, a), so3.quat_error_axis_angle(ref, -a), atol=1e-12)
