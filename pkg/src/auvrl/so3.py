"""Rotation and attitude-error math.

Conventions
-----------
- Quaternions are scalar-first ``(w, x, y, z)`` and rotate body vectors into
  the world frame: ``v_world = R(q) @ v_body``.
- Every function broadcasts over leading dimensions, so a ``(N, 4)`` array of
  quaternions is handled exactly like a single ``(4,)`` quaternion.
- Only element-wise numpy operations are used (no BLAS calls), which keeps a
  batched evaluation bitwise identical to a loop over its rows.
"""
from __future__ import annotations

import numpy as np

# Below this rotation angle the axis extraction switches to its series form.
SMALL_ANGLE = 1e-7

REPRS = ("axis_angle", "quaternion", "rotmat")
REPR_WIDTH = {"axis_angle": 3, "quaternion": 4, "rotmat": 9}


class RotationError(ValueError):
    """Raised for malformed rotation inputs."""


def identity(shape=()) -> np.ndarray:
    q = np.zeros(tuple(shape) + (4,))
    q[..., 0] = 1.0
    return q


def normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.sqrt(q[..., 0] ** 2 + q[..., 1] ** 2 + q[..., 2] ** 2 + q[..., 3] ** 2)
    if np.any(n == 0.0):
        raise RotationError("cannot normalize a zero quaternion")
    return q / n[..., None]


def canonical(q: np.ndarray) -> np.ndarray:
    """Pick the representative of ``{q, -q}`` with ``w >= 0``."""
    q = np.asarray(q, dtype=float)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat(w: float, x: float, y: float, z: float) -> np.ndarray:
    return normalize(np.array([w, x, y, z], dtype=float))


def conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def qmul_raw(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product without renormalization."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Compose rotations: ``R(a ⊗ b) = R(a) @ R(b)``."""
    return normalize(qmul_raw(a, b))


def cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    shape = a.shape if a.shape == b.shape else np.broadcast_shapes(a.shape, b.shape)
    out = np.empty(shape, dtype=np.result_type(a, b))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate ``v`` by ``q`` (body -> world for a body-to-world ``q``)."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * cross(u, v)
    return v + w * t + cross(u, t)


def quat_rotate_inv(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate ``v`` by the inverse of ``q`` (world -> body)."""
    return quat_rotate(conj(q), v)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def rotmat_to_quat(R: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Shepperd's method, canonical ``w >= 0``.

    Raises RotationError when ``R`` is not orthonormal with determinant +1.
    """
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3):
        raise RotationError(f"expected (...,3,3) rotation matrix, got {R.shape}")
    RtR = np.einsum("...ji,...jk->...ik", R, R)
    if np.max(np.abs(RtR - np.eye(3)), initial=0.0) > tol or np.any(np.linalg.det(R) < 0):
        raise RotationError("matrix is not a proper rotation")
    m00, m11, m22 = R[..., 0, 0], R[..., 1, 1], R[..., 2, 2]
    tr = m00 + m11 + m22
    cands = np.stack([tr, m00, m11, m22], axis=-1)
    k = np.argmax(cands, axis=-1)
    out = np.empty(R.shape[:-2] + (4,))
    # Each branch divides by the largest of the four squared components.
    s0 = np.sqrt(np.maximum(1.0 + tr, 0.0)) * 2.0
    s1 = np.sqrt(np.maximum(1.0 + m00 - m11 - m22, 0.0)) * 2.0
    s2 = np.sqrt(np.maximum(1.0 + m11 - m00 - m22, 0.0)) * 2.0
    s3 = np.sqrt(np.maximum(1.0 + m22 - m00 - m11, 0.0)) * 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        b0 = np.stack([0.25 * s0, (R[..., 2, 1] - R[..., 1, 2]) / s0,
                       (R[..., 0, 2] - R[..., 2, 0]) / s0, (R[..., 1, 0] - R[..., 0, 1]) / s0], -1)
        b1 = np.stack([(R[..., 2, 1] - R[..., 1, 2]) / s1, 0.25 * s1,
                       (R[..., 0, 1] + R[..., 1, 0]) / s1, (R[..., 0, 2] + R[..., 2, 0]) / s1], -1)
        b2 = np.stack([(R[..., 0, 2] - R[..., 2, 0]) / s2, (R[..., 0, 1] + R[..., 1, 0]) / s2,
                       0.25 * s2, (R[..., 1, 2] + R[..., 2, 1]) / s2], -1)
        b3 = np.stack([(R[..., 1, 0] - R[..., 0, 1]) / s3, (R[..., 0, 2] + R[..., 2, 0]) / s3,
                       (R[..., 1, 2] + R[..., 2, 1]) / s3, 0.25 * s3], -1)
    kk = k[..., None]
    out = np.where(kk == 0, b0, np.where(kk == 1, b1, np.where(kk == 2, b2, b3)))
    return canonical(normalize(out))


def axis_angle_to_quat(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    th = np.sqrt(v[..., 0] ** 2 + v[..., 1] ** 2 + v[..., 2] ** 2)
    half = 0.5 * th
    small = th < SMALL_ANGLE
    safe = np.where(small, 1.0, th)
    # sin(th/2)/th, with its Taylor expansion near zero
    k = np.where(small, 0.5 - th * th / 48.0, np.sin(half) / safe)
    return np.concatenate([np.cos(half)[..., None], k[..., None] * v], axis=-1)


def quat_to_axis_angle(q: np.ndarray) -> np.ndarray:
    """Shortest-path axis-angle vector of ``q`` (angle in ``[0, pi]``).

    Scale-invariant in ``q``, so unnormalized inputs are accepted.
    """
    q = canonical(q)
    w = q[..., 0]
    u = q[..., 1:]
    n = np.sqrt(u[..., 0] ** 2 + u[..., 1] ** 2 + u[..., 2] ** 2)
    angle = 2.0 * np.arctan2(n, w)
    small = angle < SMALL_ANGLE
    safe_n = np.where(small, 1.0, n)
    safe_w = np.where(small, w, 1.0)
    k = np.where(small, 2.0 / safe_w, angle / safe_n)
    return k[..., None] * u


def quat_error(q_ref: np.ndarray, q_meas: np.ndarray) -> np.ndarray:
    """Relative rotation ``q_meas^-1 ⊗ q_ref``, canonical and normalized.

    Expressed in the body frame of ``q_meas``.
    """
    return canonical(normalize(qmul_raw(conj(q_meas), q_ref)))


def quat_error_axis_angle(q_ref: np.ndarray, q_meas: np.ndarray) -> np.ndarray:
    return quat_to_axis_angle(qmul_raw(conj(q_meas), q_ref))


def geodesic_angle(q_ref: np.ndarray, q_meas: np.ndarray) -> np.ndarray:
    """Rotation angle (rad, in ``[0, pi]``) between two attitudes."""
    e = qmul_raw(conj(q_meas), q_ref)
    n = np.sqrt(e[..., 1] ** 2 + e[..., 2] ** 2 + e[..., 3] ** 2)
    return 2.0 * np.arctan2(n, np.abs(e[..., 0]))


def quat_to_flat_error(q_ref: np.ndarray, q_meas: np.ndarray, repr: str = "axis_angle") -> np.ndarray:
    """Attitude error encoded as a flat 3-, 4- or 9-vector."""
    if repr == "axis_angle":
        return quat_error_axis_angle(q_ref, q_meas)
    if repr == "quaternion":
        return quat_error(q_ref, q_meas)
    if repr == "rotmat":
        R = quat_to_rotmat(quat_error(q_ref, q_meas))
        return R.reshape(R.shape[:-2] + (9,))
    raise RotationError(f"unknown attitude representation {repr!r}; expected one of {REPRS}")


def flat_error_angle(err: np.ndarray, repr: str = "axis_angle") -> np.ndarray:
    """Geodesic angle implied by a flat error encoding."""
    err = np.asarray(err, dtype=float)
    if repr == "axis_angle":
        return np.linalg.norm(err, axis=-1)
    if repr == "quaternion":
        n = np.linalg.norm(err[..., 1:], axis=-1)
        return 2.0 * np.arctan2(n, np.abs(err[..., 0]))
    if repr == "rotmat":
        tr = err[..., 0] + err[..., 4] + err[..., 8]
        # atan2 form stays accurate near 0 and pi, unlike arccos of the trace
        R = err.reshape(err.shape[:-1] + (3, 3))
        s = 0.5 * np.linalg.norm(
            np.stack([R[..., 2, 1] - R[..., 1, 2], R[..., 0, 2] - R[..., 2, 0],
                      R[..., 1, 0] - R[..., 0, 1]], axis=-1), axis=-1)
        return np.arctan2(s, 0.5 * (tr - 1.0))
    raise RotationError(f"unknown attitude representation {repr!r}")


def quat_integrate(q: np.ndarray, omega_body: np.ndarray, dt: float) -> np.ndarray:
    """Advance ``q`` by a constant body rate over ``dt`` (exponential map)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    dq = axis_angle_to_quat(np.asarray(omega_body, dtype=float) * dt)
    return normalize(qmul_raw(q, dq))


def random_quat(rng: np.random.Generator, shape=()) -> np.ndarray:
    """Uniformly distributed unit quaternions (canonical sign)."""
    g = rng.standard_normal(tuple(shape) + (4,))
    return canonical(normalize(g))
