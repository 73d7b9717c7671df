"""Free-floating rigid-body dynamics of the vehicle.

Two models live here:

* the training simulator: a single rigid body with body-frame velocities,
  drag computed on the equivalent inertia box and buoyancy folded into an
  effective gravity (``step`` / ``step_batch``);
* the Fossen-form model (rigid body plus added mass, linear and quadratic
  damping, restoring forces) used by the MPC baseline.

Fluid model
-----------
With box half-extents ``r = (rx, ry, rz)``, drag coefficient ``Cd`` (1.0),
density ``rho`` and viscosity ``mu``, for each body axis ``i`` with the two
other axes ``j, k``::

    A_i   = 4 r_j r_k                      face area normal to axis i
    L_i   = (r_j + r_k) / 2                characteristic length of that face
    F_i   = -0.5 rho Cd A_i |v_i| v_i  -  6 pi mu L_i v_i
    T_i   = -0.5 rho Cd r_i (r_j^4 + r_k^4) |w_i| w_i  -  8 pi mu L_i^3 w_i

The rotational pressure term is the pressure drag integrated over the
windward halves of the four faces parallel to axis ``i``.

Integrator
----------
Velocities advance with an implicit-midpoint update (solved with a fixed
number of Newton iterations) for the gyroscopic, Coriolis and drag terms, so
torque-free spinning conserves kinetic energy and drag never injects energy.
The pose then advances with the new velocities (semi-implicit): the position
with ``R(q) v'`` and the attitude through the exponential map of ``w'``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import so3

G0 = 9.81
NEWTON_ITERS = 4
PITCH_MARGIN = 0.05


class ValidationError(ValueError):
    pass


class PoisonedStateError(FloatingPointError):
    """The integrator produced NaN/Inf."""


def equivalent_box(mass: float, inertia) -> np.ndarray:
    """Half-extents of the uniform solid box with this mass and principal inertia."""
    inertia = np.asarray(inertia, dtype=float)
    if inertia.shape == (3, 3):
        if np.max(np.abs(inertia - np.diag(np.diag(inertia)))) > 1e-12:
            raise ValidationError("equivalent_box expects a diagonal (principal-axis) inertia")
        inertia = np.diag(inertia)
    if mass <= 0 or np.any(inertia <= 0):
        raise ValidationError("mass and principal inertia must be positive")
    s = 3.0 * inertia / mass  # s_i = r_j^2 + r_k^2
    sq = 0.5 * (s[[1, 0, 0]] + s[[2, 2, 1]] - s)
    if np.any(sq <= 0):
        raise ValidationError(f"inertia {inertia} violates the triangle inequality of a solid box")
    return np.sqrt(sq)


def box_inertia(mass: float, half_extents) -> np.ndarray:
    a, b, c = np.asarray(half_extents, dtype=float)
    return mass / 3.0 * np.array([b * b + c * c, a * a + c * c, a * a + b * b])


@dataclass(frozen=True, eq=False)
class VehicleParams:
    """Rigid-body and fluid parameters. Defaults describe a small ROV."""

    mass: float = 11.5
    inertia: np.ndarray = field(default_factory=lambda: np.diag([0.26, 0.23, 0.37]))
    rho: float = 1000.0
    mu: float = 1.0e-3
    g_eff: float = 0.0
    f_max: float = 30.0
    tau_max: float = 5.0
    drag_coeff: float = 1.0
    box_dims: np.ndarray | None = None

    def __post_init__(self):
        inertia = np.asarray(self.inertia, dtype=float)
        if inertia.shape == (3,):
            inertia = np.diag(inertia)
        object.__setattr__(self, "inertia", inertia)
        if self.mass <= 0:
            raise ValidationError("vehicle.mass must be > 0")
        if inertia.shape != (3, 3) or not np.allclose(inertia, inertia.T):
            raise ValidationError("vehicle.inertia must be a symmetric 3x3 matrix")
        if np.any(np.linalg.eigvalsh(inertia) <= 0):
            raise ValidationError("vehicle.inertia must be positive definite")
        if self.rho < 0 or self.mu < 0:
            raise ValidationError("fluid density and viscosity must be >= 0")
        if self.f_max <= 0 or self.tau_max <= 0:
            raise ValidationError("actuation limits must be > 0")
        if self.box_dims is None:
            dims = equivalent_box(self.mass, np.linalg.eigvalsh(inertia)
                                  if not np.allclose(inertia, np.diag(np.diag(inertia)))
                                  else np.diag(inertia))
        else:
            dims = np.asarray(self.box_dims, dtype=float)
        if dims.shape != (3,) or np.any(dims <= 0):
            raise ValidationError("box_dims must be three positive half-extents")
        object.__setattr__(self, "box_dims", dims)
        object.__setattr__(self, "inertia_inv", np.linalg.inv(inertia))

    @classmethod
    def from_buoyancy(cls, buoyancy_ratio: float, **kw) -> "VehicleParams":
        """Effective gravity ``g (1 - B/W)`` for aligned centres of gravity and buoyancy."""
        return cls(g_eff=G0 * (1.0 - buoyancy_ratio), **kw)

    def with_(self, **kw) -> "VehicleParams":
        return replace(self, **kw)

    @property
    def action_scale(self) -> np.ndarray:
        return np.array([self.f_max] * 3 + [self.tau_max] * 3)

    def drag_coeffs(self):
        """``(quad_lin, visc_lin, quad_rot, visc_rot)``, each a length-3 array."""
        r = self.box_dims
        j = np.array([1, 0, 0])
        k = np.array([2, 2, 1])
        area = 4.0 * r[j] * r[k]
        length = 0.5 * (r[j] + r[k])
        quad_lin = 0.5 * self.rho * self.drag_coeff * area
        visc_lin = 6.0 * np.pi * self.mu * length
        quad_rot = 0.5 * self.rho * self.drag_coeff * r * (r[j] ** 4 + r[k] ** 4)
        visc_rot = 8.0 * np.pi * self.mu * length ** 3
        return quad_lin, visc_lin, quad_rot, visc_rot


@dataclass
class BodyState:
    """Pose and body-frame twist. Arrays may carry a leading batch dimension."""

    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    omega: np.ndarray

    @classmethod
    def at_rest(cls, p=(0.0, 0.0, 0.0), q=(1.0, 0.0, 0.0, 0.0)) -> "BodyState":
        return cls(np.array(p, float), np.array(q, float), np.zeros(3), np.zeros(3))

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.p, self.q, self.v, self.omega], axis=-1)

    @classmethod
    def from_array(cls, x) -> "BodyState":
        x = np.asarray(x, dtype=float)
        return cls(x[..., 0:3].copy(), x[..., 3:7].copy(), x[..., 7:10].copy(), x[..., 10:13].copy())

    def is_finite(self) -> np.ndarray:
        return np.isfinite(self.as_array()).all(axis=-1)


@dataclass
class StateBatch(BodyState):
    """Per-field contiguous ``(N, k)`` arrays plus the per-env effective gravity."""

    g_eff: np.ndarray = None

    def __post_init__(self):
        n = self.p.shape[0]
        for name in ("p", "q", "v", "omega"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[0] != n:
                raise ValidationError(f"StateBatch.{name} must be (N, k); got {arr.shape}")
        if n < 1:
            raise ValidationError("batch size must be >= 1")
        if self.g_eff is None:
            self.g_eff = np.zeros(n)
        self.g_eff = np.broadcast_to(np.asarray(self.g_eff, dtype=float), (n,)).copy()

    @property
    def n(self) -> int:
        return self.p.shape[0]

    @classmethod
    def at_rest(cls, n: int, g_eff=0.0) -> "StateBatch":
        return cls(np.zeros((n, 3)), so3.identity((n,)), np.zeros((n, 3)), np.zeros((n, 3)), g_eff)

    def row(self, i: int) -> BodyState:
        return BodyState(self.p[i].copy(), self.q[i].copy(), self.v[i].copy(), self.omega[i].copy())


# ---------------------------------------------------------------------------
# small dense helpers written element-wise (batch-invariant rounding)


def mat3vec(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``M @ v`` for a shared 3x3 ``M`` or a batch ``(..., 3, 3)``."""
    return M[..., :, 0] * v[..., 0, None] + M[..., :, 1] * v[..., 1, None] + M[..., :, 2] * v[..., 2, None]


def mat3tvec(M: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``M.T @ v``."""
    return M[..., 0, :] * v[..., 0, None] + M[..., 1, :] * v[..., 1, None] + M[..., 2, :] * v[..., 2, None]


def skew(v: np.ndarray) -> np.ndarray:
    out = np.zeros(v.shape + (3,), dtype=v.dtype)
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def skew_times(a: np.ndarray, M: np.ndarray) -> np.ndarray:
    """``skew(a) @ M`` computed column-wise as cross products."""
    out = np.empty(a.shape + (3,), dtype=np.result_type(a, M))
    for c in range(3):
        out[..., c] = so3.cross(a, M[..., :, c])
    return out


def solve3(A: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched 3x3 solve by cofactors."""
    a, bb, c = A[..., 0, 0], A[..., 0, 1], A[..., 0, 2]
    d, e, f = A[..., 1, 0], A[..., 1, 1], A[..., 1, 2]
    g, h, i = A[..., 2, 0], A[..., 2, 1], A[..., 2, 2]
    c00 = e * i - f * h
    c01 = f * g - d * i
    c02 = d * h - e * g
    det = a * c00 + bb * c01 + c * c02
    inv = np.empty(A.shape, dtype=A.dtype)
    inv[..., 0, 0], inv[..., 0, 1], inv[..., 0, 2] = c00, c * h - bb * i, bb * f - c * e
    inv[..., 1, 0], inv[..., 1, 1], inv[..., 1, 2] = c01, a * i - c * g, c * d - a * f
    inv[..., 2, 0], inv[..., 2, 1], inv[..., 2, 2] = c02, bb * g - a * h, a * e - bb * d
    inv /= det[..., None, None]
    return mat3vec(inv, b)


def _drag(x, quad, visc):
    return -quad * np.abs(x) * x - visc * x


def _drag_slope(x, quad, visc):
    """Negated derivative of ``_drag`` (non-negative)."""
    return 2.0 * quad * np.abs(x) + visc


def fluid_wrench(s: BodyState, params: VehicleParams) -> np.ndarray:
    """Body-frame drag wrench ``[F(3), T(3)]`` on the equivalent inertia box."""
    ql, vl, qr, vr = params.drag_coeffs()
    v = np.asarray(s.v, dtype=float)
    w = np.asarray(s.omega, dtype=float)
    return np.concatenate([_drag(v, ql, vl), _drag(w, qr, vr)], axis=-1)


def gravity_force_body(q: np.ndarray, g_eff, mass: float) -> np.ndarray:
    g_eff = np.asarray(g_eff, dtype=float)
    gw = np.zeros(np.broadcast_shapes(q.shape[:-1], g_eff.shape) + (3,))
    gw[..., 2] = -mass * g_eff
    return so3.quat_rotate_inv(q, gw)


def step_arrays(p, q, v, w, force, torque, g_eff, params: VehicleParams, dt: float, record: bool = False):
    """Core integrator on raw arrays; returns ``(p', q', v', w')`` (+ record)."""
    if dt <= 0:
        raise ValidationError("dt must be positive")
    m = params.mass
    I = params.inertia
    Iinv = params.inertia_inv
    ql, vl, qr, vr = params.drag_coeffs()
    eye = np.eye(3)

    # rotational midpoint: I (w1 - w0) + dt (wm x I wm - T_drag(wm) - tau) = 0
    w1 = w + dt * mat3vec(Iinv, torque + _drag(w, qr, vr) - so3.cross(w, mat3vec(I, w)))
    for _ in range(NEWTON_ITERS):
        wm = 0.5 * (w + w1)
        Iwm = mat3vec(I, wm)
        G = mat3vec(I, w1 - w) + dt * (so3.cross(wm, Iwm) - _drag(wm, qr, vr) - torque)
        J = I + 0.5 * dt * (skew_times(wm, I) - skew(Iwm) + _drag_slope(wm, qr, vr)[..., None] * eye)
        w1 = w1 - solve3(J, G)
    wm = 0.5 * (w + w1)

    # translational midpoint: m (v1 - v0) + dt (m wm x vm - F_drag(vm) - F - F_g) = 0
    fg = gravity_force_body(q, g_eff, m)
    v1 = v + dt * ((force + fg + _drag(v, ql, vl)) / m - so3.cross(wm, v))
    for _ in range(NEWTON_ITERS):
        vm = 0.5 * (v + v1)
        H = m * (v1 - v) + dt * (m * so3.cross(wm, vm) - _drag(vm, ql, vl) - force - fg)
        J = m * eye + 0.5 * dt * (m * skew(wm) + _drag_slope(vm, ql, vl)[..., None] * eye)
        v1 = v1 - solve3(J, H)
    vm = 0.5 * (v + v1)

    p1 = p + dt * so3.quat_rotate(q, v1)
    q1 = so3.quat_integrate(q, w1, dt)
    if not record:
        return p1, q1, v1, w1
    rec = dict(p=p, q=q, v=v, w=w, force=force, torque=torque, g_eff=g_eff,
               v1=v1, w1=w1, vm=vm, wm=wm, fg=fg, dt=dt, params=params)
    return (p1, q1, v1, w1), rec


def _split_wrench(act):
    act = np.asarray(act, dtype=float)
    if act.shape[-1] != 6:
        raise ValidationError(f"wrench must have 6 components, got shape {act.shape}")
    return act[..., :3], act[..., 3:]


def step(s: BodyState, act, params: VehicleParams, dt: float = 0.02, g_eff=None) -> BodyState:
    """One integrator step of a single body under body-frame wrench ``act``."""
    force, torque = _split_wrench(act)
    g = params.g_eff if g_eff is None else g_eff
    with np.errstate(all="ignore"):
        p1, q1, v1, w1 = step_arrays(s.p, s.q, s.v, s.omega, force, torque, g, params, dt)
    out = BodyState(p1, q1, v1, w1)
    if not np.all(out.is_finite()):
        raise PoisonedStateError("non-finite state after step")
    return out


def step_batch(batch: StateBatch, acts, params: VehicleParams, dt: float = 0.02) -> StateBatch:
    """Data-parallel ``step`` over the env index. Non-finite rows are left for the caller."""
    acts = np.asarray(acts, dtype=float)
    if acts.ndim != 2 or acts.shape != (batch.n, 6):
        raise ValidationError(f"actions must be ({batch.n}, 6); got {acts.shape}")
    force, torque = _split_wrench(acts)
    with np.errstate(all="ignore"):
        p1, q1, v1, w1 = step_arrays(batch.p, batch.q, batch.v, batch.omega, force, torque,
                                     batch.g_eff, params, dt)
    return StateBatch(p1, q1, v1, w1, batch.g_eff)


def kinetic_energy(s: BodyState, params: VehicleParams) -> np.ndarray:
    v = np.asarray(s.v)
    w = np.asarray(s.omega)
    return 0.5 * params.mass * np.sum(v * v, axis=-1) + 0.5 * np.sum(w * mat3vec(params.inertia, w), axis=-1)


# ---------------------------------------------------------------------------
# Euler angles (ZYX, roll-pitch-yaw) at the MPC / reporting boundary


def euler_to_quat(rpy) -> np.ndarray:
    rpy = np.asarray(rpy, dtype=float)
    hr, hp, hy = 0.5 * rpy[..., 0], 0.5 * rpy[..., 1], 0.5 * rpy[..., 2]
    cr, sr = np.cos(hr), np.sin(hr)
    cp, sp = np.cos(hp), np.sin(hp)
    cy, sy = np.cos(hy), np.sin(hy)
    return np.stack(
        [
            cy * cp * cr + sy * sp * sr,
            cy * cp * sr - sy * sp * cr,
            cy * sp * cr + sy * cp * sr,
            sy * cp * cr - cy * sp * sr,
        ],
        axis=-1,
    )


def quat_to_euler(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    roll = np.arctan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
    pitch = np.arcsin(np.clip(2 * (w * y - z * x), -1.0, 1.0))
    yaw = np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
    return np.stack([roll, pitch, yaw], axis=-1)


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2 * np.pi) - np.pi


# ---------------------------------------------------------------------------
# Fossen-form model


@dataclass(frozen=True, eq=False)
class FossenParams:
    mass: float
    inertia: np.ndarray
    added_mass: np.ndarray  # diagonal, 6
    lin_damping: np.ndarray  # 6
    quad_damping: np.ndarray  # 6
    g_eff: float = 0.0

    @classmethod
    def from_vehicle(cls, vp: VehicleParams, added_fraction: float = 0.1) -> "FossenParams":
        ql, vl, qr, vr = vp.drag_coeffs()
        diag_i = np.diag(vp.inertia)
        return cls(
            mass=vp.mass,
            inertia=vp.inertia.copy(),
            added_mass=added_fraction * np.concatenate([[vp.mass] * 3, diag_i]),
            lin_damping=np.concatenate([vl, vr]),
            quad_damping=np.concatenate([ql, qr]),
            g_eff=vp.g_eff,
        )

    @property
    def mass_matrix(self) -> np.ndarray:
        M = np.zeros((6, 6))
        M[:3, :3] = self.mass * np.eye(3)
        M[3:, 3:] = self.inertia
        return M + np.diag(self.added_mass)


def _cabs(x):
    # |x| that stays analytic for complex-step differentiation
    return np.where(np.real(x) >= 0, x, -x)


def _cross_c(a, b):
    return so3.cross(a, b)


def euler_rotation(rpy) -> np.ndarray:
    """Body-to-world rotation ``Rz(yaw) Ry(pitch) Rx(roll)``; complex-safe."""
    phi, th, psi = rpy[..., 0], rpy[..., 1], rpy[..., 2]
    cf, sf = np.cos(phi), np.sin(phi)
    ct, st = np.cos(th), np.sin(th)
    cp, sp = np.cos(psi), np.sin(psi)
    rows = [
        [cp * ct, -sp * cf + cp * st * sf, sp * sf + cp * cf * st],
        [sp * ct, cp * cf + sf * st * sp, -cp * sf + st * sp * cf],
        [-st, ct * sf, ct * cf],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def euler_rate_matrix(rpy) -> np.ndarray:
    phi, th = rpy[..., 0], rpy[..., 1]
    cf, sf = np.cos(phi), np.sin(phi)
    ct, tt = np.cos(th), np.tan(th)
    one = np.ones_like(phi)
    zero = np.zeros_like(phi)
    rows = [[one, sf * tt, cf * tt], [zero, cf, -sf], [zero, sf / ct, cf / ct]]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def _check_pitch(eta):
    pitch = np.real(np.asarray(eta)[..., 4])
    if np.any(np.abs(pitch) >= np.pi / 2 - PITCH_MARGIN):
        raise ValidationError("pitch too close to +-pi/2 (Euler kinematic singularity)")


def fossen_matrices(eta, nu, fp: FossenParams):
    """``(M, C(nu), D(nu), g(eta))`` for a single (real) state."""
    eta = np.asarray(eta, dtype=float)
    nu = np.asarray(nu, dtype=float)
    _check_pitch(eta)
    M = fp.mass_matrix
    v, w = nu[:3], nu[3:]
    Ma = fp.added_mass
    m = fp.mass
    C_rb = np.zeros((6, 6))
    C_rb[:3, :3] = m * skew(w)
    C_rb[3:, 3:] = -skew(fp.inertia @ w)
    a1 = Ma[:3] * v
    a2 = Ma[3:] * w
    C_a = np.zeros((6, 6))
    C_a[:3, 3:] = -skew(a1)
    C_a[3:, :3] = -skew(a1)
    C_a[3:, 3:] = -skew(a2)
    D = np.diag(fp.lin_damping + fp.quad_damping * np.abs(nu))
    R = euler_rotation(eta[3:])
    g = np.zeros(6)
    g[:3] = R.T @ np.array([0.0, 0.0, m * fp.g_eff])
    return M, C_rb + C_a, D, g


def fossen_dynamics(eta, nu, tau, fp: FossenParams):
    """Body acceleration ``M^-1 (tau - C(nu) nu - D(nu) nu - g(eta))``.

    Broadcasts over leading dims and accepts complex inputs (complex-step
    differentiation in the MPC linearization).
    """
    eta = np.asarray(eta)
    nu = np.asarray(nu)
    tau = np.asarray(tau)
    _check_pitch(eta)
    v, w = nu[..., :3], nu[..., 3:]
    m = fp.mass
    I = fp.inertia
    Ma = fp.added_mass
    a1 = Ma[:3] * v
    a2 = Ma[3:] * w
    Iw = mat3vec(I, w)
    # C_RB nu + C_A nu
    c_lin = m * _cross_c(w, v) + _cross_c(w, a1)
    c_rot = _cross_c(w, Iw) + _cross_c(v, a1) + _cross_c(w, a2)
    d = (fp.lin_damping + fp.quad_damping * _cabs(nu)) * nu
    R = euler_rotation(eta[..., 3:])
    gz = m * fp.g_eff
    g_lin = R[..., 2, :] * gz  # R^T (0, 0, m g_eff)
    rhs_lin = tau[..., :3] - c_lin - d[..., :3] - g_lin
    rhs_rot = tau[..., 3:] - c_rot - d[..., 3:]
    M = fp.mass_matrix
    Minv = np.linalg.inv(M)
    rhs = np.concatenate([rhs_lin, rhs_rot], axis=-1)
    return np.einsum("ij,...j->...i", Minv, rhs)


def fossen_kinematics(eta, nu):
    """``eta_dot = J(eta) nu`` with Euler-angle attitude."""
    eta = np.asarray(eta)
    nu = np.asarray(nu)
    R = euler_rotation(eta[..., 3:])
    T = euler_rate_matrix(eta[..., 3:])
    return np.concatenate([mat3vec(R, nu[..., :3]), mat3vec(T, nu[..., 3:])], axis=-1)


def fossen_step(x, u, fp: FossenParams, dt: float):
    """RK4 step of the 12-state ``x = (eta, nu)`` with held wrench ``u``."""
    x = np.asarray(x)

    def f(xx):
        eta, nu = xx[..., :6], xx[..., 6:]
        return np.concatenate([fossen_kinematics(eta, nu), fossen_dynamics(eta, nu, u, fp)], axis=-1)

    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
