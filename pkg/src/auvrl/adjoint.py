"""Reverse-mode derivatives of the simulator, observation, reward and policy.

Each primitive has a hand-written vector-Jacobian product (VJP) that takes the
values saved on the forward pass and an output cotangent and returns input
cotangents. ``rollout`` runs the task environment while recording those
values on a ``RolloutTape``; ``backprop_rollout`` sweeps the tape backwards.

Quaternion inputs are treated as free 4-vectors: a VJP returns the gradient
with respect to all four components, exactly as a finite difference of the
forward function would see it.

The integrator's implicit-midpoint velocity solves are differentiated with
the implicit function theorem at the converged solution, not by unrolling
the Newton iterations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import envpool as ep
from . import hydrodyn as hd
from . import neural as nn
from . import so3

# observe(in), policy, clamp, step, observe(out), reward
STEP_PRIMITIVES = ("observe_in", "policy", "clamp", "step", "observe_out", "reward")
PRIMITIVES_PER_STEP = len(STEP_PRIMITIVES)


# ---------------------------------------------------------------------------
# rotation primitives


def vjp_cross(a, b, g):
    """``c = a x b``: returns ``(a_bar, b_bar)``."""
    return so3.cross(b, g), so3.cross(g, a)


def vjp_normalize(x, g):
    n = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    y = x / n
    return (g - y * np.sum(y * g, axis=-1, keepdims=True)) / n


def vjp_qmul(a, b, g):
    """``c = a ⊗ b`` (unnormalized): returns ``(a_bar, b_bar)``."""
    return so3.qmul_raw(g, so3.conj(b)), so3.qmul_raw(so3.conj(a), g)


def vjp_quat_rotate(q, v, g):
    """``y = quat_rotate(q, v)``: returns ``(q_bar, v_bar)``."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * so3.cross(u, v)
    t_bar = w * g + so3.cross(g, u)
    w_bar = np.sum(g * t, axis=-1, keepdims=True)
    u_bar = so3.cross(t, g) + 2.0 * so3.cross(v, t_bar)
    v_bar = g + 2.0 * so3.cross(t_bar, u)
    return np.concatenate([w_bar, u_bar], axis=-1), v_bar


def vjp_quat_rotate_inv(q, v, g):
    qc_bar, v_bar = vjp_quat_rotate(so3.conj(q), v, g)
    return so3.conj(qc_bar), v_bar


def vjp_axis_angle_to_quat(v, g):
    v = np.asarray(v, dtype=float)
    th = np.sqrt(np.sum(v * v, axis=-1))
    small = th < so3.SMALL_ANGLE
    safe = np.where(small, 1.0, th)
    k = np.where(small, 0.5 - th * th / 48.0, np.sin(0.5 * th) / safe)
    # k'(th) / th, with its series where the closed form cancels
    series = th < 1e-2
    th2 = th * th
    closed = (0.5 * np.cos(0.5 * th) * th - np.sin(0.5 * th)) / np.where(series, 1.0, safe) ** 3
    kp = np.where(series, -1.0 / 24.0 + th2 / 960.0 - th2 * th2 / 107520.0, closed)
    gw = g[..., 0]
    gu = g[..., 1:]
    coef = -0.5 * k * gw + kp * np.sum(gu * v, axis=-1)
    return k[..., None] * gu + coef[..., None] * v


def vjp_quat_to_axis_angle(q, g):
    q = np.asarray(q, dtype=float)
    sign = np.where(q[..., :1] < 0.0, -1.0, 1.0)
    qc = sign * q
    w = qc[..., 0]
    u = qc[..., 1:]
    n2 = np.sum(u * u, axis=-1)
    n = np.sqrt(n2)
    angle = 2.0 * np.arctan2(n, w)
    small = angle < so3.SMALL_ANGLE
    safe_n = np.where(small, 1.0, n)
    safe_w = np.where(small, w, 1.0)
    f = np.where(small, 2.0 / safe_w, angle / safe_n)
    r2 = n2 + w * w
    df_dw = np.where(small, -2.0 / (safe_w * safe_w), -2.0 / r2)
    # (df/dn) / n; series in s = n / w where the closed form cancels
    use_series = (~small) & (n < 1e-2 * w)
    ws = np.where(use_series, w, 1.0)
    s2 = n2 / (ws * ws)
    ser = 2.0 / ws ** 3 * (-2.0 / 3.0 + 0.8 * s2 - 6.0 / 7.0 * s2 * s2)
    closed = (2.0 * w / r2 - f) / np.where(small | use_series, 1.0, n2)
    dfn = np.where(small, 0.0, np.where(use_series, ser, closed))
    gu_dot = np.sum(g * u, axis=-1)
    u_bar = f[..., None] * g + (dfn * gu_dot)[..., None] * u
    w_bar = df_dw * gu_dot
    return sign * np.concatenate([w_bar[..., None], u_bar], axis=-1)


def vjp_quat_to_rotmat(q, G):
    """``G`` is the (..., 3, 3) cotangent of the rotation matrix."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    g = [[G[..., i, j] for j in range(3)] for i in range(3)]
    gw = 2 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1])
    gx = 2 * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2 * x * g[1][1] - w * g[1][2]
              + z * g[2][0] + w * g[2][1] - 2 * x * g[2][2])
    gy = 2 * (-2 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2]
              - w * g[2][0] + z * g[2][1] - 2 * y * g[2][2])
    gz = 2 * (-2 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2 * z * g[1][1]
              + y * g[1][2] + x * g[2][0] + y * g[2][1])
    return np.stack([gw, gx, gy, gz], axis=-1)


def _error_raw(q_ref, q_meas):
    return so3.qmul_raw(so3.conj(q_meas), q_ref)


def _vjp_error_raw(q_ref, q_meas, e_bar):
    c_bar, qr_bar = vjp_qmul(so3.conj(q_meas), q_ref, e_bar)
    return qr_bar, so3.conj(c_bar)


def vjp_quat_error_axis_angle(q_ref, q_meas, g):
    """Returns ``(q_ref_bar, q_meas_bar)``."""
    e = _error_raw(q_ref, q_meas)
    return _vjp_error_raw(q_ref, q_meas, vjp_quat_to_axis_angle(e, g))


def vjp_quat_error(q_ref, q_meas, g):
    e = _error_raw(q_ref, q_meas)
    sign = np.where(e[..., :1] < 0.0, -1.0, 1.0)
    return _vjp_error_raw(q_ref, q_meas, vjp_normalize(e, sign * g))


def vjp_flat_error(q_ref, q_meas, repr, g):
    if repr == "axis_angle":
        return vjp_quat_error_axis_angle(q_ref, q_meas, g)
    if repr == "quaternion":
        return vjp_quat_error(q_ref, q_meas, g)
    if repr == "rotmat":
        qe = so3.quat_error(q_ref, q_meas)
        G = g.reshape(g.shape[:-1] + (3, 3))
        return vjp_quat_error(q_ref, q_meas, vjp_quat_to_rotmat(qe, G))
    raise so3.RotationError(f"unknown attitude representation {repr!r}")


def vjp_quat_integrate(q, omega, dt, g):
    """Returns ``(q_bar, omega_bar)``."""
    dq = so3.axis_angle_to_quat(omega * dt)
    raw = so3.qmul_raw(q, dq)
    raw_bar = vjp_normalize(raw, g)
    q_bar, dq_bar = vjp_qmul(q, dq, raw_bar)
    return q_bar, dt * vjp_axis_angle_to_quat(omega * dt, dq_bar)


# ---------------------------------------------------------------------------
# physics


def vjp_fluid_wrench(v, omega, params: hd.VehicleParams, g):
    """Returns ``(v_bar, omega_bar)`` for the (..., 6) wrench cotangent ``g``."""
    ql, vl, qr, vr = params.drag_coeffs()
    return (-hd._drag_slope(v, ql, vl) * g[..., :3],
            -hd._drag_slope(omega, qr, vr) * g[..., 3:])


def vjp_step(rec: dict, p1_bar, q1_bar, v1_bar, w1_bar):
    """VJP of ``hydrodyn.step_arrays`` from its saved record.

    Returns ``(p_bar, q_bar, v_bar, w_bar, force_bar, torque_bar)``.
    """
    params = rec["params"]
    dt = rec["dt"]
    m = params.mass
    I = params.inertia
    ql, vl, qr, vr = params.drag_coeffs()
    q, v1, w1, vm, wm = rec["q"], rec["v1"], rec["w1"], rec["vm"], rec["wm"]
    eye = np.eye(3)

    # q1 = normalize(q ⊗ exp(w1 dt));  p1 = p + dt R(q) v1
    q_bar, w1_tot = vjp_quat_integrate(q, w1, dt, q1_bar)
    w1_tot = w1_tot + w1_bar
    qr_bar, v1_rot = vjp_quat_rotate(q, v1, dt * p1_bar)
    q_bar = q_bar + qr_bar
    v1_tot = v1_bar + v1_rot
    p_bar = np.array(p1_bar, dtype=float, copy=True)

    # translational residual H(v0, v1, wm, F, q) = 0
    slope_v = hd._drag_slope(vm, ql, vl)[..., None]
    half = 0.5 * dt * (m * hd.skew(wm) + slope_v * eye)
    Jv1 = m * eye + half
    lam = hd.solve3(np.swapaxes(Jv1, -1, -2), v1_tot)
    v_bar = m * lam - hd.mat3tvec(half, lam)
    force_bar = dt * lam
    gq_bar, _ = vjp_quat_rotate_inv(q, _gravity_world(rec), force_bar)
    q_bar = q_bar + gq_bar
    wm_bar = -dt * m * so3.cross(vm, lam)
    w1_tot = w1_tot + 0.5 * wm_bar

    # rotational residual G(w0, w1, tau) = 0
    Iwm = hd.mat3vec(I, wm)
    slope_w = hd._drag_slope(wm, qr, vr)[..., None]
    halfw = 0.5 * dt * (hd.skew_times(wm, I) - hd.skew(Iwm) + slope_w * eye)
    Jw1 = I + halfw
    mu = hd.solve3(np.swapaxes(Jw1, -1, -2), w1_tot)
    w_bar = hd.mat3tvec(I, mu) - hd.mat3tvec(halfw, mu) + 0.5 * wm_bar
    torque_bar = dt * mu
    return p_bar, q_bar, v_bar, w_bar, force_bar, torque_bar


def _gravity_world(rec):
    g_eff = np.asarray(rec["g_eff"], dtype=float)
    gw = np.zeros(np.broadcast_shapes(rec["q"].shape[:-1], g_eff.shape) + (3,))
    gw[..., 2] = -rec["params"].mass * g_eff
    return gw


# ---------------------------------------------------------------------------
# task: observation, reward, action clamp


def observe_record(p, q, v, omega, p_ref, q_ref, repr):
    return dict(p=p, q=q, v=v, omega=omega, p_ref=p_ref, q_ref=q_ref, repr=repr)


def vjp_observe(rec: dict, g_flat=None, g_att=None):
    """Cotangents on the flat observation and/or the axis-angle reward error.

    Returns ``(p_bar, q_bar, v_bar, w_bar)``.
    """
    p, q = rec["p"], rec["q"]
    width = so3.REPR_WIDTH[rec["repr"]]
    p_bar = np.zeros_like(p)
    q_bar = np.zeros_like(q)
    v_bar = np.zeros_like(p)
    w_bar = np.zeros_like(p)
    if g_flat is not None:
        g_flat = np.asarray(g_flat, dtype=float)
        g_dp = g_flat[..., :3]
        g_th = g_flat[..., 3:3 + width]
        v_bar = v_bar + g_flat[..., 3 + width:6 + width]
        w_bar = w_bar + g_flat[..., 6 + width:9 + width]
        qb, vec_bar = vjp_quat_rotate_inv(q, rec["p_ref"] - p, g_dp)
        q_bar = q_bar + qb
        p_bar = p_bar - vec_bar
        q_bar = q_bar + vjp_flat_error(rec["q_ref"], q, rec["repr"], g_th)[1]
    if g_att is not None:
        q_bar = q_bar + vjp_quat_error_axis_angle(rec["q_ref"], q, g_att)[1]
    return p_bar, q_bar, v_bar, w_bar


def vjp_reward(rec: dict, g_r):
    """``rec`` holds dp, att_err, omega, action, hist_mean, weights.

    Returns ``(dp_bar, att_bar, omega_bar, action_bar)``; the history mean is
    treated as a constant.
    """
    w: ep.RewardWeights = rec["weights"]
    g = np.asarray(g_r, dtype=float)[..., None]
    D = np.asarray(w.D)
    dp_bar = -2.0 * w.w_pos * D * D * rec["dp"] * g
    att_bar = -2.0 * w.w_att * rec["att_err"] * g
    om_bar = -2.0 * w.w_vel * rec["omega"] * g
    a = rec["action"]
    a_bar = -2.0 * w.w_act_mavg * (a - rec["hist_mean"]) * g
    a_bar[..., 3:] += -2.0 * w.w_act * a[..., 3:] * g
    return dp_bar, att_bar, om_bar, a_bar


def vjp_clamp(rec: dict, g_wrench, g_action=None):
    """Clamp to ``[-1, 1]`` then scale to a wrench.

    Straight-through inside the range, zero gradient where the clamp is active.
    ``g_action`` is an extra cotangent on the clamped (normalized) action.
    """
    g = np.asarray(g_wrench, dtype=float) * rec["scale"]
    if g_action is not None:
        g = g + g_action
    raw = rec["raw"]
    return np.where((raw > -1.0) & (raw < 1.0), g, 0.0)


# ---------------------------------------------------------------------------
# networks


def vjp_policy(rec: dict, g_raw):
    """``raw = mean(obs) + exp(log_std) * eps``.

    Returns ``(param grads in policy.arrays() order, obs_bar)``.
    """
    pol: nn.GaussianPolicy = rec["policy"]
    g_raw = np.asarray(g_raw, dtype=float)
    grads, g_obs = nn.mlp_backward(pol.net, rec["net_cache"], g_raw)
    if pol.log_std is not None:
        raw_ls = rec["raw_log_std"]
        live = (raw_ls >= nn.LOG_STD_MIN) & (raw_ls <= nn.LOG_STD_MAX)
        g_ls = np.sum(g_raw * rec["sigma"] * rec["eps"], axis=0) * live
        grads = grads + [g_ls.astype(pol.log_std.dtype)]
    return grads, np.asarray(g_obs, dtype=float)


_SIMPLE = {
    "cross": lambda r, g: vjp_cross(r["a"], r["b"], g),
    "normalize": lambda r, g: vjp_normalize(r["x"], g),
    "quat_mul": lambda r, g: vjp_qmul(r["a"], r["b"], g),
    "quat_rotate": lambda r, g: vjp_quat_rotate(r["q"], r["v"], g),
    "quat_rotate_inv": lambda r, g: vjp_quat_rotate_inv(r["q"], r["v"], g),
    "axis_angle_to_quat": lambda r, g: vjp_axis_angle_to_quat(r["v"], g),
    "quat_to_axis_angle": lambda r, g: vjp_quat_to_axis_angle(r["q"], g),
    "quat_to_rotmat": lambda r, g: vjp_quat_to_rotmat(r["q"], g),
    "quat_error_axis_angle": lambda r, g: vjp_quat_error_axis_angle(r["q_ref"], r["q_meas"], g),
    "flat_error": lambda r, g: vjp_flat_error(r["q_ref"], r["q_meas"], r["repr"], g),
    "quat_integrate": lambda r, g: vjp_quat_integrate(r["q"], r["omega"], r["dt"], g),
    "fluid_wrench": lambda r, g: vjp_fluid_wrench(r["v"], r["omega"], r["params"], g),
    "step": lambda r, g: vjp_step(r, *g),
    "observe": lambda r, g: vjp_observe(r, *g),
    "reward": lambda r, g: vjp_reward(r, g),
    "clamp": lambda r, g: vjp_clamp(r, g),
    "policy": lambda r, g: vjp_policy(r, g),
    "linear": lambda r, g: nn.linear_backward(r["x"], r["W"], g),
    "elu": lambda r, g: nn.elu_backward(r["x"], g),
    "layer_norm": lambda r, g: nn.layer_norm_backward(nn.layer_norm(r["x"], r["gain"], r["bias"])[1],
                                                      r["gain"], g),
    "mlp": lambda r, g: nn.mlp_backward(r["params"], nn.mlp_forward(r["params"], r["x"], cache=True)[1], g),
}


def vjp_primitive(kind: str, record: dict, cotangent):
    """Dispatch to the VJP of one primitive by name."""
    try:
        fn = _SIMPLE[kind]
    except KeyError:
        raise KeyError(f"no VJP registered for primitive {kind!r}; known: {sorted(_SIMPLE)}") from None
    return fn(record, cotangent)


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutTape:
    """Forward values of a recorded rollout, ``PRIMITIVES_PER_STEP`` entries per step."""

    n_envs: int
    repr: str
    gamma: float
    entries: list = field(default_factory=list)  # (kind, record) in forward order
    dones: list = field(default_factory=list)  # per step, (N,) bool: env reset after this step
    poisoned: list = field(default_factory=list)

    @property
    def horizon(self) -> int:
        return len(self.dones)

    def __len__(self) -> int:
        return len(self.entries)

    def step_entries(self, t: int) -> list:
        k = PRIMITIVES_PER_STEP
        return self.entries[t * k:(t + 1) * k]


@dataclass
class GradBundle:
    policy: list  # gradients in policy.arrays() order
    state0: dict  # cotangents of the initial p, q, v, omega
    actions: np.ndarray  # (horizon, N, 6) cotangents of the raw policy actions


@dataclass
class RolloutResult:
    es: ep.EpisodeState  # environment after the rollout (finished envs reset)
    rewards: np.ndarray  # (horizon, N)
    obs: np.ndarray  # (horizon, N, obs_dim) policy inputs
    final_obs: np.ndarray  # (N, obs_dim) observation after the last step, before any reset
    dones: np.ndarray  # (horizon, N)
    infos: list
    tape: RolloutTape | None


def rollout(policy: nn.GaussianPolicy, es: ep.EpisodeState, noise, gamma: float = 1.0,
            record: bool = True) -> RolloutResult:
    """Run ``len(noise)`` control steps with actions ``mean + exp(log_std) * noise``.

    The environment bookkeeping (history, metrics, resets) is the same as
    ``envpool.env_step``.
    """
    if policy.squash:
        raise ValueError("differentiable rollouts need an unsquashed Gaussian policy")
    cfg = es.cfg
    noise = np.asarray(noise, dtype=float)
    horizon = noise.shape[0]
    tape = RolloutTape(es.n, cfg.attitude_repr, gamma) if record else None
    scale = cfg.vehicle.action_scale
    rewards, obs_all, dones_all, infos = [], [], [], []
    final_obs = None
    for t in range(horizon):
        s = es.state
        orec = observe_record(s.p, s.q, s.v, s.omega, es.p_ref, es.q_ref, cfg.attitude_repr)
        obs = ep.observe(s, es.p_ref, es.q_ref, cfg.attitude_repr).flat()
        out, cache = nn.mlp_forward(policy.net, obs, cache=True)
        mean = np.asarray(out, dtype=float)
        raw_ls = np.asarray(policy.log_std, dtype=float)
        sigma = np.exp(np.clip(raw_ls, nn.LOG_STD_MIN, nn.LOG_STD_MAX))
        raw = mean + sigma * noise[t]
        a = np.clip(raw, -1.0, 1.0)
        wrench = a * scale
        (p1, q1, v1, w1), srec = hd.step_arrays(s.p, s.q, s.v, s.omega, wrench[:, :3], wrench[:, 3:],
                                                s.g_eff, cfg.vehicle, cfg.dt, record=True)
        with np.errstate(invalid="ignore"):
            new_state = hd.StateBatch(p1, q1, v1, w1, s.g_eff)
        hmean = ep.history_mean(es.history)
        p_ref, q_ref = es.p_ref, es.q_ref
        es, next_obs, r, dones, info = ep.finish_step(es, new_state, a)
        obs_out = info["obs_pre_reset"]
        if record:
            o2 = observe_record(p1, q1, v1, w1, p_ref, q_ref, cfg.attitude_repr)
            tape.entries += [
                ("observe", orec),
                ("policy", dict(policy=policy, net_cache=cache, raw_log_std=raw_ls, sigma=sigma,
                                eps=noise[t])),
                ("clamp", dict(raw=raw, scale=scale)),
                ("step", srec),
                ("observe", o2),
                ("reward", dict(dp=obs_out.dp, att_err=obs_out.att_err, omega=obs_out.omega,
                                action=a, hist_mean=hmean, hist_len=cfg.history_window,
                                weights=cfg.weights)),
            ]
            tape.dones.append(dones)
            tape.poisoned.append(info["poisoned"])
        rewards.append(r)
        obs_all.append(obs)
        dones_all.append(dones)
        infos.append(info)
        final_obs = obs_out.flat()
    return RolloutResult(es, np.array(rewards), np.array(obs_all), final_obs, np.array(dones_all),
                         infos, tape)


def backprop_rollout(tape: RolloutTape, terminal_cotangent=None, reward_scale=1.0,
                     through_history: bool = True) -> GradBundle:
    """Gradient of ``sum_t gamma^t * reward_scale * r_t + <terminal_cotangent, final_obs>``.

    ``reward_scale`` may be a scalar or an ``(N,)`` array. The rewards are
    summed over envs. Gradients do not flow through resets or poisoned steps.
    With ``through_history=False`` the moving average of past actions in the
    smoothness term is treated as a constant.
    """
    h = tape.horizon
    if h == 0:
        raise ValueError("empty tape")
    n = tape.n_envs
    zeros3 = np.zeros((n, 3))
    g_p, g_q, g_v, g_w = zeros3, np.zeros((n, 4)), zeros3, zeros3
    policy = tape.step_entries(0)[1][1]["policy"]
    g_params = [np.zeros(a.shape, dtype=np.float64) for a in policy.arrays()]
    g_actions = np.zeros((h, n, 6))
    if terminal_cotangent is not None:
        rec = tape.step_entries(h - 1)[4][1]
        g_p, g_q, g_v, g_w = vjp_observe(rec, g_flat=terminal_cotangent)
    scale = np.broadcast_to(np.asarray(reward_scale, dtype=float), (n,))
    g_hist = np.zeros((h, n, 6))  # cotangents reaching clamped actions via later history means
    for t in reversed(range(h)):
        (_, o_in), (_, prec), (_, crec), (_, srec), (_, o_out), (_, rrec) = tape.step_entries(t)
        live = ~tape.poisoned[t]
        g_r = np.where(live, scale * tape.gamma ** t, 0.0)
        dp_b, att_b, om_b, a_b = vjp_reward(rrec, g_r)
        if through_history:
            _push_history_cotangent(tape, rrec, g_r, t, g_hist)
            a_b = a_b + g_hist[t]
        # the reward observation only reads dp, att_err and omega
        width = so3.REPR_WIDTH[tape.repr]
        g_flat = np.zeros((n, 9 + width))
        g_flat[:, :3] = dp_b
        g_flat[:, 6 + width:] = om_b
        b = vjp_observe(o_out, g_flat=g_flat, g_att=att_b)
        g_p, g_q, g_v, g_w = g_p + b[0], g_q + b[1], g_v + b[2], g_w + b[3]
        sp, sq, sv, sw, sf, st = vjp_step(srec, g_p, g_q, g_v, g_w)
        m = live[:, None]
        sp, sq, sv, sw = (np.where(m, x, 0.0) for x in (sp, sq, sv, sw))
        sf, st = np.where(m, sf, 0.0), np.where(m, st, 0.0)
        g_raw = vjp_clamp(crec, np.concatenate([sf, st], axis=-1), g_action=np.where(m, a_b, 0.0))
        g_actions[t] = g_raw
        pgrads, g_obs = vjp_policy(prec, g_raw)
        for i, g in enumerate(pgrads):
            g_params[i] += g
        b = vjp_observe(o_in, g_flat=g_obs)
        g_p, g_q, g_v, g_w = sp + b[0], sq + b[1], sv + b[2], sw + b[3]
        if t > 0:
            keep = ~tape.dones[t - 1][:, None]
            g_p, g_q, g_v, g_w = (np.where(keep, x, 0.0) for x in (g_p, g_q, g_v, g_w))
    return GradBundle(g_params, dict(p=g_p, q=g_q, v=g_v, omega=g_w), g_actions)


def _push_history_cotangent(tape: RolloutTape, rrec: dict, g_r, t: int, g_hist):
    """Spread the history-mean cotangent of step ``t`` over the actions it averaged."""
    w: ep.RewardWeights = rrec["weights"]
    window = rrec["hist_len"]
    g_mean = 2.0 * w.w_act_mavg * (rrec["action"] - rrec["hist_mean"]) * np.asarray(g_r)[:, None]
    alive = np.ones(tape.n_envs, dtype=bool)
    for k in range(1, min(window, t) + 1):
        alive &= ~tape.dones[t - k] & ~tape.poisoned[t - k]
        if not alive.any():
            break
        g_hist[t - k] += np.where(alive[:, None], g_mean / window, 0.0)
