"""Batched 6-DOF position-control task.

Every environment holds one vehicle and one target pose. The policy sees an
error-based observation in the body frame (position error, attitude error,
body velocities) and commands a normalized body wrench in ``[-1, 1]^6``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import hydrodyn as hd
from . import so3

POISON_PENALTY = -100.0


@dataclass(frozen=True)
class RewardWeights:
    w_pos: float = 1.0
    D: tuple = (1.0, 1.0, 1.0)
    w_att: float = 1.0
    w_act: float = 0.05
    w_vel: float = 0.1
    w_act_mavg: float = 0.1

    def __post_init__(self):
        vals = [self.w_pos, self.w_att, self.w_act, self.w_vel, self.w_act_mavg, *self.D]
        if len(self.D) != 3:
            raise ValueError("reward.D must have three entries")
        if any(v < 0 for v in vals):
            raise ValueError("reward weights must be non-negative")


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.02
    episode_len: int = 512
    ref_pos_range: float = 2.0
    ref_ang_range_deg: float = 60.0
    dr_range: float = 0.03
    history_window: int = 8
    attitude_repr: str = "axis_angle"
    weights: RewardWeights = field(default_factory=RewardWeights)
    vehicle: hd.VehicleParams = field(default_factory=hd.VehicleParams)

    def __post_init__(self):
        if self.attitude_repr not in so3.REPRS:
            raise ValueError(f"unknown attitude_repr {self.attitude_repr!r}")
        if self.episode_len < 1 or self.history_window < 1 or self.dt <= 0:
            raise ValueError("episode_len, history_window and dt must be positive")

    @property
    def obs_dim(self) -> int:
        return 9 + so3.REPR_WIDTH[self.attitude_repr]

    def reduced(self) -> "EnvConfig":
        """Smaller reference ranges used by the desk-scale acceptance runs."""
        return replace(self, ref_pos_range=1.0, ref_ang_range_deg=30.0)


# ---------------------------------------------------------------------------
# counter-based random numbers: value depends only on (seed, env, counter, draw)

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)


def _splitmix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = x + _GOLD
        x = (x ^ (x >> np.uint64(30))) * _M1
        x = (x ^ (x >> np.uint64(27))) * _M2
        return x ^ (x >> np.uint64(31))


def counter_uniform(seed: int, env_ids, counter, n_draws: int) -> np.ndarray:
    """Uniform ``[0, 1)`` draws of shape ``(len(env_ids), n_draws)``."""
    env_ids = np.asarray(env_ids, dtype=np.uint64)
    counter = np.broadcast_to(np.asarray(counter, dtype=np.uint64), env_ids.shape)
    with np.errstate(over="ignore"):
        h = _splitmix(np.full(env_ids.shape, np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))
        h = _splitmix(h ^ env_ids)
        h = _splitmix(h ^ counter)
        draws = np.arange(n_draws, dtype=np.uint64)
        x = _splitmix(h[:, None] ^ (draws[None, :] * _GOLD))
    return (x >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


# ---------------------------------------------------------------------------


@dataclass
class Observation:
    """Body-frame errors and velocities. ``att_err`` is always the axis-angle error."""

    dp: np.ndarray
    dtheta: np.ndarray
    v: np.ndarray
    omega: np.ndarray
    att_err: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([self.dp, self.dtheta, self.v, self.omega], axis=-1)


@dataclass
class EpisodeState:
    state: hd.StateBatch
    p_ref: np.ndarray
    q_ref: np.ndarray
    history: np.ndarray  # (N, W, 6) normalized past actions, zero-padded
    hist_pos: int
    t: np.ndarray  # (N,) steps taken in the current episode
    episode: np.ndarray  # (N,) episodes started per env (RNG counter)
    seed: int
    cfg: EnvConfig
    # per-env running sums for episode metrics
    sq_pos: np.ndarray = None
    sq_att: np.ndarray = None
    ret: np.ndarray = None

    @property
    def n(self) -> int:
        return self.state.n


def sample_references(seed: int, env_ids, counter, cfg: EnvConfig):
    """Reference poses and effective gravity for the given envs."""
    u = counter_uniform(seed, env_ids, counter, 7)
    pr = cfg.ref_pos_range
    p_ref = -pr + 2.0 * pr * u[:, 0:3]
    ang = np.deg2rad(cfg.ref_ang_range_deg)
    rpy = -ang + 2.0 * ang * u[:, 3:6]
    q_ref = so3.canonical(so3.normalize(hd.euler_to_quat(rpy)))
    g_nom = cfg.vehicle.g_eff
    g_eff = g_nom + cfg.dr_range * hd.G0 * (2.0 * u[:, 6] - 1.0)
    return p_ref, q_ref, g_eff


def reset(n: int, seed: int, cfg: EnvConfig, episode: int = 0):
    """Fresh batch: vehicles at the origin at rest, randomized references."""
    ids = np.arange(n)
    ep = np.full(n, episode, dtype=np.int64)
    p_ref, q_ref, g_eff = sample_references(seed, ids, ep, cfg)
    state = hd.StateBatch.at_rest(n, g_eff)
    es = EpisodeState(
        state=state, p_ref=p_ref, q_ref=q_ref,
        history=np.zeros((n, cfg.history_window, 6)), hist_pos=0,
        t=np.zeros(n, dtype=np.int64), episode=ep, seed=seed, cfg=cfg,
        sq_pos=np.zeros(n), sq_att=np.zeros(n), ret=np.zeros(n),
    )
    return es, observe(state, p_ref, q_ref, cfg.attitude_repr)


def reset_envs(es: EpisodeState, mask: np.ndarray) -> EpisodeState:
    """Start a new episode in the masked envs (in place on copies)."""
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return es
    episode = es.episode.copy()
    episode[idx] += 1
    p_ref, q_ref, g_eff = sample_references(es.seed, idx, episode[idx], es.cfg)
    s = es.state
    P, Q, V, W, G = s.p.copy(), s.q.copy(), s.v.copy(), s.omega.copy(), s.g_eff.copy()
    P[idx] = 0.0
    Q[idx] = so3.identity()
    V[idx] = 0.0
    W[idx] = 0.0
    G[idx] = g_eff
    pr, qr = es.p_ref.copy(), es.q_ref.copy()
    pr[idx] = p_ref
    qr[idx] = q_ref
    hist = es.history.copy()
    hist[idx] = 0.0
    t = es.t.copy()
    t[idx] = 0
    out = replace(es, state=hd.StateBatch(P, Q, V, W, G), p_ref=pr, q_ref=qr, history=hist,
                  t=t, episode=episode, sq_pos=es.sq_pos.copy(), sq_att=es.sq_att.copy(),
                  ret=es.ret.copy())
    out.sq_pos[idx] = 0.0
    out.sq_att[idx] = 0.0
    out.ret[idx] = 0.0
    return out


def observe(s: hd.BodyState, p_ref, q_ref, repr: str = "axis_angle") -> Observation:
    dp = so3.quat_rotate_inv(s.q, np.asarray(p_ref) - s.p)
    att = so3.quat_error_axis_angle(q_ref, s.q)
    dtheta = att if repr == "axis_angle" else so3.quat_to_flat_error(q_ref, s.q, repr)
    return Observation(dp, dtheta, np.array(s.v, copy=True), np.array(s.omega, copy=True), att)


def history_mean(history: np.ndarray) -> np.ndarray:
    """Mean over the window axis with a pairwise tree sum.

    For a power-of-two window filled with one repeated action the mean is that
    action exactly.
    """
    h = history
    w = h.shape[-2]
    while h.shape[-2] > 1:
        k = h.shape[-2]
        half = k // 2
        paired = h[..., :half, :] + h[..., half:2 * half, :]
        h = paired if k % 2 == 0 else np.concatenate([paired, h[..., 2 * half:, :]], axis=-2)
    return h[..., 0, :] / w


def reward_terms(dp, att_err, omega, action, hist_mean, w: RewardWeights) -> dict:
    action = np.asarray(action, dtype=float)
    Dp = np.asarray(w.D) * dp
    da = action - hist_mean
    tau = action[..., 3:]
    return {
        "r_pos": -w.w_pos * np.sum(Dp * Dp, axis=-1),
        "r_att": -w.w_att * np.sum(att_err * att_err, axis=-1),
        "r_act": -w.w_act * np.sum(tau * tau, axis=-1),
        "r_vel": -w.w_vel * np.sum(omega * omega, axis=-1),
        "r_act_mavg": -w.w_act_mavg * np.sum(da * da, axis=-1),
    }


REWARD_TERMS = ("r_pos", "r_att", "r_act", "r_vel", "r_act_mavg")


def reward(obs: Observation, action, hist_mean, w: RewardWeights):
    """Total reward and per-term breakdown. Actions are the clamped normalized ones."""
    terms = reward_terms(obs.dp, obs.att_err, obs.omega, action, hist_mean, w)
    total = terms["r_pos"] + terms["r_att"] + terms["r_act"] + terms["r_vel"] + terms["r_act_mavg"]
    return total, terms


def env_step(es: EpisodeState, actions, extra_wrench=None):
    """Advance every env one control step.

    Returns ``(es, obs, rewards, dones, info)``. Finished or poisoned envs are
    reset automatically; ``info["final_obs"]`` keeps their last observation and
    ``info["episode"]`` their episode metrics.
    """
    actions = np.asarray(actions, dtype=float)
    if actions.shape != (es.n, 6):
        raise ValueError(f"actions must be ({es.n}, 6); got {actions.shape}")
    a = np.clip(actions, -1.0, 1.0)
    wrench = a * es.cfg.vehicle.action_scale
    if extra_wrench is not None:
        wrench = wrench + extra_wrench
    state = hd.step_batch(es.state, wrench, es.cfg.vehicle, es.cfg.dt)
    return finish_step(es, state, a)


def finish_step(es: EpisodeState, state: hd.StateBatch, a: np.ndarray):
    """Reward, history, metrics and resets after the physics produced ``state``.

    ``a`` is the clamped normalized action that was applied.
    """
    cfg = es.cfg
    poisoned = ~state.is_finite()
    if np.any(poisoned):
        # keep the batch finite; the env is reset below
        state = hd.StateBatch(state.p.copy(), state.q.copy(), state.v.copy(), state.omega.copy(),
                              state.g_eff)
        for name in ("p", "q", "v", "omega"):
            getattr(state, name)[poisoned] = getattr(es.state, name)[poisoned]
    hmean = history_mean(es.history)
    obs = observe(state, es.p_ref, es.q_ref, cfg.attitude_repr)
    r, terms = reward(obs, a, hmean, cfg.weights)
    r = np.where(poisoned, POISON_PENALTY, r)

    history = es.history.copy()
    history[:, es.hist_pos, :] = a
    t = es.t + 1
    pos_err = np.sum(obs.dp * obs.dp, axis=-1)
    ang = so3.geodesic_angle(es.q_ref, state.q)
    sq_pos = es.sq_pos + pos_err
    sq_att = es.sq_att + ang * ang
    ret = es.ret + r
    dones = (t >= cfg.episode_len) | poisoned
    info = {"terms": terms, "poisoned": poisoned, "pos_err": np.sqrt(pos_err), "att_err": ang,
            "obs_pre_reset": obs}
    new = replace(es, state=state, history=history, hist_pos=(es.hist_pos + 1) % cfg.history_window,
                  t=t, sq_pos=sq_pos, sq_att=sq_att, ret=ret)
    if np.any(dones):
        idx = np.flatnonzero(dones)
        steps = np.maximum(t[idx], 1)
        info["episode"] = {
            "env": idx,
            "rmse_pos": np.sqrt(sq_pos[idx] / steps),
            "rmse_att_deg": np.rad2deg(np.sqrt(sq_att[idx] / steps)),
            "return": ret[idx],
            "length": t[idx],
        }
        info["final_obs"] = obs.flat().copy()
        new = reset_envs(new, dones)
        obs = observe(new.state, new.p_ref, new.q_ref, cfg.attitude_repr)
    return new, obs, r, dones, info


def episode_metrics(pos_err, att_err_rad):
    """Episode RMSEs from per-step ``||dp||`` (m) and geodesic angle (rad).

    Returns ``(position RMSE m, orientation RMSE deg)``.
    """
    pos_err = np.asarray(pos_err, dtype=float)
    att_err_rad = np.asarray(att_err_rad, dtype=float)
    if pos_err.size == 0 or att_err_rad.size == 0:
        raise ValueError("episode_metrics needs a non-empty trajectory")
    return (float(np.sqrt(np.mean(pos_err ** 2))),
            float(np.rad2deg(np.sqrt(np.mean(att_err_rad ** 2)))))


TRAJ_COLUMNS = (
    ["t", "px", "py", "pz", "qw", "qx", "qy", "qz", "u", "v", "w", "p", "q", "r",
     "ax", "ay", "az", "tx", "ty", "tz", "reward"]
    + list(REWARD_TERMS)
)


def write_trajectory_csv(path, rows, extra_columns=()):
    """Write per-step rows (dicts keyed by ``TRAJ_COLUMNS`` plus extras)."""
    cols = list(TRAJ_COLUMNS) + list(extra_columns)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for row in rows:
            wr.writerow([_fmt(row[c]) for c in cols])


def _fmt(x):
    return f"{x:.9g}" if isinstance(x, (float, np.floating)) else str(x)
