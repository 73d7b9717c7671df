"""Evaluation suites: reference trajectories, closed-loop episodes, error reports.

Also holds thrust allocation for an eight-thruster layout and the two
benchmark drivers (env-count scaling and attitude-representation ablation).
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Callable

import numpy as np

from . import envpool as ep
from . import hydrodyn as hd
from . import neural as nn
from . import so3


class TrajectoryError(ValueError):
    pass


class AllocationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# reference trajectories

KINDS = ("helix_center_locked", "step_pose", "hold_pose")


@dataclass(frozen=True)
class TrajectorySpec:
    """A reference trajectory.

    ``helix_center_locked`` circles the vertical axis through ``center`` with
    the vehicle's nose pointing at that axis while climbing ``pitch`` metres per
    turn. ``step_pose`` holds ``start`` until ``step_time`` and ``target``
    after it. ``hold_pose`` holds ``target`` throughout. The vehicle starts at
    rest on the helix for the helix and at ``start`` otherwise.
    """

    kind: str = "helix_center_locked"
    radius: float = 1.0
    pitch: float = 0.25
    omega: float = 0.2
    z0: float = 0.0
    center: tuple = (0.0, 0.0)
    waypoint_period: float = 0.25
    duration: float | None = None
    start_pos: tuple = (0.0, 0.0, 0.0)
    start_rpy: tuple = (0.0, 0.0, 0.0)
    target_pos: tuple = (0.0, 0.0, 0.0)
    target_rpy: tuple = (0.0, 0.0, 0.0)
    step_time: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise TrajectoryError(f"unknown trajectory kind {self.kind!r}")
        if self.radius <= 0 or self.omega <= 0 or self.waypoint_period <= 0:
            raise TrajectoryError("radius, omega and waypoint_period must be > 0")
        if self.duration is not None and self.duration <= 0:
            raise TrajectoryError("duration must be > 0")

    @property
    def length(self) -> float:
        if self.duration is not None:
            return float(self.duration)
        if self.kind == "helix_center_locked":
            return 2.0 * math.pi / self.omega
        return 10.0


def gen_reference(spec: TrajectorySpec, t: float):
    """Reference ``(position, unit quaternion)`` at time ``t`` (continuous)."""
    if not (0.0 <= t <= spec.length + 1e-9) or not math.isfinite(t):
        raise TrajectoryError(f"t={t} outside [0, {spec.length}]")
    if spec.kind == "helix_center_locked":
        a = spec.omega * t
        cx, cy = spec.center
        p = np.array([cx + spec.radius * math.cos(a), cy + spec.radius * math.sin(a),
                      spec.z0 + spec.pitch * a / (2.0 * math.pi)])
        # facing the axis: heading opposite to the radial direction
        q = hd.euler_to_quat(np.array([0.0, 0.0, a + math.pi]))
        return p, so3.normalize(q)
    if spec.kind == "hold_pose" or t >= spec.step_time:
        return np.array(spec.target_pos, float), so3.normalize(hd.euler_to_quat(np.array(spec.target_rpy, float)))
    return np.array(spec.start_pos, float), so3.normalize(hd.euler_to_quat(np.array(spec.start_rpy, float)))


def waypoint_time(spec: TrajectorySpec, t: float) -> float:
    """Latest waypoint instant at or before ``t``, clamped to the trajectory."""
    k = math.floor(t / spec.waypoint_period + 1e-9)
    return min(max(k * spec.waypoint_period, 0.0), spec.length)


def initial_pose(spec: TrajectorySpec):
    if spec.kind == "helix_center_locked":
        return gen_reference(spec, 0.0)
    return np.array(spec.start_pos, float), so3.normalize(hd.euler_to_quat(np.array(spec.start_rpy, float)))


# ---------------------------------------------------------------------------
# disturbances


@dataclass(frozen=True)
class DisturbanceSchedule:
    """Body-frame wrench pulses ``(start_time, wrench[6], duration)``; windows must not overlap."""

    pulses: tuple = ()

    def __post_init__(self):
        cleaned = []
        for t0, w, dur in self.pulses:
            w = tuple(float(x) for x in w)
            if len(w) != 6:
                raise ValueError("disturbance wrench must have six components")
            if dur <= 0 or t0 < 0:
                raise ValueError("disturbance start must be >= 0 and duration > 0")
            cleaned.append((float(t0), w, float(dur)))
        cleaned.sort(key=lambda x: x[0])
        for (a0, _, ad), (b0, _, _) in zip(cleaned, cleaned[1:]):
            if b0 < a0 + ad:
                raise ValueError(f"disturbance windows overlap at t={b0}")
        object.__setattr__(self, "pulses", tuple(cleaned))

    def wrench(self, t: float) -> np.ndarray:
        for t0, w, dur in self.pulses:
            if t0 <= t < t0 + dur:
                return np.array(w)
        return np.zeros(6)

    def windows(self):
        return [(t0, t0 + dur) for t0, _, dur in self.pulses]


def lateral_pulses(force: float = 20.0, duration: float = 0.5, times=(5.0, 20.0, 35.0)) -> DisturbanceSchedule:
    """Alternating sway pulses used by the disturbance suite."""
    pulses = []
    for i, t0 in enumerate(times):
        sign = 1.0 if i % 2 == 0 else -1.0
        pulses.append((t0, (0.0, sign * force, 0.0, 0.0, 0.0, 0.0), duration))
    return DisturbanceSchedule(tuple(pulses))


# ---------------------------------------------------------------------------
# controllers

Controller = Callable[[hd.BodyState, Callable, float], np.ndarray]


class PolicyController:
    """Deterministic wrapper around a trained policy: mean action, clamped and scaled."""

    def __init__(self, policy: nn.GaussianPolicy, env_cfg: ep.EnvConfig, name: str = "policy"):
        self.policy = policy
        self.cfg = env_cfg
        self.name = name

    def reset(self):
        pass

    def __call__(self, s: hd.BodyState, ref_fn, t: float) -> np.ndarray:
        p_ref, q_ref = ref_fn(t)
        obs = ep.observe(s, p_ref, q_ref, self.cfg.attitude_repr).flat()
        a = np.asarray(nn.policy_mean_action(self.policy, obs[None, :])[0], dtype=np.float64)
        return np.clip(a, -1.0, 1.0) * self.cfg.vehicle.action_scale


class PDController:
    """Body-frame PD on position and axis-angle error; a baseline with no training."""

    def __init__(self, vehicle: hd.VehicleParams, kp=(40.0, 8.0), kd=(30.0, 3.0), name: str = "pd"):
        self.vehicle = vehicle
        self.kp, self.kd = kp, kd
        self.name = name

    def reset(self):
        pass

    def __call__(self, s, ref_fn, t):
        p_ref, q_ref = ref_fn(t)
        o = ep.observe(s, p_ref, q_ref)
        u = np.concatenate([self.kp[0] * o.dp - self.kd[0] * o.v,
                            self.kp[1] * o.att_err - self.kd[1] * o.omega])
        lim = self.vehicle.action_scale
        return np.clip(u, -lim, lim)


# ---------------------------------------------------------------------------
# closed-loop episodes

REF_COLUMNS = ("ref_px", "ref_py", "ref_pz", "ref_qw", "ref_qx", "ref_qy", "ref_qz", "pos_err", "att_err_deg")


@dataclass
class EpisodeResult:
    name: str
    t: np.ndarray
    p: np.ndarray
    q: np.ndarray
    p_ref: np.ndarray
    q_ref: np.ndarray
    wrench: np.ndarray
    rows: list
    report: "RmseRow"

    @property
    def pos_err(self) -> np.ndarray:
        return np.linalg.norm(self.p - self.p_ref, axis=-1)

    @property
    def att_err(self) -> np.ndarray:
        return so3.geodesic_angle(self.q_ref, self.q)


def run_episode(controller, spec: TrajectorySpec, disturbances: DisturbanceSchedule | None = None,
                seed: int = 0, env_cfg: ep.EnvConfig | None = None, name: str | None = None,
                randomize_buoyancy: bool = False) -> EpisodeResult:
    """Closed-loop rollout at the physics rate.

    The controller is called every physics step as ``controller(state, ref_fn, t)``
    and returns a body wrench in N and N m; ``ref_fn`` holds each waypoint for one
    waypoint period. Disturbance wrenches are added on top of the command.
    The vehicle starts at rest on the reference pose at ``t = 0``.
    """
    cfg = env_cfg or ep.EnvConfig()
    vp = cfg.vehicle
    dist = disturbances or DisturbanceSchedule()
    g_eff = vp.g_eff
    if randomize_buoyancy:
        u = ep.counter_uniform(seed, [0], 0, 1)[0, 0]
        g_eff = vp.g_eff + cfg.dr_range * hd.G0 * (2.0 * u - 1.0)
    if hasattr(controller, "reset"):
        controller.reset()
    n_steps = int(round(spec.length / cfg.dt))

    def ref_fn(t):
        return gen_reference(spec, waypoint_time(spec, min(max(t, 0.0), spec.length)))

    p0, q0 = initial_pose(spec)
    s = hd.BodyState.at_rest(p0, q0)
    scale = vp.action_scale
    history = np.zeros((cfg.history_window, 6))
    ts, ps, qs, prs, qrs, ws, rows = [], [], [], [], [], [], []
    for k in range(n_steps):
        t = k * cfg.dt
        cmd = np.asarray(controller(s, ref_fn, t), dtype=float)
        if cmd.shape != (6,) or not np.all(np.isfinite(cmd)):
            raise ValueError(f"controller returned an invalid wrench at t={t}: {cmd}")
        a = np.clip(cmd / scale, -1.0, 1.0)
        total = a * scale + dist.wrench(t)
        s = hd.step(s, total, vp, cfg.dt, g_eff=g_eff)
        if not np.all(s.is_finite()):
            raise hd.PoisonedStateError(f"non-finite state at t={t}")
        t1 = (k + 1) * cfg.dt
        p_ref, q_ref = ref_fn(t1)
        obs = ep.observe(s, p_ref, q_ref, cfg.attitude_repr)
        r, terms = ep.reward(obs, a, ep.history_mean(history), cfg.weights)
        history[k % cfg.history_window] = a
        pe = float(np.linalg.norm(s.p - p_ref))
        ae = float(np.rad2deg(so3.geodesic_angle(q_ref, s.q)))
        row = {"t": t1}
        row.update(zip(("px", "py", "pz"), s.p.tolist()))
        row.update(zip(("qw", "qx", "qy", "qz"), s.q.tolist()))
        row.update(zip(("u", "v", "w"), s.v.tolist()))
        row.update(zip(("p", "q", "r"), s.omega.tolist()))
        row.update(zip(("ax", "ay", "az", "tx", "ty", "tz"), a.tolist()))
        row["reward"] = float(r)
        row.update({k2: float(v) for k2, v in terms.items()})
        row.update(zip(REF_COLUMNS[:3], p_ref.tolist()))
        row.update(zip(REF_COLUMNS[3:7], q_ref.tolist()))
        row["pos_err"], row["att_err_deg"] = pe, ae
        rows.append(row)
        ts.append(t1)
        ps.append(s.p.copy())
        qs.append(s.q.copy())
        prs.append(p_ref)
        qrs.append(q_ref)
        ws.append(total)
    label = name or getattr(controller, "name", "controller")
    P, Q, PR, QR = np.array(ps), np.array(qs), np.array(prs), np.array(qrs)
    return EpisodeResult(label, np.array(ts), P, Q, PR, QR, np.array(ws), rows,
                         rmse_row(label, P, Q, PR, QR))


def recovery_times(result: EpisodeResult, schedule: DisturbanceSchedule, tol: float = 0.05):
    """Seconds from each pulse end until the position error stays below ``tol``.

    "Stays" means until the next pulse starts (or the episode ends). ``inf``
    when the error never settles inside that window.
    """
    err = result.pos_err
    t = result.t
    wins = schedule.windows()
    out = []
    for i, (_, end) in enumerate(wins):
        nxt = wins[i + 1][0] if i + 1 < len(wins) else t[-1] + 1.0
        sel = (t >= end) & (t < nxt)
        if not np.any(sel):
            out.append(math.inf)
            continue
        tt, ee = t[sel], err[sel]
        bad = np.flatnonzero(ee >= tol)
        if bad.size == 0:
            out.append(0.0)
        elif bad[-1] == ee.size - 1:
            out.append(math.inf)
        else:
            out.append(float(tt[bad[-1] + 1] - end))
    return out


def step_overshoot(result: EpisodeResult, spec: TrajectorySpec) -> float:
    """Largest excursion past the target along the step direction, as a fraction of the step.

    Attitude steps are measured on the roll/pitch/yaw angles, position steps on
    the displacement.
    """
    if spec.kind != "step_pose":
        raise TrajectoryError("overshoot needs a step_pose trajectory")
    after = result.t >= spec.step_time
    drpy = np.array(spec.target_rpy) - np.array(spec.start_rpy)
    dpos = np.array(spec.target_pos) - np.array(spec.start_pos)
    if np.linalg.norm(drpy) > 0:
        mag = np.linalg.norm(drpy)
        d = drpy / mag
        rpy = hd.quat_to_euler(result.q[after])
        excursion = hd.wrap_angle(rpy - np.array(spec.target_rpy)) @ d
    else:
        mag = np.linalg.norm(dpos)
        if mag == 0:
            return 0.0
        d = dpos / mag
        excursion = (result.p[after] - np.array(spec.target_pos)) @ d
    return float(max(0.0, np.max(excursion)) / mag)


# ---------------------------------------------------------------------------
# error reports

ATTITUDE_FOOTNOTE = ("Att. is the RMSE of the geodesic angle between measured and reference "
                     "orientation, in degrees; roll/pitch/yaw columns are RMSEs of wrapped "
                     "Euler-angle differences in rad.")
REPORT_COLUMNS = ("controller", "x_m", "y_m", "z_m", "pos3d_m", "roll_rad", "pitch_rad", "yaw_rad", "att_deg")


@dataclass(frozen=True)
class RmseRow:
    controller: str
    x: float
    y: float
    z: float
    pos3d: float
    roll: float
    pitch: float
    yaw: float
    att_deg: float

    def values(self):
        return (self.controller, self.x, self.y, self.z, self.pos3d, self.roll, self.pitch, self.yaw, self.att_deg)


def _rms(x, axis=0):
    return np.sqrt(np.mean(np.square(x), axis=axis))


def rmse_row(name: str, p, q, p_ref, q_ref) -> RmseRow:
    p, q, p_ref, q_ref = (np.asarray(x, dtype=float) for x in (p, q, p_ref, q_ref))
    if len(p) != len(p_ref) or len(q) != len(q_ref) or len(p) != len(q):
        raise ValueError(f"trajectory lengths differ: {len(p)}, {len(q)} vs reference {len(p_ref)}, {len(q_ref)}")
    if len(p) == 0:
        raise ValueError("empty trajectory")
    dp = p - p_ref
    axes = _rms(dp)
    pos3d = math.sqrt(float(np.mean(np.sum(dp * dp, axis=-1))))
    drpy = hd.wrap_angle(hd.quat_to_euler(q) - hd.quat_to_euler(q_ref))
    eul = _rms(drpy)
    att = math.degrees(math.sqrt(float(np.mean(so3.geodesic_angle(q_ref, q) ** 2))))
    return RmseRow(name, *(float(x) for x in axes), pos3d, *(float(x) for x in eul), att)


def format_summary(row: RmseRow) -> str:
    """Compact ``x/y/z/3D m and att°`` form."""
    return f"{row.x:.3f}/{row.y:.3f}/{row.z:.3f}/{row.pos3d:.3f} m and {row.att_deg:.2f}°"


def rmse_report(rows, csv_path=None) -> str:
    """Aligned text table (with footnote); optionally also written as CSV."""
    rows = list(rows)
    head = ["Controller", "x [m]", "y [m]", "z [m]", "3D [m]", "roll [rad]", "pitch [rad]", "yaw [rad]", "Att. [deg]"]
    body = [[r.controller] + [f"{v:.3f}" for v in r.values()[1:-1]] + [f"{r.att_deg:.2f}"] for r in rows]
    widths = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(head)]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(head, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for b in body:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(b, widths))))
    lines.append("")
    lines.append(ATTITUDE_FOOTNOTE)
    if csv_path is not None:
        write_rows_csv(csv_path, REPORT_COLUMNS, [r.values() for r in rows])
    return "\n".join(lines) + "\n"


def write_rows_csv(path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(columns)
        for r in rows:
            wr.writerow([_cell(v) for v in r])


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "inf" if math.isinf(v) else f"{float(v):.9g}"
    return str(v)


# ---------------------------------------------------------------------------
# suites


@dataclass(frozen=True)
class SuiteCase:
    label: str
    spec: TrajectorySpec
    disturbances: DisturbanceSchedule = field(default_factory=DisturbanceSchedule)


SUITES = ("helix", "step", "hold", "disturb")


HOLD_SETPOINT = (0.5, -0.3, 0.2)
HOLD_RPY = (0.0, 0.0, 0.3)


def suite_cases(suite: str, radius: float = 1.0, pitch: float = 0.25, omega: float = 0.2,
                waypoint_period: float = 0.25, step_angle: float = 0.6, hold_s: float = 20.0,
                force: float = 20.0, pulse_s: float = 0.5, duration: float = 0.0) -> list:
    """Trajectories (and disturbances) making up one evaluation suite.

    ``duration > 0`` shortens or stretches every case, which is handy for smoke runs.
    """
    dur = duration or None
    wp = waypoint_period
    if suite == "helix":
        return [SuiteCase("helix", TrajectorySpec(radius=radius, pitch=pitch, omega=omega,
                                                  waypoint_period=wp, duration=dur))]
    if suite == "step":
        out = []
        for i, axis in enumerate(("roll", "pitch", "yaw")):
            rpy = [0.0, 0.0, 0.0]
            rpy[i] = step_angle
            out.append(SuiteCase(f"step_{axis}", TrajectorySpec(kind="step_pose", target_rpy=tuple(rpy),
                                                                 waypoint_period=wp, step_time=1.0,
                                                                 duration=dur or 10.0)))
        return out
    if suite == "hold":
        # starts displaced from the setpoint so the hold has to settle
        return [SuiteCase("hold", TrajectorySpec(kind="hold_pose", waypoint_period=wp, duration=dur or hold_s,
                                                 target_pos=HOLD_SETPOINT, target_rpy=HOLD_RPY))]
    if suite == "disturb":
        length = dur or 45.0
        times = tuple(t for t in (5.0, 20.0, 35.0) if t + pulse_s < length) or (min(1.0, length / 4),)
        return [SuiteCase("disturb", TrajectorySpec(kind="hold_pose", waypoint_period=wp, duration=length),
                          lateral_pulses(force, pulse_s, times))]
    raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")


def steady_state_error(result: EpisodeResult, window_s: float = 2.0) -> float:
    """Mean position error over the final ``window_s`` seconds."""
    sel = result.t > result.t[-1] - window_s
    return float(np.mean(result.pos_err[sel]))


# ---------------------------------------------------------------------------
# thrust allocation


@dataclass(frozen=True, eq=False)
class AllocationModel:
    """Wrench map ``w = B f`` for body-fixed thrusters plus per-thruster limits."""

    B: np.ndarray
    limits: np.ndarray
    lookup_thrust: np.ndarray
    lookup_command: np.ndarray
    name: str = "layout"

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        if B.ndim != 2 or B.shape[0] != 6:
            raise AllocationError(f"allocation matrix must be 6 x n; got {B.shape}")
        if np.linalg.matrix_rank(B) < 6:
            raise AllocationError("allocation matrix is rank deficient; the layout cannot produce every wrench")
        lim = np.broadcast_to(np.asarray(self.limits, dtype=float), (B.shape[1],)).copy()
        if np.any(lim <= 0):
            raise AllocationError("thrust limits must be > 0")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "limits", lim)
        object.__setattr__(self, "pinv", np.linalg.pinv(B))

    @classmethod
    def from_layout(cls, layout: dict) -> "AllocationModel":
        cols, lims = [], []
        for th in layout["thrusters"]:
            r = np.asarray(th["pos"], dtype=float)
            d = np.asarray(th["dir"], dtype=float)
            d = d / np.linalg.norm(d)
            cols.append(np.concatenate([d, np.cross(r, d)]))
            lims.append(float(th["max_thrust"]))
        lk = layout.get("lookup", {"thrust": [-1.0, 1.0], "command": [-1.0, 1.0]})
        return cls(np.array(cols).T, np.array(lims), np.asarray(lk["thrust"], float),
                   np.asarray(lk["command"], float), layout.get("name", "layout"))

    @classmethod
    def from_file(cls, path=None) -> "AllocationModel":
        if path is None:
            text = resources.files("auvrl").joinpath("data/thrusters_heavy8.json").read_text()
        else:
            with open(path) as fh:
                text = fh.read()
        return cls.from_layout(json.loads(text))

    def commands(self, forces) -> np.ndarray:
        """Thruster commands through the (thrust -> command) lookup table."""
        return np.interp(forces, self.lookup_thrust, self.lookup_command)


def allocate(w, model: AllocationModel) -> np.ndarray:
    """Minimum-norm thruster forces for wrench ``w``.

    If any thruster would exceed its limit, all forces are scaled down by the
    same factor, so the produced wrench keeps the commanded direction.
    """
    w = np.asarray(w, dtype=float)
    if w.shape != (6,):
        raise AllocationError(f"wrench must have six components; got {w.shape}")
    f = model.pinv @ w
    ratio = float(np.max(np.abs(f) / model.limits))
    if ratio > 1.0:
        f = f / ratio
    return f


# ---------------------------------------------------------------------------
# benchmarks

SCALING_COLUMNS = ("env_count", "steps_per_s", "wall_100ep_s", "convergence_s", "algorithm", "seed")


@dataclass
class ScalingRow:
    env_count: int
    steps_per_s: float
    wall_100ep_s: float
    convergence_s: float | None
    algorithm: str
    seed: int
    episodes: int = 0
    final_rmse_pos: float = math.nan
    env_steps: int = 0
    converged_round: int | None = None

    def values(self):
        return (self.env_count, self.steps_per_s, self.wall_100ep_s, self.convergence_s, self.algorithm, self.seed)


def scaling_benchmark(env_counts, algo: str = "ppo", seed: int = 0, episodes: int = 100,
                      max_wall_s: float = 0.0, env_cfg: ep.EnvConfig | None = None,
                      trainer_overrides: dict | None = None, throughput_only=(), stop_streak: int = 0) -> list:
    """Train once per env count; record throughput and time to convergence.

    Env counts listed in ``throughput_only`` run a single episode and report no
    convergence time. ``convergence_s`` is ``None`` when training stopped
    before the tolerance streak was reached. With ``stop_streak > 0`` a run
    ends once that many consecutive rounds are within tolerance.
    """
    from .trainers import common, train

    env_cfg = env_cfg or ep.EnvConfig().reduced()
    rows = []
    for n in env_counts:
        eps = 1 if n in throughput_only else episodes
        overrides = dict(trainer_overrides or {}, n_envs=int(n), seed=seed, episodes=eps,
                         max_wall_s=0.0 if n in throughput_only else max_wall_s)
        t0 = time.perf_counter()
        stop = None if n in throughput_only else common.ConvergenceStop(stop_streak)
        _, log = train(algo, overrides, env_cfg, stop)
        wall = time.perf_counter() - t0
        steps = log.records[-1]["env_steps"] if log.records else 0
        per_ep = wall / max(len(log.records), 1)
        conv = None if n in throughput_only else common.convergence_time(log.records)
        conv_round = None if n in throughput_only else common.convergence_time(log.records, key="episode")
        rows.append(ScalingRow(int(n), steps / wall if wall > 0 else 0.0, 100.0 * per_ep, conv, algo, seed,
                               len(log.records), log.final_mean("rmse_pos_m"), int(steps), conv_round))
    return rows


ABLATION_COLUMNS = ("attitude_repr", "obs_width", "final_rmse_pos_m", "final_rmse_att_deg", "converged",
                    "algorithm", "seed")


def attitude_repr_ablation(algo: str = "ppo", seed: int = 0, env_cfg: ep.EnvConfig | None = None,
                           trainer_overrides: dict | None = None, eval_envs: int = 64):
    """Train one policy per attitude representation with everything else fixed.

    Returns ``(rows, trained)`` where ``trained`` maps representation to
    ``(policy, log)``. Final errors come from deterministic evaluation episodes.
    """
    from .trainers import common, train

    env_cfg = env_cfg or ep.EnvConfig().reduced()
    rows, trained = [], {}
    for rep in so3.REPRS:
        cfg = replace(env_cfg, attitude_repr=rep)
        overrides = dict(trainer_overrides or {}, seed=seed)
        policy, log = train(algo, overrides, cfg)
        ev = common.evaluate_policy(policy, cfg, eval_envs, seed + 1000)
        pos = float(np.mean(ev["rmse_pos"]))
        att = float(np.mean(ev["rmse_att_deg"]))
        rows.append((rep, cfg.obs_dim, pos, att, bool(pos < 0.25 and att < 15.0), algo, seed))
        trained[rep] = (policy, log)
    return rows, trained
