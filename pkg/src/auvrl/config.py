"""Flat ``section.key = value`` run configuration.

One setting per line, ``#`` starts a comment, blank lines are ignored. Values
are parsed according to the key's declared type: ``int``, ``float``, ``bool``
(``true``/``false``), ``str``, or a list written ``[a, b, c]``. Unknown keys
and duplicate keys are errors, and every error message names the key.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

from . import so3


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Key:
    kind: str  # int | float | bool | str | ints | floats
    default: object
    check: str = ""  # "", ">=0", ">0", ">=1", or "a|b|c" for choices
    length: int = 0  # fixed list length, 0 = any non-empty
    help: str = ""


def _k(kind, default, check="", length=0, help=""):
    return Key(kind, default, check, length, help)


SCHEMA: dict[str, Key] = {
    "seed": _k("int", 0, ">=0", help="master seed"),
    # task
    "env.num_envs": _k("int", 1024, ">=1", help="parallel environments"),
    "env.dt": _k("float", 0.02, ">0", help="physics and control step [s]"),
    "env.episode_len": _k("int", 512, ">=1", help="steps per episode"),
    "env.ref_pos_range": _k("float", 2.0, ">0", help="reference position box half-width [m]"),
    "env.ref_ang_range_deg": _k("float", 60.0, ">0", help="reference Euler-angle half-range [deg]"),
    "env.dr_range": _k("float", 0.03, ">=0", help="buoyancy randomization as a fraction of g"),
    "env.history_window": _k("int", 8, ">=1", help="action history length for the smoothness term"),
    "env.attitude_repr": _k("str", "axis_angle", "|".join(so3.REPRS), help="attitude error encoding in the observation"),
    # vehicle
    "vehicle.mass": _k("float", 11.5, ">0", help="vehicle mass [kg]"),
    "vehicle.inertia": _k("floats", [0.26, 0.23, 0.37], ">0", 3, "principal moments [kg m^2]"),
    "vehicle.rho": _k("float", 1000.0, ">=0", help="water density [kg/m^3]"),
    "vehicle.mu": _k("float", 1.0e-3, ">=0", help="dynamic viscosity [Pa s]"),
    "vehicle.g_eff": _k("float", 0.0, help="effective gravity g (1 - B/W) [m/s^2]"),
    "vehicle.f_max": _k("float", 30.0, ">0", help="force limit per body axis [N]"),
    "vehicle.tau_max": _k("float", 5.0, ">0", help="torque limit per body axis [N m]"),
    "vehicle.drag_coeff": _k("float", 1.0, ">=0", help="quadratic drag coefficient of the equivalent box"),
    # reward
    "reward.w_pos": _k("float", 1.0, ">=0", help="position error weight"),
    "reward.D": _k("floats", [1.0, 1.0, 1.0], ">=0", 3, help="per-axis position error scaling"),
    "reward.w_att": _k("float", 1.0, ">=0", help="attitude error weight"),
    "reward.w_act": _k("float", 0.05, ">=0", help="action magnitude weight"),
    "reward.w_vel": _k("float", 0.1, ">=0", help="velocity weight"),
    "reward.w_act_mavg": _k("float", 0.1, ">=0", help="weight on deviation from the action history mean"),
    # shared training
    "train.episodes": _k("int", 100, ">=1", help="rounds of episodes (every env finishes one)"),
    "train.hidden": _k("ints", [256, 256], ">=1", help="hidden layer widths of every network"),
    "train.max_wall_s": _k("float", 0.0, ">=0", help="wall-clock cap, 0 = none"),
    "train.eval_envs": _k("int", 64, ">=1", help="envs for the final deterministic evaluation"),
    # PPO
    "ppo.rollout_len": _k("int", 32, ">=1", help="steps per env between updates"),
    "ppo.epochs": _k("int", 5, ">=1", help="passes over each rollout"),
    "ppo.minibatches": _k("int", 4, ">=1", help="minibatches per pass"),
    "ppo.lr": _k("float", 3e-4, ">0", help="initial policy learning rate"),
    "ppo.value_lr": _k("float", 1e-3, ">0", help="value network learning rate"),
    "ppo.gamma": _k("float", 0.99, ">0", help="discount"),
    "ppo.lam": _k("float", 0.95, ">=0", help="GAE lambda"),
    "ppo.clip": _k("float", 0.2, ">0", help="ratio clip range"),
    "ppo.entropy_coef": _k("float", 1e-3, ">=0", help="entropy bonus"),
    "ppo.max_grad_norm": _k("float", 1.0, ">0", help="global gradient norm clip"),
    "ppo.desired_kl": _k("float", 0.01, ">=0", help="KL target of the adaptive learning rate, 0 = fixed rate"),
    "ppo.lr_max": _k("float", 1e-3, ">0", help="learning-rate ceiling for the adaptive rule"),
    "ppo.init_log_std": _k("float", -0.5, help="initial log standard deviation"),
    "ppo.scale_rewards": _k("bool", True, help="divide rewards by a running return scale"),
    # SHAC
    "shac.horizon": _k("int", 32, ">=1", help="differentiated window length [steps]"),
    "shac.lr": _k("float", 2e-3, ">0", help="initial actor learning rate"),
    "shac.lr_final": _k("float", 2e-4, ">0", help="actor learning rate at the end (linear decay)"),
    "shac.critic_lr": _k("float", 1e-3, ">0", help="critic learning rate"),
    "shac.critic_iters": _k("int", 8, ">=1", help="critic passes per window"),
    "shac.critic_minibatches": _k("int", 4, ">=1", help="critic minibatches per pass"),
    "shac.gamma": _k("float", 0.99, ">0", help="discount"),
    "shac.lam": _k("float", 0.95, ">=0", help="TD(lambda) mixing for critic targets"),
    "shac.max_grad_norm": _k("float", 1.0, ">0", help="global gradient norm clip"),
    "shac.init_log_std": _k("float", -1.0, help="initial log standard deviation"),
    # DroQ
    "droq.n_critics": _k("int", 2, ">=1", help="critic ensemble size"),
    "droq.dropout": _k("float", 0.01, ">=0", help="critic dropout rate"),
    "droq.utd": _k("int", 20, ">=1", help="gradient updates per batched env step"),
    "droq.batch_size": _k("int", 256, ">=1", help="replay minibatch size"),
    "droq.replay_size": _k("int", 1_000_000, ">=1", help="replay capacity [transitions]"),
    "droq.polyak": _k("float", 0.005, ">0", help="target network averaging rate"),
    "droq.gamma": _k("float", 0.99, ">0", help="discount"),
    "droq.lr": _k("float", 3e-4, ">0", help="actor learning rate"),
    "droq.critic_lr": _k("float", 3e-4, ">0", help="critic learning rate"),
    "droq.init_alpha": _k("float", 0.1, ">0", help="initial entropy temperature"),
    "droq.target_entropy": _k("float", -6.0, help="entropy target of the temperature update"),
    "droq.warmup_steps": _k("int", 10, ">=0", help="batched steps of uniform random actions"),
    # evaluation suites
    "eval.helix_radius": _k("float", 1.0, ">0", help="helix radius [m]"),
    "eval.helix_pitch": _k("float", 0.25, help="climb per turn [m]"),
    "eval.helix_omega": _k("float", 0.2, ">0", help="angular rate around the helix axis [rad/s]"),
    "eval.waypoint_period": _k("float", 0.25, ">0", help="reference update period [s]"),
    "eval.step_angle": _k("float", 0.6, help="attitude step size [rad]"),
    "eval.hold_s": _k("float", 20.0, ">0", help="hold suite length [s]"),
    "eval.disturb_force": _k("float", 20.0, help="lateral pulse force [N]"),
    "eval.disturb_duration": _k("float", 0.5, ">0", help="pulse length [s]"),
    "eval.recovery_tol": _k("float", 0.05, ">0", help="position band for recovery [m]"),
    "eval.recovery_window": _k("float", 10.0, ">0", help="allowed recovery time after a pulse [s]"),
    "eval.duration_s": _k("float", 0.0, ">=0", help="override every suite's length, 0 = suite default"),
    # MPC
    "mpc.horizon": _k("int", 20, ">=1", help="prediction horizon H [steps]"),
    "mpc.control_horizon": _k("int", 5, ">=1", help="control horizon H_c [steps], inputs frozen after it"),
    "mpc.dt": _k("float", 0.1, ">0", help="model step [s]"),
    "mpc.q_pos": _k("float", 10.0, ">=0", help="state weight on position"),
    "mpc.q_att": _k("float", 5.0, ">=0", help="state weight on roll/pitch/yaw"),
    "mpc.q_vel": _k("float", 1.0, ">=0", help="state weight on linear and angular velocity"),
    "mpc.r": _k("float", 0.1, ">0", help="input weight (R = r I)"),
    "mpc.u_scale": _k("float", 1.0, ">0", help="input bounds as a multiple of the vehicle limits"),
    # benchmarks
    "bench.algo": _k("str", "ppo", "ppo|shac|droq", help="trainer used by bench-scaling and ablate-attitude"),
    "bench.env_counts": _k("ints", [2, 8, 32, 128], ">=1", help="env counts trained to convergence"),
    "bench.throughput_counts": _k("ints", [4096], ">=1", help="env counts timed for one episode only"),
    "bench.stop_streak": _k("int", 5, ">=0", help="stop once this many rounds are in tolerance, 0 = never"),
    # gradient checks
    "gradcheck.seeds": _k("int", 100, ">=1", help="seeds per differentiable primitive"),
    "gradcheck.rollout_seeds": _k("int", 100, ">=0", help="seeds of the rollout check"),
    "gradcheck.dot_seeds": _k("int", 4, ">=0", help="seeds of the dot-product check"),
}


def _parse_scalar(key: str, kind: str, text: str):
    t = text.strip()
    try:
        if kind in ("int", "ints"):
            if not t.lstrip("+-").isdigit():
                raise ValueError
            return int(t)
        if kind in ("float", "floats"):
            v = float(t)
            if math.isnan(v):
                raise ValueError
            return v
        if kind == "bool":
            low = t.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError
        if kind == "str":
            if len(t) >= 2 and t[0] == t[-1] and t[0] in "\"'":
                t = t[1:-1]
            return t
    except ValueError:
        pass
    raise ConfigError(f"{key}: expected {kind.rstrip('s')}, got {text.strip()!r}")


def parse_value(key: str, text: str):
    spec = _spec(key)
    if spec.kind in ("ints", "floats"):
        t = text.strip()
        if t.startswith("[") and t.endswith("]"):
            t = t[1:-1]
        parts = [p for p in t.split(",") if p.strip()]
        if not parts:
            raise ConfigError(f"{key}: expected a non-empty list")
        value = [_parse_scalar(key, spec.kind, p) for p in parts]
    else:
        value = _parse_scalar(key, spec.kind, text)
    validate(key, value)
    return value


def _spec(key: str) -> Key:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    return SCHEMA[key]


def validate(key: str, value) -> None:
    spec = _spec(key)
    items = value if spec.kind in ("ints", "floats") else [value]
    if spec.length and len(items) != spec.length:
        raise ConfigError(f"{key}: expected {spec.length} values, got {len(items)}")
    c = spec.check
    if not c:
        return
    if "|" in c or spec.kind == "str":
        if value not in c.split("|"):
            raise ConfigError(f"{key}: must be one of {c.split('|')}, got {value!r}")
        return
    bound = float(c.lstrip("<>="))
    for v in items:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {v!r}")
        ok = v >= bound if c.startswith(">=") else v > bound
        if not ok:
            word = "non-negative" if c == ">=0" else "positive" if c == ">0" else f"{c}"
            raise ConfigError(f"{key}: must be {word} ({c}), got {v}")


def defaults() -> dict:
    return {k: (list(s.default) if isinstance(s.default, list) else s.default) for k, s in SCHEMA.items()}


def parse_lines(text: str, source: str = "<config>") -> dict:
    """Key/value pairs from config text (only the keys present)."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        try:
            out[key] = parse_value(key, val)
        except ConfigError as e:
            raise ConfigError(f"{source}:{n}: {e}") from None
    return out


def load(path=None, overrides=()) -> dict:
    """Defaults, then the file (if any), then ``key=value`` overrides."""
    cfg = defaults()
    if path is not None:
        with open(path) as fh:
            cfg.update(parse_lines(fh.read(), str(path)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        cfg[k] = parse_value(k, v)
    _cross_checks(cfg)
    return cfg


def _cross_checks(cfg: dict) -> None:
    if cfg["mpc.control_horizon"] > cfg["mpc.horizon"]:
        raise ConfigError("mpc.control_horizon: must not exceed mpc.horizon")


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return "[" + ", ".join(format_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def snapshot(cfg: dict) -> str:
    """Canonical text: every key in sorted order. Parsing it gives ``cfg`` back."""
    return "".join(f"{k} = {format_value(cfg[k])}\n" for k in sorted(cfg))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(snapshot(cfg).encode()).hexdigest()


def section(cfg: dict, prefix: str) -> dict:
    """Keys under ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}


# ---------------------------------------------------------------------------
# typed views


def vehicle_params(cfg: dict):
    from . import hydrodyn as hd

    v = section(cfg, "vehicle")
    return hd.VehicleParams(mass=v["mass"], inertia=v["inertia"], rho=v["rho"], mu=v["mu"], g_eff=v["g_eff"],
                            f_max=v["f_max"], tau_max=v["tau_max"], drag_coeff=v["drag_coeff"])


def env_config(cfg: dict):
    from . import envpool as ep

    e = section(cfg, "env")
    r = section(cfg, "reward")
    w = ep.RewardWeights(w_pos=r["w_pos"], D=tuple(r["D"]), w_att=r["w_att"], w_act=r["w_act"],
                         w_vel=r["w_vel"], w_act_mavg=r["w_act_mavg"])
    return ep.EnvConfig(dt=e["dt"], episode_len=e["episode_len"], ref_pos_range=e["ref_pos_range"],
                        ref_ang_range_deg=e["ref_ang_range_deg"], dr_range=e["dr_range"],
                        history_window=e["history_window"], attitude_repr=e["attitude_repr"],
                        weights=w, vehicle=vehicle_params(cfg))


def trainer_overrides(cfg: dict, algo: str) -> dict:
    out = dict(section(cfg, algo))
    out.update(n_envs=cfg["env.num_envs"], seed=cfg["seed"], hidden=tuple(cfg["train.hidden"]),
               episodes=cfg["train.episodes"], max_wall_s=cfg["train.max_wall_s"])
    return out


def mpc_config(cfg: dict):
    import numpy as np

    from . import mpc

    m = section(cfg, "mpc")
    vp = vehicle_params(cfg)
    q = np.diag([m["q_pos"]] * 3 + [m["q_att"]] * 3 + [m["q_vel"]] * 6)
    s = vp.action_scale * m["u_scale"]
    return mpc.MpcConfig(Q=q, Q_H=q.copy(), R=m["r"] * np.eye(6), H=m["horizon"], H_c=m["control_horizon"],
                         dt=m["dt"], u_lo=-s, u_hi=s.copy())
