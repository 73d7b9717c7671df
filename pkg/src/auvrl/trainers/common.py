"""Pieces shared by the three trainers: logs, replay storage, GAE, evaluation."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import envpool as ep
from .. import neural as nn

# keys of a log record that depend on the machine, kept out of the deterministic log
TIMING_KEYS = ("wall_s", "steps_per_s")


@dataclass
class TrainLog:
    """One record per completed round of episodes (every env finished one)."""

    algo: str
    records: list = field(default_factory=list)
    _t0: float = field(default_factory=time.perf_counter, repr=False)

    def add(self, episode_info: dict, env_steps: int, **extra) -> dict:
        rec = {
            "episode": len(self.records) + 1,
            "env_steps": int(env_steps),
            "rmse_pos_m": float(np.mean(episode_info["rmse_pos"])),
            "rmse_att_deg": float(np.mean(episode_info["rmse_att_deg"])),
            "return": float(np.mean(episode_info["return"])),
            "wall_s": time.perf_counter() - self._t0,
        }
        rec["steps_per_s"] = rec["env_steps"] / max(rec["wall_s"], 1e-9)
        rec.update({k: float(v) for k, v in extra.items()})
        self.records.append(rec)
        return rec

    def write_jsonl(self, path, include_timing: bool = False) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                row = r if include_timing else {k: v for k, v in r.items() if k not in TIMING_KEYS}
                fh.write(json.dumps(row, sort_keys=True) + "\n")

    def final_mean(self, key: str, k: int = 10) -> float:
        vals = [r[key] for r in self.records[-k:]]
        return float(np.mean(vals)) if vals else float("nan")

    def elapsed(self) -> float:
        return time.perf_counter() - self._t0


class EpisodeAccumulator:
    """Collects per-env episode results until every env has reported one."""

    def __init__(self, n_envs: int):
        self.n = n_envs
        self._parts = {k: [] for k in ("rmse_pos", "rmse_att_deg", "return")}
        self._count = 0

    def push(self, info: dict) -> dict | None:
        e = info.get("episode")
        if e is None:
            return None
        for k in self._parts:
            self._parts[k].append(np.asarray(e[k]))
        self._count += len(e["env"])
        if self._count < self.n:
            return None
        out = {k: np.concatenate(v) for k, v in self._parts.items()}
        self._parts = {k: [] for k in self._parts}
        self._count = 0
        return out


def convergence_time(records, pos_tol: float = 0.25, att_tol_deg: float = 15.0, key: str = "wall_s"):
    """``key`` of the first episode after which every episode stays within tolerance.

    Returns ``None`` when the last episode is still out of tolerance.
    """
    first = None
    for r in records:
        ok = r["rmse_pos_m"] < pos_tol and r["rmse_att_deg"] < att_tol_deg
        if not ok:
            first = None
        elif first is None:
            first = r
    return None if first is None else first[key]


class ConvergenceStop:
    """``on_episode`` hook that stops training after ``streak`` consecutive in-tolerance rounds."""

    def __init__(self, streak: int = 5, pos_tol: float = 0.25, att_tol_deg: float = 15.0):
        self.streak, self.pos_tol, self.att_tol = streak, pos_tol, att_tol_deg
        self.count = 0

    def __call__(self, rec: dict, policy=None) -> bool:
        ok = rec["rmse_pos_m"] < self.pos_tol and rec["rmse_att_deg"] < self.att_tol
        self.count = self.count + 1 if ok else 0
        return self.streak > 0 and self.count >= self.streak


class ReplayBuffer:
    """FIFO ring buffer of transitions."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int, dtype=np.float32):
        if capacity < 1:
            raise ValueError("replay capacity must be positive")
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim), dtype)
        self.act = np.zeros((capacity, act_dim), dtype)
        self.rew = np.zeros(capacity, dtype)
        self.next_obs = np.zeros((capacity, obs_dim), dtype)
        self.done = np.zeros(capacity, dtype)
        self.ptr = 0
        self.size = 0

    def add(self, obs, act, rew, next_obs, done) -> None:
        obs = np.atleast_2d(obs)
        n = obs.shape[0]
        if n > self.capacity:
            sl = slice(n - self.capacity, n)
            obs, act, rew, next_obs, done = (np.asarray(x)[sl] for x in (obs, act, rew, next_obs, done))
            n = self.capacity
        idx = (self.ptr + np.arange(n)) % self.capacity
        self.obs[idx] = obs
        self.act[idx] = np.atleast_2d(act)
        self.rew[idx] = np.ravel(rew)
        self.next_obs[idx] = np.atleast_2d(next_obs)
        self.done[idx] = np.ravel(done)
        self.ptr = int((self.ptr + n) % self.capacity)
        self.size = min(self.size + n, self.capacity)

    def sample(self, rng: np.random.Generator, batch: int) -> dict:
        """Uniform minibatch, without replacement (capped at the stored count)."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        i = rng.choice(self.size, size=min(batch, self.size), replace=False)
        return dict(obs=self.obs[i], act=self.act[i], rew=self.rew[i], next_obs=self.next_obs[i],
                    done=self.done[i])

    def oldest(self):
        """Observation of the oldest stored transition."""
        start = self.ptr if self.size == self.capacity else 0
        return self.obs[start]


def gae(rewards, values, last_values, dones=None, gamma: float = 0.99, lam: float = 0.95,
        next_values=None, terminated=None):
    """Generalized advantage estimates for ``(T, N)`` arrays.

    ``dones[t]`` marks an episode boundary after step ``t`` (no advantage
    flows across it). ``next_values[t]`` is the value of the state reached by
    step ``t`` (before any reset); by default it is ``values`` shifted by one
    with ``last_values`` at the end. ``terminated[t]`` zeroes the bootstrap.
    Returns ``(advantages, returns)``.
    """
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    T = r.shape[0]
    if next_values is None:
        next_values = np.concatenate([v[1:], np.asarray(last_values, dtype=np.float64)[None]], axis=0)
    nv = np.asarray(next_values, dtype=np.float64)
    d = np.zeros_like(r) if dones is None else np.asarray(dones, dtype=np.float64)
    term = np.zeros_like(r) if terminated is None else np.asarray(terminated, dtype=np.float64)
    adv = np.zeros_like(r)
    running = np.zeros(r.shape[1:])
    for t in reversed(range(T)):
        delta = r[t] + gamma * (1.0 - term[t]) * nv[t] - v[t]
        running = delta + gamma * lam * (1.0 - d[t]) * running
        adv[t] = running
    return adv, adv + v


def td_lambda_targets(rewards, next_values, dones=None, gamma: float = 0.99, lam: float = 0.95,
                      terminated=None):
    """Lambda-returns for each step; ``next_values[t]`` as in ``gae``."""
    r = np.asarray(rewards, dtype=np.float64)
    nv = np.asarray(next_values, dtype=np.float64)
    d = np.zeros_like(r) if dones is None else np.asarray(dones, dtype=np.float64)
    term = np.zeros_like(r) if terminated is None else np.asarray(terminated, dtype=np.float64)
    out = np.zeros_like(r)
    T = r.shape[0]
    G = None
    for t in reversed(range(T)):
        if t == T - 1:
            cont = nv[t]
        else:
            # at an episode boundary the return bootstraps fully from V
            cont = np.where(d[t] > 0, nv[t], (1.0 - lam) * nv[t] + lam * G)
        G = r[t] + gamma * (1.0 - term[t]) * cont
        out[t] = G
    return out


class RewardScaler:
    """Divides rewards by a running std of the discounted return."""

    def __init__(self, n_envs: int, gamma: float):
        self.gamma = gamma
        self.ret = np.zeros(n_envs)
        self.count = 0
        self.mean = 0.0
        self.m2 = 0.0

    def __call__(self, rewards, dones):
        self.ret = self.ret * self.gamma + rewards
        for x in (self.ret,):
            n = x.size
            tot = self.count + n
            delta = x.mean() - self.mean
            self.mean += delta * n / tot
            self.m2 += np.sum((x - x.mean()) ** 2) + delta * delta * self.count * n / tot
            self.count = tot
        self.ret = np.where(dones, 0.0, self.ret)
        return rewards / self.std

    @property
    def std(self) -> float:
        return float(np.sqrt(self.m2 / max(self.count, 1)) + 1e-8) if self.count > 1 else 1.0


def normalize_advantages(adv, eps: float = 1e-8):
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / (adv.std() + eps)


def evaluate_policy(policy: nn.GaussianPolicy, cfg: ep.EnvConfig, n_envs: int, seed: int,
                    episodes: int = 1) -> dict:
    """Deterministic (mean-action) episodes; per-env RMSEs concatenated."""
    es, obs = ep.reset(n_envs, seed, cfg)
    acc = EpisodeAccumulator(n_envs)
    out = []
    while len(out) < episodes:
        a = nn.policy_mean_action(policy, obs.flat())
        es, obs, _, _, info = ep.env_step(es, np.asarray(a, dtype=np.float64))
        done = acc.push(info)
        if done is not None:
            out.append(done)
    return {k: np.concatenate([o[k] for o in out]) for k in out[0]}


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}
