"""Short-horizon actor-critic: policy gradients through the simulator.

The actor loss is the negated, discounted short-horizon return plus a learned
terminal value, differentiated analytically through the recorded rollout.
The critic regresses TD(lambda) targets collected along the same windows.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import adjoint as adj
from .. import envpool as ep
from .. import neural as nn
from .common import EpisodeAccumulator, TrainLog, td_lambda_targets


@dataclass(frozen=True)
class SHACConfig:
    n_envs: int = 512
    seed: int = 0
    hidden: tuple = (256, 256)
    horizon: int = 32
    lr: float = 2e-3
    lr_final: float = 2e-4  # linear decay over the run
    critic_lr: float = 1e-3
    critic_iters: int = 8
    critic_minibatches: int = 4
    gamma: float = 0.99
    lam: float = 0.95
    max_grad_norm: float = 1.0
    init_log_std: float = -1.0
    betas: tuple = (0.7, 0.95)
    episodes: int = 100
    max_wall_s: float = 0.0


class TaskDiffEnv:
    """The batched task behind the rollout interface SHAC needs."""

    def __init__(self, n_envs: int, seed: int, cfg: ep.EnvConfig):
        self.cfg = cfg
        self.es, _ = ep.reset(n_envs, seed, cfg)
        self.obs_dim = cfg.obs_dim
        self.n = n_envs

    def rollout(self, policy, noise, gamma, record=True):
        res = adj.rollout(policy, self.es, noise, gamma, record=record)
        self.es = res.es
        return res

    @staticmethod
    def backprop(tape, terminal_cotangent, reward_scale):
        # the moving average of past actions stays a constant for the actor
        return adj.backprop_rollout(tape, terminal_cotangent, reward_scale, through_history=False).policy


@dataclass
class _DITape:
    policy: object
    caches: list
    xs: list
    vs: list
    raws: list
    noise: np.ndarray
    gamma: float
    dt: float
    sigma: np.ndarray
    raw_log_std: np.ndarray


@dataclass
class _DIResult:
    rewards: np.ndarray
    obs: np.ndarray
    final_obs: np.ndarray
    dones: np.ndarray
    infos: list
    tape: _DITape | None


class DoubleIntegratorEnv:
    """1-D double integrator ``x'' = a`` with reward ``-(x^2 + 0.1 a^2)``.

    A small reference environment with its own hand-written adjoint, used to
    check the actor gradient independently of the vehicle simulator.
    """

    obs_dim = 2

    def __init__(self, n_envs: int, seed: int, dt: float = 0.1):
        rng = np.random.default_rng(seed)
        self.x = rng.uniform(-1, 1, n_envs)
        self.v = rng.uniform(-0.5, 0.5, n_envs)
        self.dt = dt
        self.n = n_envs

    def rollout(self, policy, noise, gamma, record=True):
        x, v = self.x, self.v
        sigma = np.exp(np.clip(np.asarray(policy.log_std, float), nn.LOG_STD_MIN, nn.LOG_STD_MAX))
        caches, xs, vs, raws, rewards, obs = [], [], [], [], [], []
        for t in range(noise.shape[0]):
            o = np.stack([x, v], axis=-1)
            out, c = nn.mlp_forward(policy.net, o, cache=True)
            raw = np.asarray(out[:, 0], float) + sigma[0] * noise[t, :, 0]
            xs.append(x)
            vs.append(v)
            caches.append(c)
            raws.append(raw)
            obs.append(o)
            v = v + self.dt * raw
            x = x + self.dt * v
            rewards.append(-(x * x + 0.1 * raw * raw))
        self.x, self.v = x, v
        tape = _DITape(policy, caches, xs, vs, raws, noise, gamma, self.dt, sigma,
                       np.asarray(policy.log_std, float)) if record else None
        h = noise.shape[0]
        return _DIResult(np.array(rewards), np.array(obs), np.stack([x, v], -1),
                         np.zeros((h, self.n), bool), [{} for _ in range(h)], tape)

    @staticmethod
    def backprop(tape: _DITape, terminal_cotangent, reward_scale):
        pol = tape.policy
        dt = tape.dt
        gx = terminal_cotangent[:, 0].astype(float).copy()
        gv = terminal_cotangent[:, 1].astype(float).copy()
        grads = [np.zeros(a.shape) for a in pol.arrays()]
        for t in reversed(range(len(tape.raws))):
            raw = tape.raws[t]
            g_r = reward_scale * tape.gamma ** t
            x1 = tape.xs[t] + dt * (tape.vs[t] + dt * raw)
            gx = gx - 2.0 * x1 * g_r
            g_raw = -0.2 * raw * g_r
            # x1 = x0 + dt v1, v1 = v0 + dt raw
            gv1 = gv + dt * gx
            g_raw = g_raw + dt * gv1
            gp, g_obs = nn.mlp_backward(pol.net, tape.caches[t], g_raw[:, None])
            live = (tape.raw_log_std >= nn.LOG_STD_MIN) & (tape.raw_log_std <= nn.LOG_STD_MAX)
            g_ls = np.array([np.sum(g_raw * tape.sigma[0] * tape.noise[t, :, 0])]) * live
            for i, g in enumerate(gp + [g_ls]):
                grads[i] += g
            gx = gx + g_obs[:, 0]
            gv = gv1 + g_obs[:, 1]
        return grads


def value_and_obs_grad(vnet: nn.MlpParams, obs):
    """``V(obs)`` and ``dV/dobs`` row by row."""
    v, cache = nn.mlp_forward(vnet, obs, cache=True)
    _, gx = nn.mlp_backward(vnet, cache, np.ones_like(v))
    return v[:, 0].astype(np.float64), np.asarray(gx, dtype=np.float64)


def shac_actor_grad(policy, vnet, env, noise, gamma: float):
    """Loss ``-(sum_t gamma^t r_t + gamma^h V(s_h)) / (N h)`` and its policy gradient.

    Advances ``env`` by ``len(noise)`` steps. Returns ``(loss, grads, rollout)``.
    """
    h, n = noise.shape[0], noise.shape[1]
    res = env.rollout(policy, noise, gamma, record=True)
    v_end, dv = value_and_obs_grad(vnet, res.final_obs)
    scale = -1.0 / (n * h)
    disc = gamma ** np.arange(h)
    loss = scale * (np.sum(disc[:, None] * res.rewards) + gamma ** h * np.sum(v_end))
    grads = env.backprop(res.tape, scale * gamma ** h * dv, scale)
    return float(loss), grads, res


def shac_update(policy, vnet, pi_opt: nn.AdamState, env, noise, cfg: SHACConfig):
    """One actor step. Returns ``(policy, pi_opt, rollout, stats)``."""
    loss, grads, res = shac_actor_grad(policy, vnet, env, noise, cfg.gamma)
    grads = [np.nan_to_num(np.asarray(g, dtype=np.float64), nan=0.0, posinf=0.0, neginf=0.0)
             for g in grads]
    grads, norm = nn.clip_by_global_norm(grads, cfg.max_grad_norm)
    grads = [g.astype(a.dtype) for g, a in zip(grads, policy.arrays())]
    pi_opt, arrs = nn.adam_update(pi_opt, policy.arrays(), grads)
    return policy.with_arrays(arrs), pi_opt, res, {"actor_loss": loss, "grad_norm": norm}


def critic_targets(vnet, res, gamma: float, lam: float):
    """TD(lambda) targets for the observations visited by a rollout window."""
    h, n = res.rewards.shape
    nv = np.zeros((h, n))
    for t in range(h):
        nxt = res.obs[t + 1] if t + 1 < h else res.final_obs
        if t + 1 < h and np.any(res.dones[t]):
            nxt = np.array(nxt, copy=True)
            nxt[res.dones[t]] = res.infos[t]["final_obs"][res.dones[t]]
        nv[t] = nn.mlp_forward(vnet, nxt)[:, 0]
    term = np.array([i.get("poisoned", np.zeros(n, bool)) for i in res.infos], dtype=float)
    return td_lambda_targets(res.rewards, nv, res.dones, gamma, lam, terminated=term)


def critic_update(vnet, v_opt, obs, targets, cfg: SHACConfig, rng):
    obs = obs.reshape(-1, obs.shape[-1])
    targets = targets.reshape(-1)
    mb = max(1, len(targets) // cfg.critic_minibatches)
    loss = 0.0
    for _ in range(cfg.critic_iters):
        perm = rng.permutation(len(targets))
        for k in range(cfg.critic_minibatches):
            idx = perm[k * mb:(k + 1) * mb]
            v, cache = nn.mlp_forward(vnet, obs[idx], cache=True)
            err = v[:, 0].astype(np.float64) - targets[idx]
            grads, _ = nn.mlp_backward(vnet, cache, (err / len(idx))[:, None])
            grads, _ = nn.clip_by_global_norm(grads, cfg.max_grad_norm)
            v_opt, arrs = nn.adam_update(v_opt, vnet.arrays(), grads)
            vnet = vnet.with_arrays(arrs)
            loss = 0.5 * float(np.mean(err * err))
    return vnet, v_opt, loss


def init_shac(obs_dim: int, cfg: SHACConfig):
    rng = np.random.default_rng(cfg.seed)
    policy = nn.init_policy(obs_dim, 6, cfg.hidden, rng, init_log_std=cfg.init_log_std)
    vnet = nn.init_mlp([obs_dim, *cfg.hidden, 1], rng, final_scale=1.0)
    return policy, vnet


def train_shac(cfg: SHACConfig, env_cfg: ep.EnvConfig, on_episode=None):
    """Returns ``(policy, value_net, TrainLog)``."""
    policy, vnet = init_shac(env_cfg.obs_dim, cfg)
    b1, b2 = cfg.betas
    pi_opt = nn.adam_init(policy.arrays(), lr=cfg.lr, beta1=b1, beta2=b2)
    v_opt = nn.adam_init(vnet.arrays(), lr=cfg.critic_lr, beta1=b1, beta2=b2)
    rng = np.random.default_rng(cfg.seed + 1)
    env = TaskDiffEnv(cfg.n_envs, cfg.seed, env_cfg)
    log = TrainLog("shac")
    acc = EpisodeAccumulator(cfg.n_envs)
    env_steps = 0
    windows_per_episode = -(-env_cfg.episode_len // cfg.horizon)
    total_windows = max(1, cfg.episodes * windows_per_episode)
    it = 0
    while len(log.records) < cfg.episodes:
        if cfg.max_wall_s and log.elapsed() > cfg.max_wall_s:
            break
        frac = min(it / total_windows, 1.0)
        pi_opt.lr = cfg.lr + frac * (cfg.lr_final - cfg.lr)
        noise = rng.standard_normal((cfg.horizon, cfg.n_envs, 6))
        policy, pi_opt, res, stats = shac_update(policy, vnet, pi_opt, env, noise, cfg)
        targets = critic_targets(vnet, res, cfg.gamma, cfg.lam)
        vnet, v_opt, vloss = critic_update(vnet, v_opt, res.obs, targets, cfg, rng)
        it += 1
        for info in res.infos:
            env_steps += cfg.n_envs
            done = acc.push(info)
            if done is not None:
                rec = log.add(done, env_steps, actor_loss=stats["actor_loss"], value_loss=vloss)
                if on_episode is not None and on_episode(rec, policy):
                    return policy, vnet, log
    return policy, vnet, log
