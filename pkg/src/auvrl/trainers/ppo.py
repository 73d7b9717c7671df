"""Proximal policy optimization on the batched task."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import envpool as ep
from .. import neural as nn
from .common import EpisodeAccumulator, RewardScaler, TrainLog, gae, normalize_advantages


@dataclass(frozen=True)
class PPOConfig:
    n_envs: int = 1024
    seed: int = 0
    hidden: tuple = (256, 256)
    rollout_len: int = 32
    epochs: int = 5
    minibatches: int = 4
    lr: float = 3e-4
    value_lr: float = 1e-3
    gamma: float = 0.99
    lam: float = 0.95
    clip: float = 0.2
    entropy_coef: float = 1e-3
    max_grad_norm: float = 1.0
    desired_kl: float = 0.01  # adaptive learning rate; 0 disables
    lr_max: float = 1e-3
    init_log_std: float = -0.5
    scale_rewards: bool = True
    episodes: int = 100
    max_wall_s: float = 0.0  # 0 = no limit


def clipped_surrogate(ratio, adv, clip: float):
    """Per-sample PPO objective ``min(r A, clip(r) A)`` (to be maximized)."""
    ratio = np.asarray(ratio, dtype=np.float64)
    adv = np.asarray(adv, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv)


def ppo_policy_loss(policy: nn.GaussianPolicy, batch: dict, clip: float, entropy_coef: float):
    """Clipped surrogate loss, its parameter gradients and diagnostics."""
    obs, act, adv = batch["obs"], batch["act"], batch["adv"]
    mean, log_std, cache = nn.policy_dist(policy, obs, cache=True)
    mean = mean.astype(np.float64)
    log_std = log_std.astype(np.float64)
    B = obs.shape[0]
    logp = nn.gaussian_log_prob(np.asarray(act, dtype=np.float64), mean, log_std)
    log_ratio = logp - batch["logp"]
    ratio = np.exp(log_ratio)
    surr = clipped_surrogate(ratio, adv, clip)
    entropy = np.sum(log_std, axis=-1) + 0.5 * log_std.shape[-1] * (1.0 + nn.LOG_2PI)
    loss = -np.mean(surr) - entropy_coef * np.mean(entropy)
    unclipped = ratio * adv <= np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv
    g_logp = np.where(unclipped, -adv / B, 0.0) * ratio
    sigma = np.exp(log_std)
    z = (act - mean) / sigma
    g_mean = g_logp[:, None] * z / sigma
    g_log_std = g_logp[:, None] * (z * z - 1.0) - entropy_coef / B
    grads = nn.policy_dist_backward(policy, cache, g_mean.astype(mean.dtype), g_log_std)
    stats = {
        "policy_loss": float(loss),
        "ratio_mean": float(np.mean(ratio)),
        "approx_kl": float(np.mean((ratio - 1.0) - log_ratio)),
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > clip)),
        "entropy": float(np.mean(entropy)),
    }
    return loss, grads, stats


def action_log_prob(policy: nn.GaussianPolicy, obs, act):
    """Log-density in float64, computed exactly as the surrogate loss recomputes it."""
    mean, log_std = nn.policy_dist(policy, obs)
    return nn.gaussian_log_prob(np.asarray(act, dtype=np.float64), mean.astype(np.float64),
                                log_std.astype(np.float64))


def value_loss(vnet: nn.MlpParams, obs, returns):
    v, cache = nn.mlp_forward(vnet, obs, cache=True)
    v = v[:, 0].astype(np.float64)
    err = v - returns
    grads, _ = nn.mlp_backward(vnet, cache, (err / len(err))[:, None])
    return 0.5 * float(np.mean(err * err)), grads


def ppo_update(policy, vnet, pi_opt: nn.AdamState, v_opt: nn.AdamState, batch: dict, cfg: PPOConfig):
    """One minibatch step on both networks. Returns ``(policy, vnet, pi_opt, v_opt, stats)``."""
    loss, g_pi, stats = ppo_policy_loss(policy, batch, cfg.clip, cfg.entropy_coef)
    g_pi, _ = nn.clip_by_global_norm(g_pi, cfg.max_grad_norm)
    pi_opt, arrs = nn.adam_update(pi_opt, policy.arrays(), g_pi)
    policy = policy.with_arrays(arrs)
    vl, g_v = value_loss(vnet, batch["obs"], batch["ret"])
    g_v, _ = nn.clip_by_global_norm(g_v, cfg.max_grad_norm)
    v_opt, varrs = nn.adam_update(v_opt, vnet.arrays(), g_v)
    stats["value_loss"] = vl
    return policy, vnet.with_arrays(varrs), pi_opt, v_opt, stats


def init_ppo(obs_dim: int, cfg: PPOConfig):
    rng = np.random.default_rng(cfg.seed)
    policy = nn.init_policy(obs_dim, 6, cfg.hidden, rng, init_log_std=cfg.init_log_std)
    vnet = nn.init_mlp([obs_dim, *cfg.hidden, 1], rng, final_scale=1.0)
    return policy, vnet


def _values(vnet, obs):
    return nn.mlp_forward(vnet, obs)[:, 0].astype(np.float64)


def train_ppo(cfg: PPOConfig, env_cfg: ep.EnvConfig, on_episode=None):
    """Train until ``cfg.episodes`` rounds of episodes have completed.

    Returns ``(policy, value_net, TrainLog)``. ``on_episode(record, policy)``
    is called after each logged round; a truthy return stops training.
    """
    policy, vnet = init_ppo(env_cfg.obs_dim, cfg)
    pi_opt = nn.adam_init(policy.arrays(), lr=cfg.lr)
    v_opt = nn.adam_init(vnet.arrays(), lr=cfg.value_lr)
    rng = np.random.default_rng(cfg.seed + 1)
    es, obs = ep.reset(cfg.n_envs, cfg.seed, env_cfg)
    x = obs.flat()
    log = TrainLog("ppo")
    acc = EpisodeAccumulator(cfg.n_envs)
    env_steps = 0
    T, N = cfg.rollout_len, cfg.n_envs
    last_stats = {}
    scaler = RewardScaler(N, cfg.gamma) if cfg.scale_rewards else None
    while len(log.records) < cfg.episodes:
        if cfg.max_wall_s and log.elapsed() > cfg.max_wall_s:
            break
        buf_obs = np.zeros((T, N, env_cfg.obs_dim), np.float32)
        buf_act = np.zeros((T, N, 6))
        buf_logp = np.zeros((T, N))
        buf_rew = np.zeros((T, N))
        buf_val = np.zeros((T, N))
        buf_next = np.zeros((T, N))
        buf_done = np.zeros((T, N))
        buf_term = np.zeros((T, N))
        for t in range(T):
            act, _ = nn.policy_sample(policy, x, rng)
            buf_obs[t] = x
            buf_act[t] = act
            # same arithmetic as the loss, so the first ratio of every update is exactly 1
            buf_logp[t] = action_log_prob(policy, buf_obs[t], buf_act[t])
            buf_val[t] = _values(vnet, x)
            es, obs, r, dones, info = ep.env_step(es, act.astype(np.float64))
            env_steps += N
            x = obs.flat()
            nv = _values(vnet, x)
            if np.any(dones):
                nv[dones] = _values(vnet, info["final_obs"][dones])
            buf_rew[t] = scaler(r, dones) if scaler is not None else r
            buf_next[t] = nv
            buf_done[t] = dones
            buf_term[t] = info["poisoned"]
            ep_done = acc.push(info)
            if ep_done is not None:
                rec = log.add(ep_done, env_steps, **{k: last_stats.get(k, 0.0) for k in ("approx_kl", "lr")})
                if on_episode is not None and on_episode(rec, policy):
                    return policy, vnet, log
        adv, ret = gae(buf_rew, buf_val, None, buf_done, cfg.gamma, cfg.lam,
                       next_values=buf_next, terminated=buf_term)
        flat = dict(obs=buf_obs.reshape(T * N, -1), act=buf_act.reshape(T * N, 6),
                    logp=buf_logp.reshape(-1), adv=adv.reshape(-1), ret=ret.reshape(-1))
        mb = (T * N) // cfg.minibatches
        for _ in range(cfg.epochs):
            perm = rng.permutation(T * N)
            for k in range(cfg.minibatches):
                idx = perm[k * mb:(k + 1) * mb]
                batch = {key: val[idx] for key, val in flat.items()}
                batch["adv"] = normalize_advantages(batch["adv"])
                policy, vnet, pi_opt, v_opt, st = ppo_update(policy, vnet, pi_opt, v_opt, batch, cfg)
                if cfg.desired_kl > 0:
                    kl = st["approx_kl"]
                    if kl > 2.0 * cfg.desired_kl:
                        pi_opt.lr = max(pi_opt.lr / 1.5, 1e-5)
                    elif kl < 0.5 * cfg.desired_kl:
                        pi_opt.lr = min(pi_opt.lr * 1.5, cfg.lr_max)
                last_stats = dict(st, lr=pi_opt.lr)
    return policy, vnet, log
