"""Off-policy soft actor-critic with a small dropout + layer-norm critic ensemble."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .. import envpool as ep
from .. import neural as nn
from .common import EpisodeAccumulator, ReplayBuffer, TrainLog


@dataclass(frozen=True)
class DroQConfig:
    n_envs: int = 512
    seed: int = 0
    hidden: tuple = (256, 256)
    n_critics: int = 2
    dropout: float = 0.01
    utd: int = 20  # gradient updates per batched env step
    batch_size: int = 256
    replay_size: int = 1_000_000
    polyak: float = 0.005  # target <- (1 - polyak) target + polyak online
    gamma: float = 0.99
    lr: float = 3e-4
    critic_lr: float = 3e-4
    alpha_lr: float = 3e-4
    init_alpha: float = 0.1
    target_entropy: float = -6.0
    warmup_steps: int = 10  # batched env steps with uniform random actions
    episodes: int = 20
    max_wall_s: float = 0.0


@dataclass
class DroQState:
    policy: nn.GaussianPolicy
    critics: list
    targets: list
    log_alpha: float
    pi_opt: nn.AdamState
    q_opts: list
    a_opt: nn.AdamState

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))


def init_droq(obs_dim: int, cfg: DroQConfig, act_dim: int = 6) -> DroQState:
    rng = np.random.default_rng(cfg.seed)
    pol = nn.init_policy(obs_dim, act_dim, cfg.hidden, rng, state_dependent_std=True)
    critics = [nn.init_mlp([obs_dim + act_dim, *cfg.hidden, 1], rng, final_scale=1.0, layer_norm=True)
               for _ in range(cfg.n_critics)]
    targets = [c.copy() for c in critics]
    la = float(np.log(cfg.init_alpha))
    return DroQState(pol, critics, targets, la, nn.adam_init(pol.arrays(), cfg.lr),
                     [nn.adam_init(c.arrays(), cfg.critic_lr) for c in critics],
                     nn.adam_init([np.array([la])], cfg.alpha_lr))


def soft_target(rew, done, q_next, logp_next, alpha: float, gamma: float):
    """``r + gamma (1 - done) (min_i Q_i(s', a') - alpha log pi(a'|s'))``.

    ``q_next`` is a list (or leading-axis array) of target-critic values.
    """
    q_min = np.min(np.stack([np.asarray(q, dtype=np.float64) for q in q_next]), axis=0)
    rew = np.asarray(rew, dtype=np.float64)
    done = np.asarray(done, dtype=np.float64)
    return rew + gamma * (1.0 - done) * (q_min - alpha * np.asarray(logp_next, dtype=np.float64))


def polyak_update(target: nn.MlpParams, online: nn.MlpParams, tau: float) -> nn.MlpParams:
    return target.with_arrays([(1.0 - tau) * t + tau * o for t, o in zip(target.arrays(), online.arrays())])


def _sample_squashed(pol, obs, rng, cache=False):
    mean, log_std, c = nn.policy_dist(pol, obs, cache=True)
    eps = rng.standard_normal(mean.shape).astype(mean.dtype)
    sigma = np.exp(log_std)
    u = mean + sigma * eps
    a = nn.squash(u)
    logp = nn.gaussian_log_prob(u, mean, log_std) - np.sum(nn.log1m_tanh_sq(u), axis=-1)
    if cache:
        return a, logp, (c, eps, sigma, u)
    return a, logp


def _q(net, obs, act, rng, dropout, cache=False):
    x = np.concatenate([obs, act.astype(obs.dtype)], axis=-1)
    return nn.mlp_forward(net, x, rng=rng, dropout=dropout, cache=cache)


def droq_critic_update(st: DroQState, batch: dict, cfg: DroQConfig, rng) -> tuple:
    """One step on every critic plus the target update. Returns ``(state, loss)``."""
    a_next, logp_next = _sample_squashed(st.policy, batch["next_obs"], rng)
    q_next = [_q(t, batch["next_obs"], a_next, rng, cfg.dropout)[:, 0] for t in st.targets]
    y = soft_target(batch["rew"], batch["done"], q_next, logp_next, st.alpha, cfg.gamma)
    critics, opts, targets = [], [], []
    loss = 0.0
    B = len(y)
    for net, opt, tgt in zip(st.critics, st.q_opts, st.targets):
        q, cache = _q(net, batch["obs"], batch["act"], rng, cfg.dropout, cache=True)
        err = q[:, 0].astype(np.float64) - y
        grads, _ = nn.mlp_backward(net, cache, (err / B)[:, None])
        opt, arrs = nn.adam_update(opt, net.arrays(), grads)
        net = net.with_arrays(arrs)
        critics.append(net)
        opts.append(opt)
        targets.append(polyak_update(tgt, net, cfg.polyak))
        loss += 0.5 * float(np.mean(err * err))
    return replace(st, critics=critics, q_opts=opts, targets=targets), loss


def droq_actor_update(st: DroQState, batch: dict, cfg: DroQConfig, rng) -> tuple:
    """Reparameterized actor step and temperature step. Returns ``(state, stats)``."""
    obs = batch["obs"]
    pol = st.policy
    a, logp, (pc, eps, sigma, u) = _sample_squashed(pol, obs, rng, cache=True)
    qs, caches = [], []
    for net in st.critics:
        q, c = _q(net, obs, a, rng, cfg.dropout, cache=True)
        qs.append(q[:, 0].astype(np.float64))
        caches.append(c)
    qs = np.stack(qs)
    pick = np.argmin(qs, axis=0)
    B = obs.shape[0]
    alpha = st.alpha
    loss = float(np.mean(alpha * logp - qs[pick, np.arange(B)]))
    g_a = np.zeros(a.shape)
    d = a.shape[1]
    for i, (net, c) in enumerate(zip(st.critics, caches)):
        sel = (pick == i).astype(np.float64)
        if not sel.any():
            continue
        _, gx = nn.mlp_backward(net, c, (-sel / B)[:, None])
        g_a += gx[:, -d:]
    u64 = u.astype(np.float64)
    th = np.tanh(u64)
    g_u = g_a * (1.0 - th * th) + alpha * 2.0 * th / B
    g_mean = g_u
    g_log_std = g_u * sigma * eps - alpha / B
    grads = nn.policy_dist_backward(pol, pc, g_mean.astype(pol.net.dtype), g_log_std.astype(pol.net.dtype))
    pi_opt, arrs = nn.adam_update(st.pi_opt, pol.arrays(), grads)
    g_la = -float(np.mean(logp + cfg.target_entropy)) * alpha
    a_opt, (la,) = nn.adam_update(st.a_opt, [np.array([st.log_alpha])], [np.array([g_la])])
    st = replace(st, policy=pol.with_arrays(arrs), pi_opt=pi_opt, a_opt=a_opt, log_alpha=float(la[0]))
    return st, {"actor_loss": loss, "alpha": alpha, "entropy": -float(np.mean(logp))}


def droq_update(st: DroQState, buffer: ReplayBuffer, cfg: DroQConfig, rng) -> tuple:
    """``cfg.utd`` critic steps then one actor/temperature step."""
    qloss = 0.0
    for _ in range(cfg.utd):
        st, qloss = droq_critic_update(st, buffer.sample(rng, cfg.batch_size), cfg, rng)
    st, stats = droq_actor_update(st, buffer.sample(rng, cfg.batch_size), cfg, rng)
    stats["critic_loss"] = qloss
    return st, stats


def train_droq(cfg: DroQConfig, env_cfg: ep.EnvConfig, on_episode=None):
    """Returns ``(DroQState, TrainLog)``."""
    st = init_droq(env_cfg.obs_dim, cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    es, obs = ep.reset(cfg.n_envs, cfg.seed, env_cfg)
    x = obs.flat()
    buf = ReplayBuffer(cfg.replay_size, env_cfg.obs_dim, 6)
    log = TrainLog("droq")
    acc = EpisodeAccumulator(cfg.n_envs)
    env_steps = 0
    step = 0
    stats = {}
    while len(log.records) < cfg.episodes:
        if cfg.max_wall_s and log.elapsed() > cfg.max_wall_s:
            break
        if step < cfg.warmup_steps:
            act = rng.uniform(-1.0, 1.0, (cfg.n_envs, 6))
        else:
            act, _ = _sample_squashed(st.policy, x.astype(np.float32), rng)
            act = act.astype(np.float64)
        es, obs, r, dones, info = ep.env_step(es, act)
        nxt = obs.flat()
        real_next = nxt.copy()
        if np.any(dones):
            real_next[dones] = info["final_obs"][dones]
        # time-limit ends bootstrap; only poisoned states are terminal
        buf.add(x, act, r, real_next, info["poisoned"])
        x = nxt
        step += 1
        env_steps += cfg.n_envs
        if step >= cfg.warmup_steps:
            st, stats = droq_update(st, buf, cfg, rng)
        done = acc.push(info)
        if done is not None:
            rec = log.add(done, env_steps, **{k: stats.get(k, 0.0) for k in ("alpha", "critic_loss")})
            if on_episode is not None and on_episode(rec, st.policy):
                return st, log
    return st, log
