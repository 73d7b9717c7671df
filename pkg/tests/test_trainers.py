import copy

import numpy as np
import pytest

from auvrl import envpool as ep
from auvrl import neural as nn
from auvrl import trainers as tr
from auvrl.trainers import droq, ppo, shac
from auvrl.trainers.common import TIMING_KEYS

from oracles import gae_bruteforce

SMALL_ENV = ep.EnvConfig(episode_len=64).reduced()


# --- advantage estimation ---------------------------------------------------------------

def test_gae_telescopes():
    adv, ret = tr.gae(np.array([[1.0], [1.0]]), np.zeros((2, 1)), np.zeros(1), gamma=1.0, lam=1.0)
    np.testing.assert_array_equal(adv[:, 0], [2.0, 1.0])
    np.testing.assert_array_equal(ret[:, 0], [2.0, 1.0])


def test_gae_lambda_zero_is_td_error():
    rng = np.random.default_rng(0)
    r, v, last = rng.normal(size=(6, 3)), rng.normal(size=(6, 3)), rng.normal(size=3)
    adv, _ = tr.gae(r, v, last, gamma=0.9, lam=0.0)
    nxt = np.concatenate([v[1:], last[None]])
    np.testing.assert_array_equal(adv, r + 0.9 * nxt - v)


def test_gae_matches_bruteforce():
    rng = np.random.default_rng(1)
    for _ in range(20):
        T = rng.integers(1, 30)
        r, v = rng.normal(size=T), rng.normal(size=T + 1)
        g, lam = rng.uniform(0.5, 1.0), rng.uniform(0.0, 1.0)
        adv, _ = tr.gae(r[:, None], v[:-1, None], v[-1:], gamma=g, lam=lam)
        np.testing.assert_allclose(adv[:, 0], gae_bruteforce(r, v, g, lam), atol=1e-10)


def test_gae_stops_at_episode_boundaries():
    r = np.ones((4, 1))
    d = np.array([[0.0], [1.0], [0.0], [0.0]])
    adv, _ = tr.gae(r, np.zeros((4, 1)), np.zeros(1), dones=d, gamma=1.0, lam=1.0)
    np.testing.assert_array_equal(adv[:, 0], [2.0, 1.0, 2.0, 1.0])


def test_td_lambda_one_is_window_return_plus_bootstrap():
    rng = np.random.default_rng(2)
    h, g = 7, 0.95
    r, nv = rng.normal(size=(h, 2)), rng.normal(size=(h, 2))
    got = tr.td_lambda_targets(r, nv, gamma=g, lam=1.0)
    for t in range(h):
        want = sum(g ** k * r[t + k] for k in range(h - t)) + g ** (h - t) * nv[-1]
        np.testing.assert_allclose(got[t], want, atol=1e-12)


def test_td_lambda_zero_is_one_step():
    rng = np.random.default_rng(3)
    r, nv = rng.normal(size=(5, 2)), rng.normal(size=(5, 2))
    np.testing.assert_allclose(tr.td_lambda_targets(r, nv, gamma=0.9, lam=0.0), r + 0.9 * nv, atol=1e-15)


def test_advantage_normalization():
    adv = np.random.default_rng(4).normal(3.0, 7.0, 5000)
    out = tr.normalize_advantages(adv)
    assert abs(out.mean()) < 1e-6
    assert abs(out.std() - 1.0) < 1e-6


# --- PPO -------------------------------------------------------------------------------

def test_clip_arithmetic():
    assert ppo.clipped_surrogate(1.5, 1.0, 0.2) == pytest.approx(1.2)
    assert ppo.clipped_surrogate(1.0, -0.7, 0.2) == -0.7
    assert ppo.clipped_surrogate(0.5, -1.0, 0.2) == pytest.approx(-0.8)


def ppo_batch(rng, n=96, zero_adv=False):
    pol = nn.init_policy(12, 6, (16, 16), rng)
    obs = rng.normal(size=(n, 12)).astype(np.float32)
    act, _ = nn.policy_sample(pol, obs, rng)
    logp = ppo.action_log_prob(pol, obs, act)
    adv = np.zeros(n) if zero_adv else tr.normalize_advantages(rng.normal(size=n))
    return pol, dict(obs=obs, act=act.astype(np.float64), logp=logp, adv=adv, ret=rng.normal(size=n))


def test_ratio_is_exactly_one_at_start():
    rng = np.random.default_rng(5)
    pol, batch = ppo_batch(rng)
    idx = rng.permutation(96)[:40]  # a minibatch of a different size than the rollout
    sub = {k: v[idx] for k, v in batch.items()}
    _, grads, stats = ppo.ppo_policy_loss(pol, sub, 0.2, 0.0)
    assert stats["ratio_mean"] == 1.0
    assert stats["approx_kl"] == 0.0
    assert stats["clip_frac"] == 0.0
    assert nn.global_norm(grads) > 0.0


def test_surrogate_equals_advantage_at_unit_ratio():
    rng = np.random.default_rng(6)
    pol, batch = ppo_batch(rng)
    loss, _, stats = ppo.ppo_policy_loss(pol, batch, 0.2, 0.0)
    assert loss == pytest.approx(-np.mean(batch["adv"]), abs=1e-15)


def test_zero_advantage_leaves_only_entropy():
    rng = np.random.default_rng(7)
    pol, batch = ppo_batch(rng, zero_adv=True)
    loss, grads, stats = ppo.ppo_policy_loss(pol, batch, 0.2, 1e-3)
    assert loss == pytest.approx(-1e-3 * stats["entropy"], rel=1e-12)
    for g in grads[:-1]:
        np.testing.assert_array_equal(g, 0.0)


def test_ppo_update_moves_parameters():
    rng = np.random.default_rng(8)
    pol, batch = ppo_batch(rng)
    vnet = nn.init_mlp([12, 16, 1], rng)
    cfg = ppo.PPOConfig()
    out = ppo.ppo_update(pol, vnet, nn.adam_init(pol.arrays()), nn.adam_init(vnet.arrays()), batch, cfg)
    assert any(not np.array_equal(a, b) for a, b in zip(pol.arrays(), out[0].arrays()))
    assert np.isfinite(out[4]["value_loss"])


def test_ppo_smoke():
    cfg = ppo.PPOConfig(n_envs=16, hidden=(32, 32), episodes=3, rollout_len=16)
    policy, vnet, log = ppo.train_ppo(cfg, SMALL_ENV)
    assert len(log.records) == 3
    assert all(np.isfinite(r["return"]) for r in log.records)
    assert log.records[-1]["env_steps"] == 3 * 64 * 16


# --- SHAC ------------------------------------------------------------------------------

def di_policy(seed):
    rng = np.random.default_rng(seed)
    pol = nn.init_policy(2, 1, (8,), rng, init_log_std=-1.0, dtype=np.float64)
    return pol.with_arrays([a + 0.3 * rng.normal(size=a.shape) for a in pol.arrays()])


def test_double_integrator_actor_gradient_matches_fd():
    pol = di_policy(0)
    vnet = nn.init_mlp([2, 8, 1], np.random.default_rng(1), dtype=np.float64)
    noise = np.random.default_rng(2).normal(size=(4, 5, 1))

    def loss(p):
        return shac.shac_actor_grad(p, vnet, shac.DoubleIntegratorEnv(5, 3), noise, 0.97)[0]

    _, grads, _ = shac.shac_actor_grad(pol, vnet, shac.DoubleIntegratorEnv(5, 3), noise, 0.97)
    flat = np.concatenate([g.ravel() for g in grads])
    arrays = pol.arrays()
    fd = []
    eps = 1e-6
    for i, a in enumerate(arrays):
        for j in range(a.size):
            vals = []
            for s in (1, -1):
                arrs = [x.copy() for x in arrays]
                arrs[i].ravel()[j] += s * eps
                vals.append(loss(pol.with_arrays(arrs)))
            fd.append((vals[0] - vals[1]) / (2 * eps))
    fd = np.array(fd)
    assert np.linalg.norm(flat - fd) / np.linalg.norm(fd) < 1e-4


def test_zero_reward_zero_value_gives_zero_gradient():
    cfg = SMALL_ENV
    cfg = ep.EnvConfig(episode_len=64, weights=ep.RewardWeights(w_pos=0, w_att=0, w_act=0, w_vel=0, w_act_mavg=0))
    rng = np.random.default_rng(4)
    pol = nn.init_policy(cfg.obs_dim, 6, (16,), rng, dtype=np.float64)
    vnet = nn.init_mlp([cfg.obs_dim, 16, 1], rng, dtype=np.float64)
    vnet = vnet.with_arrays([np.zeros_like(a) for a in vnet.arrays()])
    env = shac.TaskDiffEnv(8, 0, cfg)
    _, grads, _ = shac.shac_actor_grad(pol, vnet, env, rng.normal(size=(1, 8, 6)), 0.99)
    for g in grads:
        np.testing.assert_array_equal(g, 0.0)


def test_windows_are_detached():
    rng = np.random.default_rng(5)
    pol = nn.init_policy(SMALL_ENV.obs_dim, 6, (16,), rng, dtype=np.float64)
    vnet = nn.init_mlp([SMALL_ENV.obs_dim, 16, 1], rng, dtype=np.float64)
    n1, n2 = rng.normal(size=(2, 4, 8, 6))
    env = shac.TaskDiffEnv(8, 1, SMALL_ENV)
    shac.shac_actor_grad(pol, vnet, env, n1, 0.99)
    fresh = shac.TaskDiffEnv(8, 99, SMALL_ENV)
    fresh.es = copy.deepcopy(env.es)
    _, g_cont, _ = shac.shac_actor_grad(pol, vnet, env, n2, 0.99)
    _, g_fresh, _ = shac.shac_actor_grad(pol, vnet, fresh, n2, 0.99)
    for a, b in zip(g_cont, g_fresh):
        assert np.array_equal(a, b)


def test_critic_targets_lambda_one():
    rng = np.random.default_rng(6)
    vnet = nn.init_mlp([2, 8, 1], rng, dtype=np.float64)
    env = shac.DoubleIntegratorEnv(3, 0)
    res = env.rollout(di_policy(1), rng.normal(size=(5, 3, 1)), 0.9, record=False)
    got = shac.critic_targets(vnet, res, 0.9, 1.0)
    v_end = nn.mlp_forward(vnet, res.final_obs)[:, 0]
    for t in range(5):
        want = sum(0.9 ** k * res.rewards[t + k] for k in range(5 - t)) + 0.9 ** (5 - t) * v_end
        np.testing.assert_allclose(got[t], want, atol=1e-12)


def test_shac_smoke():
    cfg = shac.SHACConfig(n_envs=8, hidden=(16, 16), horizon=16, episodes=2, critic_iters=2)
    policy, vnet, log = shac.train_shac(cfg, SMALL_ENV)
    assert len(log.records) == 2
    assert all(np.isfinite(a).all() for a in policy.arrays())


# --- DroQ ------------------------------------------------------------------------------

def test_done_target_is_reward():
    y = droq.soft_target([1.5, -2.0], [1.0, 1.0], [[10.0, 3.0], [4.0, 5.0]], [0.3, 0.1], 0.2, 0.99)
    np.testing.assert_array_equal(y, [1.5, -2.0])


def test_target_formula_matches_reference():
    rng = np.random.default_rng(7)
    n = 50
    r, d = rng.normal(size=n), (rng.random(n) < 0.3).astype(float)
    q1, q2, q3, lp = rng.normal(size=(4, n))
    alpha, gamma = 0.17, 0.97
    got = droq.soft_target(r, d, [q1, q2, q3], lp, alpha, gamma)
    for i in range(n):
        want = r[i] + gamma * (1 - d[i]) * (min(q1[i], q2[i], q3[i]) - alpha * lp[i])
        assert abs(got[i] - want) < 1e-10


def test_min_of_equal_critics():
    q = np.random.default_rng(8).normal(size=9)
    y = droq.soft_target(np.zeros(9), np.zeros(9), [q, q.copy()], np.zeros(9), 0.0, 1.0)
    np.testing.assert_array_equal(y, q)


def test_replay_fifo_eviction():
    buf = tr.ReplayBuffer(4, 1, 1)
    for k in range(5):
        buf.add([[k]], [[0.0]], [0.0], [[k]], [0.0])
    assert buf.size == 4
    assert buf.oldest()[0] == 1.0
    assert sorted(buf.obs[:, 0].tolist()) == [1.0, 2.0, 3.0, 4.0]


def test_replay_batch_has_no_repeats():
    buf = tr.ReplayBuffer(100, 1, 1)
    buf.add(np.arange(100.0)[:, None], np.zeros((100, 1)), np.zeros(100), np.zeros((100, 1)), np.zeros(100))
    b = buf.sample(np.random.default_rng(0), 64)
    assert len(set(b["obs"][:, 0].tolist())) == 64


def test_polyak_contracts_distance():
    rng = np.random.default_rng(9)
    online = nn.init_mlp([4, 8, 1], rng, layer_norm=True, dtype=np.float64)
    target = online.with_arrays([a + rng.normal(size=a.shape) for a in online.arrays()])

    def dist(t):
        return np.sqrt(sum(np.sum((x - y) ** 2) for x, y in zip(t.arrays(), online.arrays())))

    d0 = dist(target)
    for k in range(1, 4):
        target = droq.polyak_update(target, online, 0.05)
        assert dist(target) == pytest.approx(0.95 ** k * d0, rel=1e-12)


def test_droq_smoke():
    cfg = droq.DroQConfig(n_envs=8, hidden=(16, 16), episodes=1, utd=2, batch_size=32, replay_size=2000,
                          warmup_steps=4)
    st, log = droq.train_droq(cfg, SMALL_ENV)
    assert len(log.records) == 1
    assert np.isfinite(st.alpha)


# --- bookkeeping -----------------------------------------------------------------------

def recs(pairs):
    return [{"episode": i + 1, "wall_s": float(i + 1), "rmse_pos_m": p, "rmse_att_deg": a}
            for i, (p, a) in enumerate(pairs)]


def test_convergence_time_examples():
    assert tr.convergence_time(recs([(0.1, 1.0)] * 5)) == 1.0
    assert tr.convergence_time(recs([(0.1, 1.0)] * 4 + [(0.3, 1.0)])) is None
    log = [(0.5, 20.0)] * 39 + [(0.1, 5.0)] * 61
    log[69] = (0.1, 16.0)
    assert tr.convergence_time(recs(log), key="episode") == 71


def test_convergence_stop_needs_a_streak():
    stop = tr.ConvergenceStop(streak=3)
    seq = [(0.1, 1), (0.1, 1), (0.4, 1), (0.1, 1), (0.1, 1), (0.1, 1)]
    assert [stop({"rmse_pos_m": p, "rmse_att_deg": a}) for p, a in seq] == [False] * 5 + [True]


def test_trainer_config_rejects_unknown_fields():
    with pytest.raises(ValueError):
        tr.trainer_config("ppo", {"horizon": 4})
    with pytest.raises(ValueError):
        tr.trainer_config("a2c")


@pytest.mark.parametrize("algo,over", [
    ("ppo", dict(n_envs=8, hidden=(16,), episodes=2, rollout_len=16)),
    ("shac", dict(n_envs=8, hidden=(16,), episodes=2, horizon=16, critic_iters=1)),
    ("droq", dict(n_envs=8, hidden=(16,), episodes=1, utd=1, batch_size=16, replay_size=500, warmup_steps=2)),
])
def test_training_is_deterministic(algo, over, tmp_path):
    logs = []
    for k in range(2):
        policy, log = tr.train(algo, over, SMALL_ENV)
        path = tmp_path / f"{k}.jsonl"
        log.write_jsonl(path)
        logs.append((path.read_bytes(), [a.copy() for a in policy.arrays()]))
    assert logs[0][0] == logs[1][0]
    assert all(np.array_equal(a, b) for a, b in zip(logs[0][1], logs[1][1]))
    assert not any(k in logs[0][0].decode() for k in TIMING_KEYS)


def test_early_stop_hook():
    seen = []
    _, log = tr.train("ppo", dict(n_envs=8, hidden=(16,), episodes=5, rollout_len=16), SMALL_ENV,
                      on_episode=lambda rec, pol: seen.append(rec) or len(seen) >= 2)
    assert len(log.records) == 2


def test_evaluate_policy_reports_every_env():
    pol = nn.init_policy(12, 6, (16,), np.random.default_rng(0))
    out = tr.evaluate_policy(pol, SMALL_ENV, 6, 3, episodes=2)
    assert out["rmse_pos"].shape == (12,)
