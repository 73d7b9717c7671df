"""Finite-difference checks of every hand-written VJP and of full rollouts.

Each check builds the Jacobian twice, once column by column with central
differences of the forward function and once row by row from the VJP, and
reports the relative Frobenius error.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import adjoint as adj
from . import envpool as ep
from . import hydrodyn as hd
from . import neural as nn
from . import so3

FD_EPS = 1e-6
PRIMITIVE_TOL = 1e-6
ROLLOUT_TOL = 1e-4
DOT_TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    seed: int
    rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.rel_err) and self.rel_err < self.tol)


def _flat(out):
    if isinstance(out, (tuple, list)):
        return np.concatenate([np.ravel(o) for o in out])
    return np.ravel(out)


def fd_jacobian(f, inputs: dict, wrt, eps=FD_EPS):
    """Central-difference Jacobian of ``_flat(f(**inputs))`` w.r.t. the named inputs."""
    cols = []
    for name in wrt:
        x = np.asarray(inputs[name], dtype=float)
        for i in range(x.size):
            d = np.zeros(x.size)
            d[i] = eps
            hi = dict(inputs, **{name: x + d.reshape(x.shape)})
            lo = dict(inputs, **{name: x - d.reshape(x.shape)})
            cols.append((_flat(f(**hi)) - _flat(f(**lo))) / (2.0 * eps))
    return np.stack(cols, axis=1)


def vjp_jacobian(f, vjp, inputs: dict, wrt):
    """Jacobian assembled from VJPs against unit output cotangents.

    ``vjp(inputs, cot)`` gets the cotangent shaped like ``f``'s output and
    returns a dict of input cotangents.
    """
    out = f(**inputs)
    parts = out if isinstance(out, (tuple, list)) else [out]
    sizes = [np.size(p) for p in parts]
    rows = []
    for k in range(sum(sizes)):
        e = np.zeros(sum(sizes))
        e[k] = 1.0
        cots, off = [], 0
        for p, s in zip(parts, sizes):
            cots.append(e[off:off + s].reshape(np.shape(p)))
            off += s
        g = vjp(inputs, tuple(cots) if isinstance(out, (tuple, list)) else cots[0])
        rows.append(np.concatenate([np.ravel(np.asarray(g[n], dtype=float)) for n in wrt]))
    return np.stack(rows, axis=0)


def relative_error(a, b) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


# ---------------------------------------------------------------------------
# primitive catalogue: (forward, vjp, sampler, wrt)


def _sample_unit(rng):
    return so3.random_quat(rng, (1,))


def _error_pair(rng):
    # keep the relative rotation away from pi, where the sign flip is discontinuous
    while True:
        qr, qm = _sample_unit(rng), _sample_unit(rng)
        if abs(so3.qmul_raw(so3.conj(qm), qr)[0, 0]) > 1e-3:
            return qr, qm


_PARAMS = hd.VehicleParams()


def _step_fwd(p, q, v, w, force, torque, g_eff, dt):
    return hd.step_arrays(p, q, v, w, force, torque, g_eff, _PARAMS, dt)


def _step_vjp(x, g):
    _, rec = hd.step_arrays(x["p"], x["q"], x["v"], x["w"], x["force"], x["torque"], x["g_eff"],
                            _PARAMS, x["dt"], record=True)
    out = adj.vjp_step(rec, *g)
    return dict(zip(("p", "q", "v", "w", "force", "torque"), out))


def _step_sample(rng):
    return dict(p=rng.normal(size=(1, 3)), q=_sample_unit(rng), v=rng.normal(0, 0.5, (1, 3)),
                w=rng.normal(0, 1.0, (1, 3)), force=rng.normal(0, 10, (1, 3)),
                torque=rng.normal(0, 2, (1, 3)), g_eff=rng.uniform(-0.3, 0.3, 1), dt=0.02)


def _observe_fwd(repr):
    def f(p, q, v, omega, p_ref, q_ref):
        o = ep.observe(hd.BodyState(p, q, v, omega), p_ref, q_ref, repr)
        return o.flat(), o.att_err
    return f


def _observe_vjp(repr):
    def g(x, cot):
        rec = adj.observe_record(x["p"], x["q"], x["v"], x["omega"], x["p_ref"], x["q_ref"], repr)
        return dict(zip(("p", "q", "v", "omega"), adj.vjp_observe(rec, cot[0], cot[1])))
    return g


def _observe_sample(rng):
    qr, qm = _error_pair(rng)
    return dict(p=rng.normal(size=(1, 3)), q=qm, v=rng.normal(size=(1, 3)),
                omega=rng.normal(size=(1, 3)), p_ref=rng.normal(size=(1, 3)), q_ref=qr)


_W = ep.RewardWeights(w_pos=1.0, D=(1.0, 0.7, 1.3), w_att=0.8, w_act=0.05, w_vel=0.1, w_act_mavg=0.1)


def _reward_fwd(dp, att_err, omega, action, hist_mean):
    return ep.reward_terms(dp, att_err, omega, action, hist_mean, _W)["r_pos"] + sum(
        ep.reward_terms(dp, att_err, omega, action, hist_mean, _W)[k] for k in ep.REWARD_TERMS[1:])


def _reward_vjp(x, g):
    rec = dict(x, weights=_W)
    return dict(zip(("dp", "att_err", "omega", "action"), adj.vjp_reward(rec, g)))


def _reward_sample(rng):
    return dict(dp=rng.normal(size=(1, 3)), att_err=rng.normal(size=(1, 3)),
                omega=rng.normal(size=(1, 3)), action=rng.uniform(-1, 1, (1, 6)),
                hist_mean=rng.uniform(-1, 1, (1, 6)))


def _net_sample(rng, layer_norm=False):
    params = nn.init_mlp([5, 7, 6, 3], rng, final_scale=1.0, layer_norm=layer_norm, dtype=np.float64)
    if layer_norm:
        params.ln_gain = [1.0 + 0.3 * rng.normal(size=g.shape) for g in params.ln_gain]
        params.ln_bias = [0.3 * rng.normal(size=g.shape) for g in params.ln_bias]
    arrs = params.arrays()
    d = {f"a{i}": a for i, a in enumerate(arrs)}
    d["x"] = rng.normal(size=(2, 5))
    d["_template"] = params
    return d


def _mlp_fwd(x, _template, **arrs):
    params = _template.with_arrays([arrs[f"a{i}"] for i in range(len(arrs))])
    return nn.mlp_forward(params, x)


def _mlp_vjp(x, g):
    n = len([k for k in x if k.startswith("a")])
    params = x["_template"].with_arrays([x[f"a{i}"] for i in range(n)])
    _, cache = nn.mlp_forward(params, x["x"], cache=True)
    grads, gx = nn.mlp_backward(params, cache, g)
    out = {f"a{i}": gr for i, gr in enumerate(grads)}
    out["x"] = gx
    return out


def _ln_sample(rng):
    return dict(x=rng.normal(size=(3, 6)), gain=1.0 + 0.3 * rng.normal(size=6), bias=rng.normal(size=6))


def _ln_vjp(x, g):
    _, c = nn.layer_norm(x["x"], x["gain"], x["bias"])
    gx, gg, gb = nn.layer_norm_backward(c, x["gain"], g)
    return dict(x=gx, gain=gg, bias=gb)


def _lin_sample(rng):
    return dict(x=rng.normal(size=(3, 4)), W=rng.normal(size=(4, 5)), b=rng.normal(size=5))


def _lin_vjp(x, g):
    gx, gW, gb = nn.linear_backward(x["x"], x["W"], g)
    return dict(x=gx, W=gW, b=gb)


def _elu_sample(rng):
    x = rng.normal(size=(2, 6))
    return dict(x=np.where(np.abs(x) < 1e-3, 0.5, x))  # stay off the kink


PRIMITIVES = {
    "quat_mul": (
        lambda a, b: so3.qmul_raw(a, b),
        lambda x, g: dict(zip("ab", adj.vjp_qmul(x["a"], x["b"], g))),
        lambda rng: dict(a=_sample_unit(rng), b=_sample_unit(rng)), ["a", "b"]),
    "quat_rotate": (
        lambda q, v: so3.quat_rotate(q, v),
        lambda x, g: dict(zip("qv", adj.vjp_quat_rotate(x["q"], x["v"], g))),
        lambda rng: dict(q=_sample_unit(rng), v=rng.normal(size=(1, 3))), ["q", "v"]),
    "quat_rotate_inv": (
        lambda q, v: so3.quat_rotate_inv(q, v),
        lambda x, g: dict(zip("qv", adj.vjp_quat_rotate_inv(x["q"], x["v"], g))),
        lambda rng: dict(q=_sample_unit(rng), v=rng.normal(size=(1, 3))), ["q", "v"]),
    "axis_angle_to_quat": (
        lambda v: so3.axis_angle_to_quat(v),
        lambda x, g: dict(v=adj.vjp_axis_angle_to_quat(x["v"], g)),
        lambda rng: dict(v=rng.normal(size=(1, 3)) * 10.0 ** rng.uniform(-3, 0.4)), ["v"]),
    "quat_error_axis_angle": (
        lambda q_ref, q_meas: so3.quat_error_axis_angle(q_ref, q_meas),
        lambda x, g: dict(zip(("q_ref", "q_meas"), adj.vjp_quat_error_axis_angle(x["q_ref"], x["q_meas"], g))),
        lambda rng: dict(zip(("q_ref", "q_meas"), _error_pair(rng))), ["q_ref", "q_meas"]),
    "quat_integrate": (
        lambda q, omega, dt: so3.quat_integrate(q, omega, dt),
        lambda x, g: dict(zip(("q", "omega"), adj.vjp_quat_integrate(x["q"], x["omega"], x["dt"], g))),
        lambda rng: dict(q=_sample_unit(rng), omega=rng.normal(size=(1, 3)), dt=0.02), ["q", "omega"]),
    "fluid_wrench": (
        lambda v, omega: hd.fluid_wrench(hd.BodyState(np.zeros_like(v), so3.identity((1,)), v, omega), _PARAMS),
        lambda x, g: dict(zip(("v", "omega"), adj.vjp_fluid_wrench(x["v"], x["omega"], _PARAMS, g))),
        lambda rng: dict(v=rng.normal(size=(1, 3)), omega=rng.normal(size=(1, 3))), ["v", "omega"]),
    "step": (_step_fwd, _step_vjp, _step_sample, ["p", "q", "v", "w", "force", "torque"]),
    "reward": (_reward_fwd, _reward_vjp, _reward_sample, ["dp", "att_err", "omega", "action"]),
    "linear": (lambda x, W, b: nn.linear(x, W, b), _lin_vjp, _lin_sample, ["x", "W", "b"]),
    "elu": (lambda x: nn.elu(x), lambda x, g: dict(x=nn.elu_backward(x["x"], g)), _elu_sample, ["x"]),
    "layer_norm": (lambda x, gain, bias: nn.layer_norm(x, gain, bias)[0], _ln_vjp, _ln_sample,
                   ["x", "gain", "bias"]),
    "mlp": (_mlp_fwd, _mlp_vjp, _net_sample, None),
    "mlp_layernorm": (_mlp_fwd, _mlp_vjp, lambda rng: _net_sample(rng, True), None),
}
for _r in so3.REPRS:
    PRIMITIVES[f"observe_{_r}"] = (_observe_fwd(_r), _observe_vjp(_r), _observe_sample,
                                   ["p", "q", "v", "omega"])


def check_primitive(name: str, seed: int, eps: float = FD_EPS) -> CheckResult:
    f, vjp, sampler, wrt = PRIMITIVES[name]
    rng = np.random.default_rng(seed)
    inputs = sampler(rng)
    if wrt is None:
        wrt = ["x"] + sorted(k for k in inputs if k.startswith("a"))
    J_fd = fd_jacobian(f, inputs, wrt, eps)
    J_vjp = vjp_jacobian(f, vjp, inputs, wrt)
    return CheckResult(name, seed, relative_error(J_vjp, J_fd), PRIMITIVE_TOL)


# ---------------------------------------------------------------------------
# rollouts


def rollout_fixture(seed: int, n_envs: int = 4, horizon: int = 8, repr: str = "axis_angle",
                    weights: ep.RewardWeights | None = None, hidden=(16, 16)):
    """A float64 policy, a perturbed env batch, noise and a terminal cotangent."""
    rng = np.random.default_rng(seed)
    cfg = ep.EnvConfig(attitude_repr=repr, weights=weights or ep.RewardWeights())
    es, _ = ep.reset(n_envs, seed, cfg)
    s = es.state
    es.state = hd.StateBatch(s.p + rng.normal(0, 0.3, s.p.shape), so3.random_quat(rng, (n_envs,)),
                             rng.normal(0, 0.3, s.v.shape), rng.normal(0, 0.5, s.omega.shape), s.g_eff)
    pol = nn.init_policy(cfg.obs_dim, 6, hidden, rng, dtype=np.float64)
    pol = pol.with_arrays([a + 0.1 * rng.normal(size=a.shape) for a in pol.arrays()])
    noise = rng.normal(size=(horizon, n_envs, 6))
    term = rng.normal(size=(n_envs, cfg.obs_dim))
    return pol, es, noise, term


def rollout_objective(pol, es, noise, term, gamma=0.99, reward_scale=1.0) -> float:
    res = adj.rollout(pol, es, noise, gamma, record=False)
    disc = gamma ** np.arange(len(noise))
    return float(np.sum(disc[:, None] * reward_scale * res.rewards) + np.sum(term * res.final_obs))


def rollout_gradient(pol, es, noise, term, gamma=0.99, reward_scale=1.0):
    res = adj.rollout(pol, es, noise, gamma)
    return adj.backprop_rollout(res.tape, term, reward_scale), res


def _tile_envs(es: ep.EpisodeState, k: int) -> ep.EpisodeState:
    """``k`` stacked copies of an env batch; copy ``j`` holds rows ``j*n:(j+1)*n``."""
    def rep(a):
        a = np.asarray(a)
        return np.tile(a, (k,) + (1,) * (a.ndim - 1))

    s = es.state
    state = hd.StateBatch(rep(s.p), rep(s.q), rep(s.v), rep(s.omega), rep(s.g_eff))
    return replace(es, state=state, p_ref=rep(es.p_ref), q_ref=rep(es.q_ref), history=rep(es.history),
                   t=rep(es.t), episode=rep(es.episode), sq_pos=rep(es.sq_pos), sq_att=rep(es.sq_att),
                   ret=rep(es.ret))


def rollout_objectives(pols, es, noise, term, gamma=0.99, reward_scale=1.0) -> np.ndarray:
    """``rollout_objective`` for several policies in one stacked env batch.

    Only the forward pass is shared, so finite differences over many
    perturbed policies cost a handful of physics calls per step.
    """
    k, n = len(pols), es.n
    big = _tile_envs(es, k)
    cfg = es.cfg
    scale = cfg.vehicle.action_scale
    total = np.zeros(k)
    final = None
    for t in range(len(noise)):
        s = big.state
        obs = ep.observe(s, big.p_ref, big.q_ref, cfg.attitude_repr).flat()
        mean = np.concatenate([np.asarray(nn.mlp_forward(pol.net, obs[j * n:(j + 1) * n]), dtype=float)
                               for j, pol in enumerate(pols)])
        sigma = np.concatenate([np.broadcast_to(np.exp(np.clip(np.asarray(pol.log_std, dtype=float),
                                                               nn.LOG_STD_MIN, nn.LOG_STD_MAX)), (n, 6))
                                for pol in pols])
        a = np.clip(mean + sigma * np.tile(noise[t], (k, 1)), -1.0, 1.0)
        wrench = a * scale
        p1, q1, v1, w1 = hd.step_arrays(s.p, s.q, s.v, s.omega, wrench[:, :3], wrench[:, 3:], s.g_eff,
                                        cfg.vehicle, cfg.dt)
        with np.errstate(invalid="ignore"):
            new_state = hd.StateBatch(p1, q1, v1, w1, s.g_eff)
        big, _, r, _, info = ep.finish_step(big, new_state, a)
        total += gamma ** t * np.sum((reward_scale * r).reshape(k, n), axis=1)
        final = info["obs_pre_reset"].flat()
    return total + np.sum((np.tile(term, (k, 1)) * final).reshape(k, -1), axis=1)


def check_rollout(seed: int, n_params: int = 50, eps: float = FD_EPS, **kw) -> CheckResult:
    """Compare rollout gradients on ``n_params`` sampled policy coordinates."""
    pol, es, noise, term = rollout_fixture(seed, **kw)
    grads, _ = rollout_gradient(pol, es, noise, term)
    flat_g = np.concatenate([g.ravel() for g in grads.policy])
    arrays = pol.arrays()
    sizes = [a.size for a in arrays]
    rng = np.random.default_rng(seed + 7919)
    picks = rng.choice(sum(sizes), size=min(n_params, sum(sizes)), replace=False)
    offsets = np.cumsum([0] + sizes)
    perturbed = []
    for k in picks:
        i = int(np.searchsorted(offsets, k, side="right") - 1)
        for sgn in (1.0, -1.0):
            arrs = [a.copy() for a in arrays]
            arrs[i].ravel()[k - offsets[i]] += sgn * eps
            perturbed.append(pol.with_arrays(arrs))
    vals = rollout_objectives(perturbed, es, noise, term).reshape(-1, 2)
    fd = (vals[:, 0] - vals[:, 1]) / (2.0 * eps)
    return CheckResult("rollout_h8_n4", seed, relative_error(flat_g[picks], fd), ROLLOUT_TOL)


def check_dot_product(seed: int, eps: float = FD_EPS, **kw) -> CheckResult:
    """``<J d, 1>`` by a directional difference against ``<d, grad>``."""
    pol, es, noise, term = rollout_fixture(seed, **kw)
    grads, _ = rollout_gradient(pol, es, noise, term)
    rng = np.random.default_rng(seed + 104729)
    dirs = [rng.normal(size=a.shape) for a in pol.arrays()]
    lhs = sum(float(np.sum(d * g)) for d, g in zip(dirs, grads.policy))
    hi = pol.with_arrays([a + eps * d for a, d in zip(pol.arrays(), dirs)])
    lo = pol.with_arrays([a - eps * d for a, d in zip(pol.arrays(), dirs)])
    rhs = (rollout_objective(hi, es, noise, term) - rollout_objective(lo, es, noise, term)) / (2 * eps)
    return CheckResult("dot_product", seed, abs(lhs - rhs) / max(abs(rhs), 1e-12), DOT_TOL)


def run_all(seeds=range(100), rollout_seeds=range(4), dot_seeds=range(4)) -> list:
    """Every primitive over ``seeds`` plus rollout and dot-product checks."""
    results = []
    for name in PRIMITIVES:
        for s in seeds:
            results.append(check_primitive(name, s))
    for s in rollout_seeds:
        results.append(check_rollout(s))
    for s in dot_seeds:
        results.append(check_dot_product(s))
    return results


def summarize(results) -> list:
    """One row per check name: count, worst relative error, tolerance, pass flag."""
    rows = {}
    for r in results:
        row = rows.setdefault(r.name, {"check": r.name, "n": 0, "max_rel_err": 0.0,
                                       "tol": r.tol, "passed": True})
        row["n"] += 1
        row["max_rel_err"] = max(row["max_rel_err"], r.rel_err) if np.isfinite(r.rel_err) else np.inf
        row["passed"] = row["passed"] and r.passed
    return list(rows.values())


def timed_run(**kw):
    t0 = time.perf_counter()
    res = run_all(**kw)
    return res, time.perf_counter() - t0
