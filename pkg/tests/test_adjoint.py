import numpy as np
import pytest

from auvrl import adjoint as adj
from auvrl import envpool as ep
from auvrl import gradcheck as gc
from auvrl import hydrodyn as hd
from auvrl import neural as nn

P = hd.VehicleParams()
NO_FLUID = P.with_(rho=0.0, mu=0.0)


def record_step(params, v=(0, 0, 0), w=(0, 0, 0), q=(1, 0, 0, 0), force=(0, 0, 0), torque=(0, 0, 0), dt=0.02):
    arr = lambda x: np.array(x, dtype=float)  # noqa: E731
    _, rec = hd.step_arrays(np.zeros(3), arr(q), arr(v), arr(w), arr(force), arr(torque), 0.0, params, dt,
                            record=True)
    return rec


def test_zero_cotangent_gives_zero():
    rng = np.random.default_rng(0)
    rec = record_step(P, rng.normal(size=3), rng.normal(size=3), force=rng.normal(size=3))
    z3 = np.zeros(3)
    for out in adj.vjp_step(rec, z3, np.zeros(4), z3, z3):
        np.testing.assert_array_equal(out, 0.0)


def test_force_cotangent_at_rest_is_dt_over_mass():
    dt = 0.02
    rec = record_step(NO_FLUID, dt=dt)
    z3 = np.zeros(3)
    *_, f_bar, t_bar = adj.vjp_step(rec, z3, np.zeros(4), np.array([1.0, 0, 0]), z3)
    np.testing.assert_allclose(f_bar, [dt / NO_FLUID.mass, 0, 0], rtol=1e-15, atol=1e-18)
    np.testing.assert_array_equal(t_bar, 0.0)


def test_linear_layer_vjp_on_zero_input():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(5, 3))
    g = rng.normal(size=(4, 3))
    gx, gW, gb = adj.vjp_primitive("linear", {"x": np.zeros((4, 5)), "W": W}, g)
    np.testing.assert_array_equal(gW, 0.0)
    np.testing.assert_array_equal(gb, g.sum(axis=0))


def test_quadratic_drag_vjp_vanishes_at_rest():
    g = np.array([1.0, -2.0, 0.5, 0.3, 0.7, -1.1])
    only_quad = P.with_(mu=0.0)
    v_bar, w_bar = adj.vjp_primitive("fluid_wrench", {"v": np.zeros(3), "omega": np.zeros(3),
                                                      "params": only_quad}, g)
    np.testing.assert_array_equal(v_bar, 0.0)
    np.testing.assert_array_equal(w_bar, 0.0)
    # the viscous part stays: -visc * g
    _, visc, _, visc_rot = P.drag_coeffs()
    v_bar, w_bar = adj.vjp_fluid_wrench(np.zeros(3), np.zeros(3), P, g)
    np.testing.assert_allclose(v_bar, -visc * g[:3], rtol=1e-15)
    np.testing.assert_allclose(w_bar, -visc_rot * g[3:], rtol=1e-15)


def test_unknown_primitive():
    with pytest.raises(KeyError):
        adj.vjp_primitive("softmax", {}, None)


@pytest.mark.parametrize("name", sorted(gc.PRIMITIVES))
def test_primitive_matches_finite_differences(name):
    for seed in range(10):
        res = gc.check_primitive(name, seed)
        assert res.passed, (name, seed, res.rel_err)


@pytest.mark.parametrize("seed", range(3))
def test_rollout_gradient_matches_finite_differences(seed):
    res = gc.check_rollout(seed)
    assert res.rel_err < 1e-4


@pytest.mark.parametrize("repr", ["quaternion", "rotmat"])
def test_rollout_gradient_other_representations(repr):
    assert gc.check_rollout(11, repr=repr).rel_err < 1e-4


@pytest.mark.parametrize("repr", ["axis_angle", "rotmat"])
def test_stacked_objectives_match_serial(repr):
    pol, es, noise, term = gc.rollout_fixture(5, repr=repr)
    other = pol.with_arrays([a * 1.01 for a in pol.arrays()])
    stacked = gc.rollout_objectives([pol, other], es, noise, term)
    serial = [gc.rollout_objective(p, es, noise, term) for p in (pol, other)]
    np.testing.assert_allclose(stacked, serial, rtol=1e-12)
    assert stacked[0] != stacked[1]


@pytest.mark.parametrize("seed", range(3))
def test_dot_product_adjoint(seed):
    assert gc.check_dot_product(seed).rel_err < 1e-5


def test_tape_length_and_replay():
    pol, es, noise, term = gc.rollout_fixture(0, horizon=5)
    res = adj.rollout(pol, es, noise, 0.99)
    assert len(res.tape) == 5 * adj.PRIMITIVES_PER_STEP
    for t in range(5):
        kinds = [k for k, _ in res.tape.step_entries(t)]
        assert tuple(kinds) == ("observe", "policy", "clamp", "step", "observe", "reward")
        rec = res.tape.step_entries(t)[3][1]
        p1, q1, v1, w1 = hd.step_arrays(rec["p"], rec["q"], rec["v"], rec["w"], rec["force"], rec["torque"],
                                        rec["g_eff"], rec["params"], rec["dt"])
        assert np.array_equal(v1, rec["v1"]) and np.array_equal(w1, rec["w1"])
    again = adj.rollout(pol, es, noise, 0.99, record=False)
    assert np.array_equal(again.rewards, res.rewards)


def test_horizon_one_equals_composed_primitives():
    pol, es, noise, _ = gc.rollout_fixture(3, horizon=1)
    res = adj.rollout(pol, es, noise, 1.0)
    bundle = adj.backprop_rollout(res.tape, None, 1.0)
    (_, o_in), (_, prec), (_, crec), (_, srec), (_, o_out), (_, rrec) = res.tape.step_entries(0)
    n = es.n
    dp_b, att_b, om_b, a_b = adj.vjp_reward(rrec, np.ones(n))
    g_flat = np.zeros((n, 12))
    g_flat[:, :3] = dp_b
    g_flat[:, 9:] = om_b
    cp, cq, cv, cw = adj.vjp_observe(o_out, g_flat=g_flat, g_att=att_b)
    *_, f_b, t_b = adj.vjp_step(srec, cp, cq, cv, cw)
    g_raw = adj.vjp_clamp(crec, np.concatenate([f_b, t_b], axis=-1), g_action=a_b)
    grads, _ = adj.vjp_policy(prec, g_raw)
    for a, b in zip(bundle.policy, grads):
        assert np.array_equal(a, b)


def test_objective_scaling_is_linear():
    pol, es, noise, term = gc.rollout_fixture(4)
    base, _ = gc.rollout_gradient(pol, es, noise, term)
    scaled, _ = gc.rollout_gradient(pol, es, noise, 4.0 * term, reward_scale=4.0)
    for a, b in zip(base.policy, scaled.policy):
        assert np.array_equal(4.0 * a, b)
    third, _ = gc.rollout_gradient(pol, es, noise, 3.0 * term, reward_scale=3.0)
    for a, b in zip(base.policy, third.policy):
        np.testing.assert_allclose(b, 3.0 * a, rtol=1e-12, atol=1e-300)


def test_zero_weights_zero_gradient():
    w = ep.RewardWeights(w_pos=0, w_att=0, w_act=0, w_vel=0, w_act_mavg=0)
    pol, es, noise, _ = gc.rollout_fixture(5, weights=w)
    res = adj.rollout(pol, es, noise, 0.99)
    bundle = adj.backprop_rollout(res.tape, None)
    for g in bundle.policy:
        np.testing.assert_array_equal(g, 0.0)


@pytest.mark.parametrize("horizon", [16, 64])
def test_gradients_stay_finite(horizon):
    pol, es, noise, term = gc.rollout_fixture(6, n_envs=8, horizon=horizon)
    bundle, _ = gc.rollout_gradient(pol, es, noise, term)
    assert all(np.all(np.isfinite(g)) for g in bundle.policy)
    assert np.isfinite(nn.global_norm(bundle.policy))


def test_history_term_gradient_is_exact_only_when_tracked():
    # through_history=False drops the dependence of later smoothness terms on earlier actions
    w = ep.RewardWeights(w_pos=0, w_att=0, w_act=0, w_vel=0, w_act_mavg=1.0)
    pol, es, noise, _ = gc.rollout_fixture(7, horizon=6, weights=w)
    res = adj.rollout(pol, es, noise, 1.0)
    full = adj.backprop_rollout(res.tape, None, through_history=True)
    trunc = adj.backprop_rollout(res.tape, None, through_history=False)
    assert not all(np.array_equal(a, b) for a, b in zip(full.policy, trunc.policy))
