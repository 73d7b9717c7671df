import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from auvrl import checkpoint as ckpt
from auvrl import cli
from auvrl import config as cf
from auvrl import neural as nn

# --- configuration ---------------------------------------------------------------------


def test_empty_file_gives_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    assert cf.load(path) == cf.defaults()


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nenv.num_envs = 64\ntrain.hidden = [32, 32]  # trailing\n")
    cfg = cf.load(path, ["env.num_envs=4096"])
    assert cfg["env.num_envs"] == 4096
    assert cfg["train.hidden"] == [32, 32]


def test_negative_weight_names_key_and_rule():
    with pytest.raises(cf.ConfigError, match=r"reward\.w_pos.*non-negative"):
        cf.load(None, ["reward.w_pos=-1"])


@pytest.mark.parametrize("item,pattern", [
    ("env.nums=3", "env.nums"),
    ("env.num_envs=3.5", "env.num_envs"),
    ("ppo.scale_rewards=maybe", "ppo.scale_rewards"),
    ("vehicle.inertia=[1, 2]", "vehicle.inertia"),
    ("env.attitude_repr=euler", "env.attitude_repr"),
    ("mpc.control_horizon=50", "mpc.control_horizon"),
])
def test_bad_values_name_the_key(item, pattern):
    with pytest.raises(cf.ConfigError, match=pattern):
        cf.load(None, [item])


def test_duplicate_and_malformed_lines(tmp_path):
    with pytest.raises(cf.ConfigError, match="duplicate"):
        cf.parse_lines("seed = 1\nseed = 2\n")
    with pytest.raises(cf.ConfigError, match=":1:"):
        cf.parse_lines("seed 1\n")


def test_snapshot_round_trip():
    cfg = cf.load(None, ["env.num_envs=4096", "ppo.lr=1.5e-4", "eval.helix_pitch=-0.1", "train.hidden=[8]"])
    again = cf.defaults()
    again.update(cf.parse_lines(cf.snapshot(cfg)))
    assert again == cfg
    assert cf.snapshot(again) == cf.snapshot(cfg)
    assert cf.config_hash(again) == cf.config_hash(cfg)


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-9, 1e9), st.integers(1, 10 ** 6))
def test_snapshot_round_trip_property(lr, n):
    cfg = cf.load(None, [f"ppo.lr={lr!r}", f"env.num_envs={n}"])
    again = cf.defaults()
    again.update(cf.parse_lines(cf.snapshot(cfg)))
    assert again == cfg


def test_typed_views():
    cfg = cf.load(None, ["env.attitude_repr=rotmat", "mpc.u_scale=0.5", "ppo.epochs=3"])
    assert cf.env_config(cfg).obs_dim == 18
    m = cf.mpc_config(cfg)
    np.testing.assert_allclose(m.u_hi, 0.5 * cf.vehicle_params(cfg).action_scale)
    over = cf.trainer_overrides(cfg, "ppo")
    assert over["epochs"] == 3 and over["hidden"] == (256, 256)


def test_every_key_documented_in_readme():
    readme = os.path.join(os.path.dirname(__file__), "..", "README.md")
    text = open(readme).read()
    missing = [k for k in cf.SCHEMA if f"`{k}`" not in text]
    assert not missing


# --- checkpoints -----------------------------------------------------------------------

def policy(seed=0):
    return nn.init_policy(12, 6, (16, 8), np.random.default_rng(seed))


def squashed_layer_norm_policy():
    net = nn.init_mlp([12, 16, 16, 12], np.random.default_rng(1), layer_norm=True)
    return nn.GaussianPolicy(net, None, squash=True)


@pytest.mark.parametrize("make", [policy, squashed_layer_norm_policy])
def test_checkpoint_round_trip_bitwise(tmp_path, make):
    pol = make()
    path = tmp_path / "p.ckpt"
    ckpt.save(path, pol, "ppo", "abc")
    back, head = ckpt.load(path)
    assert head["algorithm"] == "ppo" and head["config_hash"] == "abc"
    assert back.squash == pol.squash
    for a, b in zip(pol.arrays(), back.arrays()):
        assert a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


def test_truncated_checkpoint_is_a_checksum_error(tmp_path):
    data = ckpt.encode(policy(), "ppo")
    for cut in (1, 40, len(data) // 2):
        with pytest.raises(ckpt.ChecksumError):
            ckpt.decode(data[:-cut])


def test_flipped_byte_is_a_checksum_error():
    data = bytearray(ckpt.encode(policy(), "ppo"))
    data[60] ^= 0xFF
    with pytest.raises(ckpt.ChecksumError):
        ckpt.decode(bytes(data))


def test_cross_algorithm_load_is_a_header_error():
    data = ckpt.encode(policy(), "shac")
    with pytest.raises(ckpt.HeaderError, match="shac"):
        ckpt.decode(data, expect_algo="droq")


# --- command line ----------------------------------------------------------------------

FAST = ["--set", "env.episode_len=32", "--set", "env.num_envs=8", "--set", "train.hidden=[16]",
        "--set", "train.episodes=2", "--set", "train.eval_envs=4", "--set", "ppo.rollout_len=16"]


def manifest(out):
    with open(os.path.join(out, "manifest.json")) as fh:
        return json.load(fh)


def assert_inventory_complete(out):
    listed = {f["path"] for f in manifest(out)["files"]}
    on_disk = set()
    for base, _, names in os.walk(out):
        for n in names:
            on_disk.add(os.path.relpath(os.path.join(base, n), out))
    assert on_disk - {"manifest.json"} == listed


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("train"))
    assert cli.main(["train", "--algo", "ppo", "--out", out] + FAST) == 0
    return out


def test_train_smoke(trained):
    m = manifest(trained)
    assert m["exit_status"] == 0 and m["seed"] == 0
    assert os.path.exists(os.path.join(trained, "checkpoints", "ppo.ckpt"))
    lines = open(os.path.join(trained, "metrics.jsonl")).read().splitlines()
    assert sum(json.loads(x)["kind"] == "train" for x in lines) == 2
    assert_inventory_complete(trained)


def test_set_round_trips_into_manifest(trained):
    snap = open(os.path.join(trained, "config.snapshot")).read()
    assert "env.num_envs = 8\n" in snap
    cfg = cf.defaults()
    cfg.update(cf.parse_lines(snap))
    assert manifest(trained)["config_hash"] == cf.config_hash(cfg)


def test_eval_helix_outputs(trained, tmp_path):
    out = str(tmp_path / "ev")
    ck = os.path.join(trained, "checkpoints", "ppo.ckpt")
    assert cli.main(["eval", "--checkpoint", ck, "--suite", "helix", "--out", out,
                     "--set", "eval.duration_s=2"]) == 0
    files = {f["path"] for f in manifest(out)["files"]}
    assert os.path.join("trajectories", "ppo_helix.csv") in files
    assert os.path.join("tables", "rmse_ppo_helix.csv") in files
    assert os.path.join("tables", "rmse_ppo_helix.txt") in files
    assert_inventory_complete(out)


def test_eval_refuses_other_algorithm(trained, tmp_path):
    ck = os.path.join(trained, "checkpoints", "ppo.ckpt")
    assert cli.main(["eval", "--checkpoint", ck, "--suite", "hold", "--algo", "droq",
                     "--out", str(tmp_path / "x")]) == 2


def test_missing_checkpoint_and_bad_suite(tmp_path):
    assert cli.main(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"), "--suite", "hold",
                     "--out", str(tmp_path / "y")]) == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["eval", "--checkpoint", "x", "--suite", "orbit"])
    assert e.value.code == 2


def test_config_error_exit_code(tmp_path):
    assert cli.main(["train", "--algo", "ppo", "--set", "reward.w_pos=-1", "--out", str(tmp_path / "z")]) == 2
    assert not os.path.exists(tmp_path / "z")


def test_gradcheck_exits_zero(tmp_path):
    out = str(tmp_path / "gc")
    code = cli.main(["gradcheck", "--out", out, "--set", "gradcheck.seeds=2", "--set", "gradcheck.rollout_seeds=2",
                     "--set", "gradcheck.dot_seeds=1"])
    assert code == 0
    assert all(c["passed"] for c in manifest(out)["checks"])


def test_check_mode_failure_exit_code(tmp_path):
    # two rounds of training cannot meet the convergence thresholds
    code = cli.main(["train", "--algo", "ppo", "--check", "--out", str(tmp_path / "c")] + FAST)
    assert code == 1


def test_mpc_eval_hold(tmp_path):
    out = str(tmp_path / "m")
    assert cli.main(["mpc-eval", "--suite", "hold", "--out", out, "--set", "eval.duration_s=2",
                     "--set", "mpc.horizon=5", "--set", "mpc.control_horizon=2"]) == 0
    assert_inventory_complete(out)


@pytest.mark.parametrize("argv", [
    ["train", "--algo", "shac", "--set", "shac.horizon=16", "--set", "shac.critic_iters=1"] + FAST,
    ["train", "--algo", "droq", "--set", "droq.utd=1", "--set", "droq.batch_size=16"] + FAST[:-2]
    + ["--set", "train.episodes=1"],
    ["mpc-eval", "--suite", "disturb", "--set", "eval.duration_s=3", "--set", "mpc.horizon=4",
     "--set", "mpc.control_horizon=2"],
    ["gradcheck", "--set", "gradcheck.seeds=1", "--set", "gradcheck.rollout_seeds=1", "--set", "gradcheck.dot_seeds=1"],
    ["bench-scaling", "--set", "bench.env_counts=[2, 4]", "--set", "bench.throughput_counts=[8]"] + FAST,
    ["ablate-attitude"] + FAST[:-4] + ["--set", "train.episodes=1", "--set", "ppo.rollout_len=16"],
], ids=["train-shac", "train-droq", "mpc-eval", "gradcheck", "bench-scaling", "ablate-attitude"])
def test_metrics_are_byte_identical(tmp_path, argv):
    outs = [str(tmp_path / f"r{k}") for k in range(2)]
    for out in outs:
        cli.main(argv + ["--out", out])
    a, b = (open(os.path.join(o, "metrics.jsonl"), "rb").read() for o in outs)
    assert a and a == b
