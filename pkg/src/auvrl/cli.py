"""Command-line entry point: ``auvrl <command> [options]``.

Every command writes a run directory::

    DIR/config.snapshot   resolved configuration (re-loadable)
    DIR/manifest.json     hash, seed, version, times, file inventory (written last, atomically)
    DIR/metrics.jsonl     deterministic results, one JSON object per line
    DIR/timing.json       wall-clock measurements (machine dependent)
    DIR/checkpoints/ DIR/tables/ DIR/trajectories/ DIR/figures/

Exit status: 0 on success, 1 when ``--check`` finds a failed acceptance
assertion (``gradcheck`` always reports failures this way), 2 on bad input.
"""
from __future__ import annotations

import argparse
import contextlib
import datetime as _dt
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from . import config as cf
from . import envpool as ep
from . import evalbench as eb
from . import gradcheck as gc
from . import hydrodyn as hd
from . import mpc
from . import plotting
from . import so3
from . import trainers

THREADS_ENV = "AUVRL_THREADS"
SUBDIRS = ("checkpoints", "tables", "trajectories", "figures")


class RunDir:
    def __init__(self, root: str, cfg: dict, argv: list):
        self.root = root
        self.cfg = cfg
        self.argv = argv
        self.metrics: list = []
        self.timing: dict = {}
        self.checks: list = []
        self.start = _now()
        for d in SUBDIRS:
            os.makedirs(os.path.join(root, d), exist_ok=True)
        with open(self.path("config.snapshot"), "w") as fh:
            fh.write(cf.snapshot(cfg))

    def path(self, *parts) -> str:
        return os.path.join(self.root, *parts)

    def metric(self, kind: str, **values) -> None:
        self.metrics.append({"kind": kind, **{k: _jsonable(v) for k, v in values.items()}})

    def check(self, name: str, ok: bool, detail: str = "") -> None:
        self.checks.append((name, bool(ok), detail))
        print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else ""))

    @property
    def all_passed(self) -> bool:
        return all(ok for _, ok, _ in self.checks)

    def finish(self, status: int) -> None:
        with open(self.path("metrics.jsonl"), "w") as fh:
            for m in self.metrics:
                fh.write(json.dumps(m, sort_keys=True) + "\n")
        with open(self.path("timing.json"), "w") as fh:
            json.dump(self.timing, fh, indent=1, sort_keys=True)
        files = []
        for base, _, names in sorted(os.walk(self.root)):
            for n in sorted(names):
                rel = os.path.relpath(os.path.join(base, n), self.root)
                if rel == "manifest.json" or n.endswith(".tmp"):
                    continue
                with open(os.path.join(base, n), "rb") as fh:
                    data = fh.read()
                files.append({"path": rel, "bytes": len(data), "sha256": hashlib.sha256(data).hexdigest()})
        manifest = {
            "command": self.argv,
            "config_hash": cf.config_hash(self.cfg),
            "seed": self.cfg["seed"],
            "code_version": __version__,
            "start_time": self.start,
            "end_time": _now(),
            "exit_status": status,
            "checks": [{"name": n, "passed": ok, "detail": d} for n, ok, d in self.checks],
            "files": sorted(files, key=lambda f: f["path"]),
        }
        tmp = self.path("manifest.json.tmp")
        with open(tmp, "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
        os.replace(tmp, self.path("manifest.json"))


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _jsonable(v):
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return None if math.isnan(v) else ("inf" if math.isinf(v) else v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, (list, tuple, np.ndarray)):
        return [_jsonable(x) for x in v]
    return v


@contextlib.contextmanager
def thread_limit():
    """Cap BLAS threads at ``$AUVRL_THREADS`` when set."""
    n = os.environ.get(THREADS_ENV)
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=max(1, int(n))):
        yield


# ---------------------------------------------------------------------------
# commands


def cmd_train(args, cfg, run: RunDir) -> None:
    algo = args.algo
    env_cfg = cf.env_config(cfg)
    t0 = time.perf_counter()
    policy, log = trainers.train(algo, cf.trainer_overrides(cfg, algo), env_cfg)
    run.timing["train_s"] = time.perf_counter() - t0
    run.timing["round_wall_s"] = [r["wall_s"] for r in log.records]
    ckpt.save(run.path("checkpoints", f"{algo}.ckpt"), policy, algo, cf.config_hash(cfg),
              {"attitude_repr": env_cfg.attitude_repr})
    for r in log.records:
        run.metric("train", **{k: v for k, v in r.items() if k not in trainers.common.TIMING_KEYS})
    ev = trainers.evaluate_policy(policy, env_cfg, cfg["train.eval_envs"], cfg["seed"] + 1000)
    pos, att = float(np.mean(ev["rmse_pos"])), float(np.mean(ev["rmse_att_deg"]))
    run.metric("eval", algorithm=algo, rmse_pos_m=pos, rmse_att_deg=att, envs=cfg["train.eval_envs"])
    cols = ["episode", "env_steps", "rmse_pos_m", "rmse_att_deg", "return"]
    eb.write_rows_csv(run.path("tables", "train_log.csv"), cols, [[r[c] for c in cols] for r in log.records])
    eb.write_rows_csv(run.path("tables", "final_eval.csv"), ["algorithm", "rmse_pos_m", "rmse_att_deg"],
                      [[algo, pos, att]])
    if log.records:
        plotting.training_curve(log.records, run.path("figures", "training_curve.png"), algo)
    print(f"{algo}: {len(log.records)} rounds, final deterministic eval {pos:.3f} m / {att:.2f} deg")
    run.check(f"{algo} final position RMSE < 0.25 m", pos < 0.25, f"{pos:.4f}")
    run.check(f"{algo} final orientation RMSE < 15 deg", att < 15.0, f"{att:.3f}")


def suite_params(cfg: dict) -> dict:
    e = cf.section(cfg, "eval")
    return dict(radius=e["helix_radius"], pitch=e["helix_pitch"], omega=e["helix_omega"],
                waypoint_period=e["waypoint_period"], step_angle=e["step_angle"], hold_s=e["hold_s"],
                force=e["disturb_force"], pulse_s=e["disturb_duration"], duration=e["duration_s"])


def run_suite(controller, name: str, suite: str, cfg: dict, run: RunDir, env_cfg) -> list:
    """Run every case of ``suite``; writes trajectories, tables, figures and metrics."""
    results, rows = [], []
    for case in eb.suite_cases(suite, **suite_params(cfg)):
        t0 = time.perf_counter()
        res = eb.run_episode(controller, case.spec, case.disturbances, seed=cfg["seed"], env_cfg=env_cfg,
                             name=name)
        run.timing[f"{case.label}_s"] = time.perf_counter() - t0
        ep.write_trajectory_csv(run.path("trajectories", f"{name}_{case.label}.csv"), res.rows, eb.REF_COLUMNS)
        extra = {}
        if case.disturbances.pulses:
            rec = eb.recovery_times(res, case.disturbances, cfg["eval.recovery_tol"])
            extra["recovery_s"] = rec
            ok = all(r <= cfg["eval.recovery_window"] for r in rec)
            run.check(f"{name} {case.label}: back within {cfg['eval.recovery_tol']} m within "
                      f"{cfg['eval.recovery_window']} s of every pulse", ok, str([round(r, 2) for r in rec]))
        if case.spec.kind == "step_pose":
            extra["overshoot"] = eb.step_overshoot(res, case.spec)
        if case.label == "hold":
            ss = eb.steady_state_error(res)
            extra["steady_state_m"] = ss
            run.check(f"{name} hold steady-state error < 0.05 m", ss < 0.05, f"{ss:.4f}")
        if case.label == "helix":
            r = res.report
            run.check(f"{name} helix 3D RMSE < 0.3 m and attitude < 15 deg", r.pos3d < 0.3 and r.att_deg < 15.0,
                      eb.format_summary(r))
        rep = dict(zip(eb.REPORT_COLUMNS[1:], res.report.values()[1:]))
        run.metric("eval", controller=name, case=case.label, **rep, **extra)
        rows.append(res.report)
        results.append(res)
    text = eb.rmse_report(rows, run.path("tables", f"rmse_{name}_{suite}.csv"))
    with open(run.path("tables", f"rmse_{name}_{suite}.txt"), "w") as fh:
        fh.write(text)
    print(text)
    for res, case in zip(results, eb.suite_cases(suite, **suite_params(cfg))):
        plotting.tracking([res], run.path("figures", f"{name}_{case.label}.png"), case.label)
    return results


def cmd_eval(args, cfg, run: RunDir) -> None:
    policy, head = ckpt.load(args.checkpoint, expect_algo=args.algo)
    env_cfg = cf.env_config(cfg)
    rep = head.get("meta", {}).get("attitude_repr")
    if rep is None:
        rep = {9 + w: r for r, w in so3.REPR_WIDTH.items()}[head["sizes"][0]]
    env_cfg = replace(env_cfg, attitude_repr=rep)
    ctl = eb.PolicyController(policy, env_cfg, head["algorithm"])
    run_suite(ctl, head["algorithm"], args.suite, cfg, run, env_cfg)


def cmd_mpc_eval(args, cfg, run: RunDir) -> None:
    env_cfg = cf.env_config(cfg)
    ctl = mpc.MpcController(cf.mpc_config(cfg), hd.FossenParams.from_vehicle(env_cfg.vehicle))
    run_suite(ctl, "mpc", args.suite, cfg, run, env_cfg)
    run.metric("mpc_solver", fallbacks=ctl.failures)


def cmd_gradcheck(args, cfg, run: RunDir) -> None:
    res, wall = gc.timed_run(seeds=range(cfg["gradcheck.seeds"]), rollout_seeds=range(cfg["gradcheck.rollout_seeds"]),
                             dot_seeds=range(cfg["gradcheck.dot_seeds"]))
    run.timing["gradcheck_s"] = wall
    rows = gc.summarize(res)
    for r in rows:
        run.metric("gradcheck", **r)
    eb.write_rows_csv(run.path("tables", "gradcheck.csv"), ["check", "n", "max_rel_err", "tol", "passed"],
                      [[r["check"], r["n"], r["max_rel_err"], r["tol"], r["passed"]] for r in rows])
    plotting.gradcheck(rows, run.path("figures", "gradcheck.png"))
    for r in rows:
        run.check(f"gradcheck {r['check']} (n={r['n']}) < {r['tol']:g}", r["passed"], f"{r['max_rel_err']:.2e}")
    print(f"{len(res)} checks in {wall:.1f} s")


def cmd_bench_scaling(args, cfg, run: RunDir) -> None:
    algo = cfg["bench.algo"]
    env_cfg = cf.env_config(cfg)
    over = cf.trainer_overrides(cfg, algo)
    counts = list(cfg["bench.env_counts"])
    thr = [n for n in cfg["bench.throughput_counts"] if n not in counts]
    rows = eb.scaling_benchmark(counts + thr, algo, cfg["seed"], cfg["train.episodes"], cfg["train.max_wall_s"],
                                env_cfg, over, throughput_only=thr, stop_streak=cfg["bench.stop_streak"])
    eb.write_rows_csv(run.path("tables", "scaling.csv"), eb.SCALING_COLUMNS, [r.values() for r in rows])
    for r in rows:
        run.metric("scaling", env_count=r.env_count, algorithm=r.algorithm, seed=r.seed, rounds=r.episodes,
                   env_steps=r.env_steps, final_rmse_pos=r.final_rmse_pos, converged_round=r.converged_round)
        run.timing[f"n{r.env_count}"] = {"steps_per_s": r.steps_per_s, "wall_100ep_s": r.wall_100ep_s,
                                         "convergence_s": r.convergence_s}
    plotting.scaling(rows, run.path("figures", "scaling.png"))
    main_rows = [r for r in rows if r.env_count in counts]
    sps = [r.steps_per_s for r in main_rows]
    conv = [math.inf if r.convergence_s is None else r.convergence_s for r in main_rows]
    run.check("steps/s non-decreasing in env count", all(b >= a for a, b in zip(sps, sps[1:])),
              ", ".join(f"{r.env_count}:{r.steps_per_s:.0f}" for r in main_rows))
    run.check("convergence wall-clock non-increasing in env count", all(b <= a for a, b in zip(conv, conv[1:])),
              ", ".join(f"{r.env_count}:{c:.0f}" for r, c in zip(main_rows, conv)))
    for r in rows:
        if r.env_count in thr:
            run.check(f"N={r.env_count} runs", r.env_steps > 0, f"{r.steps_per_s:.0f} steps/s")


def cmd_ablate(args, cfg, run: RunDir) -> None:
    algo = cfg["bench.algo"]
    env_cfg = cf.env_config(cfg)
    over = cf.trainer_overrides(cfg, algo)
    over.pop("seed")
    rows, trained = eb.attitude_repr_ablation(algo, cfg["seed"], env_cfg, over, cfg["train.eval_envs"])
    eb.write_rows_csv(run.path("tables", "ablation.csv"), eb.ABLATION_COLUMNS, rows)
    for row in rows:
        run.metric("ablation", **dict(zip(eb.ABLATION_COLUMNS, row)))
        policy, log = trained[row[0]]
        ckpt.save(run.path("checkpoints", f"{algo}_{row[0]}.ckpt"), policy, algo, cf.config_hash(cfg),
                  {"attitude_repr": row[0]})
        run.timing[row[0]] = log.elapsed()
    plotting.ablation(rows, run.path("figures", "ablation.png"))
    run.check("every attitude representation converges", all(r[4] for r in rows),
              ", ".join(f"{r[0]}: {r[2]:.3f} m / {r[3]:.2f} deg" for r in rows))
    atts = [r[3] for r in rows]
    run.check("orientation RMSEs within 50% of each other", max(atts) <= 1.5 * min(atts),
              f"max/min = {max(atts) / min(atts):.3f}")


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "mpc-eval": cmd_mpc_eval,
    "gradcheck": cmd_gradcheck,
    "bench-scaling": cmd_bench_scaling,
    "ablate-attitude": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file (flat key = value lines)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one setting; repeatable; wins over --config")
    common.add_argument("--out", help="run directory (default runs/<command>-<config hash>)")
    common.add_argument("--check", action="store_true", help="exit 1 if an acceptance assertion fails")

    p = argparse.ArgumentParser(prog="auvrl", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", parents=[common], help="train a policy")
    t.add_argument("--algo", required=True, choices=sorted(trainers.ALGOS))
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a suite")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--suite", required=True, choices=eb.SUITES)
    e.add_argument("--algo", choices=sorted(trainers.ALGOS), help="refuse checkpoints written by another algorithm")
    m = sub.add_parser("mpc-eval", parents=[common], help="evaluate the MPC baseline on a suite")
    m.add_argument("--suite", required=True, choices=eb.SUITES)
    sub.add_parser("gradcheck", parents=[common], help="finite-difference checks of every adjoint")
    sub.add_parser("bench-scaling", parents=[common], help="throughput and convergence against env count")
    sub.add_parser("ablate-attitude", parents=[common], help="train once per attitude representation")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        cfg = cf.load(args.config, args.set)
    except (cf.ConfigError, OSError) as e:
        print(f"auvrl: config error: {e}", file=sys.stderr)
        return 2
    out = args.out or os.path.join("runs", f"{args.command}-{cf.config_hash(cfg)[:10]}")
    run = RunDir(out, cfg, argv)
    status = 0
    try:
        with thread_limit():
            COMMANDS[args.command](args, cfg, run)
    except (ckpt.CheckpointError, ValueError, OSError) as e:
        print(f"auvrl: error: {e}", file=sys.stderr)
        status = 2
    if status == 0 and not run.all_passed and (args.check or args.command == "gradcheck"):
        status = 1
    run.finish(status)
    return status


if __name__ == "__main__":
    sys.exit(main())
