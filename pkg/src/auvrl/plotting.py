"""PNG figures for the report commands (non-interactive backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def training_curve(records, path, title: str = "training") -> None:
    ep = [r["episode"] for r in records]
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.4))
    ax[0].plot(ep, [r["rmse_pos_m"] for r in records], marker=".")
    ax[0].axhline(0.25, color="grey", ls="--", lw=0.8)
    ax[0].set(xlabel="episode round", ylabel="position RMSE [m]", title=title)
    ax[1].plot(ep, [r["rmse_att_deg"] for r in records], marker=".", color="tab:orange")
    ax[1].axhline(15.0, color="grey", ls="--", lw=0.8)
    ax[1].set(xlabel="episode round", ylabel="orientation RMSE [deg]")
    _save(fig, path)


def tracking(results, path, title: str = "") -> None:
    """Top view, altitude and error traces for one or more episode results."""
    fig = plt.figure(figsize=(11, 3.6))
    a0 = fig.add_subplot(1, 3, 1)
    a1 = fig.add_subplot(1, 3, 2)
    a2 = fig.add_subplot(1, 3, 3)
    ref = results[0]
    a0.plot(ref.p_ref[:, 0], ref.p_ref[:, 1], "k--", lw=1, label="reference")
    a1.plot(ref.t, ref.p_ref[:, 2], "k--", lw=1)
    for r in results:
        a0.plot(r.p[:, 0], r.p[:, 1], lw=1.2, label=r.name)
        a1.plot(r.t, r.p[:, 2], lw=1.2)
        a2.plot(r.t, r.pos_err, lw=1.2, label=r.name)
    a0.set(xlabel="x [m]", ylabel="y [m]", title=title or "top view")
    a0.set_aspect("equal", adjustable="datalim")
    a0.legend(fontsize=7)
    a1.set(xlabel="t [s]", ylabel="z [m]")
    a2.set(xlabel="t [s]", ylabel="position error [m]")
    _save(fig, path)


def scaling(rows, path) -> None:
    n = np.array([r.env_count for r in rows])
    sps = np.array([r.steps_per_s for r in rows])
    conv = [r.convergence_s for r in rows]
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.4))
    ax[0].loglog(n, sps, marker="o")
    ax[0].set(xlabel="parallel envs", ylabel="env steps / s")
    m = [i for i, c in enumerate(conv) if c is not None]
    if m:
        ax[1].semilogx(n[m], [conv[i] for i in m], marker="o")
    ax[1].set(xlabel="parallel envs", ylabel="time to converge [s]")
    _save(fig, path)


def ablation(rows, path) -> None:
    names = [r[0] for r in rows]
    fig, ax = plt.subplots(1, 2, figsize=(8, 3.2))
    ax[0].bar(names, [r[2] for r in rows])
    ax[0].set(ylabel="position RMSE [m]")
    ax[1].bar(names, [r[3] for r in rows], color="tab:orange")
    ax[1].set(ylabel="orientation RMSE [deg]")
    _save(fig, path)


def gradcheck(rows, path) -> None:
    fig, ax = plt.subplots(figsize=(8, 3.6))
    errs = [max(r["max_rel_err"], 1e-18) for r in rows]
    ax.barh([r["check"] for r in rows], errs)
    ax.set_xscale("log")
    ax.set(xlabel="worst relative error")
    ax.tick_params(axis="y", labelsize=7)
    _save(fig, path)
