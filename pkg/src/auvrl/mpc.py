"""Linear-MPC baseline on the Fossen-form model.

Each control step linearizes the RK4-discretized Fossen dynamics once around
the current state and the previous command, condenses the move-blocked
horizon into a QP over the first ``H_c`` inputs, and solves it with an ADMM
operator-splitting solver.

State vector (12): ``eta = (x, y, z, roll, pitch, yaw)`` in the world frame
and ``nu = (u, v, w, p, q, r)`` in the body frame. The simulator's quaternion
state is converted at the controller boundary (``state_to_x``).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import hydrodyn as hd
from . import so3

log = logging.getLogger(__name__)

NX, NU = 12, 6


# ---------------------------------------------------------------------------
# QP solver


@dataclass
class QPResult:
    x: np.ndarray
    status: str  # "solved", "solved_polished", "max_iter"
    iters: int
    prim_res: float
    dual_res: float
    y: np.ndarray | None = None

    @property
    def ok(self) -> bool:
        return self.status.startswith("solved")


def _qp_residuals(P, q, A, x, z, y):
    prim = float(np.max(np.abs(A @ x - z), initial=0.0))
    dual = float(np.max(np.abs(P @ x + q + A.T @ y), initial=0.0))
    return prim, dual


def solve_qp(P, q, lb=None, ub=None, A=None, l=None, u=None, Aeq=None, beq=None, *,
             rho: float = 1.0, alpha: float = 1.6, sigma: float = 1e-6, tol: float = 1e-6,
             max_iter: int = 4000, x0=None, polish: bool = True) -> QPResult:
    """Minimize ``0.5 x'Px + q'x`` subject to ``lb <= x <= ub``, ``l <= Ax <= u``, ``Aeq x = beq``.

    Operator-splitting iteration on the stacked constraint ``l <= C x <= u``
    with fixed penalty ``rho`` and over-relaxation ``alpha``; stops when the
    primal and dual residuals (infinity norm) are both below ``tol``. A final
    active-set polish solves the KKT system of the detected active set and is
    kept when it is feasible and lowers the residuals.
    """
    P = np.asarray(P, dtype=float)
    q = np.asarray(q, dtype=float)
    n = q.size
    rows, lo, hi = [], [], []
    if lb is not None or ub is not None:
        lbv = np.full(n, -np.inf) if lb is None else np.broadcast_to(np.asarray(lb, float), (n,))
        ubv = np.full(n, np.inf) if ub is None else np.broadcast_to(np.asarray(ub, float), (n,))
        keep = np.isfinite(lbv) | np.isfinite(ubv)
        rows.append(np.eye(n)[keep])
        lo.append(lbv[keep])
        hi.append(ubv[keep])
    if A is not None:
        A = np.atleast_2d(np.asarray(A, float))
        rows.append(A)
        lo.append(np.full(A.shape[0], -np.inf) if l is None else np.asarray(l, float))
        hi.append(np.full(A.shape[0], np.inf) if u is None else np.asarray(u, float))
    if Aeq is not None:
        Aeq = np.atleast_2d(np.asarray(Aeq, float))
        rows.append(Aeq)
        lo.append(np.asarray(beq, float))
        hi.append(np.asarray(beq, float))
    C = np.vstack(rows) if rows else np.zeros((0, n))
    lo = np.concatenate(lo) if lo else np.zeros(0)
    hi = np.concatenate(hi) if hi else np.zeros(0)
    if np.any(lo > hi):
        raise ValueError("infeasible bounds: lower > upper")
    m = C.shape[0]
    eq = np.isclose(lo, hi)
    # stiffer penalty on equality rows, as is usual for this splitting
    rho_v = np.where(eq, 1e3 * rho, rho)

    K = P + sigma * np.eye(n) + C.T @ (rho_v[:, None] * C)
    fac = cho_factor(K)
    x = np.zeros(n) if x0 is None else np.asarray(x0, float).copy()
    z = np.clip(C @ x, lo, hi)
    y = np.zeros(m)
    best = None
    status = "max_iter"
    it = 0
    prim = dual = np.inf
    for it in range(1, max_iter + 1):
        xt = cho_solve(fac, sigma * x - q + C.T @ (rho_v * z - y))
        zt = C @ xt
        x = alpha * xt + (1.0 - alpha) * x
        zr = alpha * zt + (1.0 - alpha) * z
        z_new = np.clip(zr + y / rho_v, lo, hi)
        y = y + rho_v * (zr - z_new)
        z = z_new
        if it % 5 == 0 or it == max_iter:
            prim, dual = _qp_residuals(P, q, C, x, z, y)
            score = max(prim, dual)
            if best is None or score < best[0]:
                best = (score, x.copy(), z.copy(), y.copy(), prim, dual)
            if prim < tol and dual < tol:
                status = "solved"
                break
    if status != "solved" and best is not None:
        _, x, z, y, prim, dual = best
    res = QPResult(x, status, it, prim, dual, y)
    if polish and m > 0:
        res = _polish(P, q, C, lo, hi, res, tol)
    elif polish and m == 0:
        xs = np.linalg.solve(P + 1e-12 * np.eye(n), -q)
        res = QPResult(xs, "solved_polished", it, 0.0, float(np.max(np.abs(P @ xs + q))), y)
    return res


def _polish(P, q, C, lo, hi, res: QPResult, tol: float) -> QPResult:
    y = res.y
    Cx = C @ res.x
    act_lo = (y < -tol) | (np.abs(Cx - lo) < 1e-7)
    act_hi = (y > tol) | (np.abs(Cx - hi) < 1e-7)
    act_lo &= np.isfinite(lo)
    act_hi &= np.isfinite(hi) & ~act_lo
    act = act_lo | act_hi
    n = P.shape[0]
    Ca = C[act]
    b = np.where(act_lo, lo, hi)[act]
    k = Ca.shape[0]
    KKT = np.zeros((n + k, n + k))
    KKT[:n, :n] = P + 1e-12 * np.eye(n)
    KKT[:n, n:] = Ca.T
    KKT[n:, :n] = Ca
    rhs = np.concatenate([-q, b])
    try:
        sol = np.linalg.solve(KKT, rhs)
    except np.linalg.LinAlgError:
        return res
    xs = sol[:n]
    ys = np.zeros(C.shape[0])
    ys[act] = sol[n:]
    feas = np.all(C @ xs >= lo - 1e-9) and np.all(C @ xs <= hi + 1e-9)
    sign_ok = np.all(ys[act_lo] <= 1e-9) and np.all(ys[act_hi] >= -1e-9)
    if not (feas and sign_ok):
        return res
    z = np.clip(C @ xs, lo, hi)
    prim, dual = _qp_residuals(P, q, C, xs, z, ys)
    if max(prim, dual) <= max(res.prim_res, res.dual_res):
        return QPResult(xs, "solved_polished", res.iters, prim, dual, ys)
    return res


def qp_objective(P, q, x) -> float:
    return float(0.5 * x @ P @ x + q @ x)


def projected_gradient_qp(P, q, lb, ub, tol: float = 1e-10, max_iter: int = 200000):
    """Box-constrained QP by accelerated projected gradient (a reference solver)."""
    P = np.asarray(P, float)
    q = np.asarray(q, float)
    L = float(np.max(np.linalg.eigvalsh(P)))
    x = np.clip(np.zeros_like(q), lb, ub)
    yk = x.copy()
    t = 1.0
    for _ in range(max_iter):
        x_new = np.clip(yk - (P @ yk + q) / L, lb, ub)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        yk = x_new + (t - 1.0) / t_new * (x_new - x)
        if np.max(np.abs(x_new - x)) < tol:
            x = x_new
            break
        x, t = x_new, t_new
    return x


# ---------------------------------------------------------------------------
# linearization


def forward_jacobian(f, x, h: float = 1e-30):
    """Jacobian of ``f`` at ``x`` by complex-step forward-mode columns.

    ``f`` must broadcast over a leading batch axis. Exact to rounding for
    real-analytic functions (no cancellation, unlike finite differences).
    """
    x = np.asarray(x, dtype=float)
    # one batched evaluation, row i carrying the perturbation of input i
    X = x.astype(complex)[None, :] + 1j * h * np.eye(x.size)
    return (np.imag(f(X)) / h).T


def linearize(x, u, fp: hd.FossenParams, dt: float):
    """``(A, B, c)`` with ``f(x', u') ~ A x' + B u' + c`` around ``(x, u)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    hd._check_pitch(x[:6])
    A = forward_jacobian(lambda xx: hd.fossen_step(xx, u.astype(complex), fp, dt), x)
    B = forward_jacobian(lambda uu: hd.fossen_step(np.broadcast_to(x.astype(complex), (len(uu), x.size)),
                                                   uu, fp, dt), u)
    f0 = hd.fossen_step(x, u, fp, dt)
    c = f0 - A @ x - B @ u
    return A, B, c


# ---------------------------------------------------------------------------
# MPC


def _default_q():
    return np.diag([10.0] * 3 + [5.0] * 3 + [1.0] * 6)


@dataclass(eq=False)
class MpcConfig:
    Q: np.ndarray = field(default_factory=_default_q)
    R: np.ndarray = field(default_factory=lambda: 0.1 * np.eye(NU))
    Q_H: np.ndarray = field(default_factory=_default_q)
    H: int = 20
    H_c: int = 5
    dt: float = 0.1
    x_lo: np.ndarray = field(default_factory=lambda: np.array(
        [-np.inf] * 3 + [-1.2, -1.2, -np.inf] + [-2.0] * 3 + [-3.0] * 3))
    x_hi: np.ndarray = field(default_factory=lambda: np.array(
        [np.inf] * 3 + [1.2, 1.2, np.inf] + [2.0] * 3 + [3.0] * 3))
    u_lo: np.ndarray = field(default_factory=lambda: np.array([-30.0] * 3 + [-5.0] * 3))
    u_hi: np.ndarray = field(default_factory=lambda: np.array([30.0] * 3 + [5.0] * 3))

    def __post_init__(self):
        for name in ("Q", "Q_H", "R"):
            M = np.atleast_2d(np.asarray(getattr(self, name), float))
            if M.shape[0] != M.shape[1] or not np.allclose(M, M.T):
                raise ValueError(f"mpc.{name} must be a symmetric square matrix")
            ev = np.linalg.eigvalsh(M)
            if name == "R" and ev.min() <= 0:
                raise ValueError("mpc.R must be positive definite")
            if ev.min() < -1e-12:
                raise ValueError(f"mpc.{name} must be positive semidefinite")
            setattr(self, name, M)
        if not 1 <= self.H_c <= self.H:
            raise ValueError("need 1 <= H_c <= H")
        if self.dt <= 0:
            raise ValueError("mpc.dt must be positive")

    @classmethod
    def for_vehicle(cls, vp: hd.VehicleParams, **kw) -> "MpcConfig":
        s = vp.action_scale
        return cls(u_lo=-s, u_hi=s.copy(), **kw)


@dataclass
class MpcProblem:
    A: list
    B: list
    c: list
    P: np.ndarray
    q: np.ndarray
    G: list  # x_k = G[k] U + h[k]
    h: list
    lb: np.ndarray
    ub: np.ndarray
    C: np.ndarray  # state-bound rows on U
    l: np.ndarray
    u: np.ndarray
    warm: np.ndarray | None = None


def block_inputs(U, H: int, H_c: int, nu: int):
    """Full input sequence ``(H, nu)`` with inputs frozen after ``H_c``."""
    U = np.asarray(U).reshape(H_c, nu)
    idx = np.minimum(np.arange(H), H_c - 1)
    return U[idx]


def build_problem(A_list, B_list, c_list, x0, refs, cfg: MpcConfig, warm=None) -> MpcProblem:
    """Condense the move-blocked horizon into a QP over ``U = (u_0, ..., u_{H_c-1})``.

    ``refs`` has ``H + 1`` reference states; stage ``k`` costs
    ``0.5 (e_k' Q e_k + u_k' R u_k)`` and the terminal state ``e_H' Q_H e_H``.
    """
    H, Hc = cfg.H, cfg.H_c
    nx = np.asarray(x0).size
    nu = B_list[0].shape[1]
    nvar = Hc * nu
    refs = np.asarray(refs, float)
    if refs.shape[0] < H + 1:
        raise ValueError(f"reference slice needs {H + 1} states, got {refs.shape[0]}")
    G = [np.zeros((nx, nvar))]
    h = [np.asarray(x0, float)]
    P = np.zeros((nvar, nvar))
    qv = np.zeros(nvar)
    for k in range(H):
        E = np.zeros((nu, nvar))
        j = min(k, Hc - 1)
        E[:, j * nu:(j + 1) * nu] = np.eye(nu)
        # stage cost on u_k (the state term of stage 0 is a constant)
        P += E.T @ cfg.R @ E
        if k > 0:
            P += G[k].T @ cfg.Q @ G[k]
            qv += G[k].T @ cfg.Q @ (h[k] - refs[k])
        G.append(A_list[k] @ G[k] + B_list[k] @ E)
        h.append(A_list[k] @ h[k] + c_list[k])
    # terminal term has no 1/2
    P += 2.0 * G[H].T @ cfg.Q_H @ G[H]
    qv += 2.0 * G[H].T @ cfg.Q_H @ (h[H] - refs[H])
    P = 0.5 * (P + P.T)
    lb = np.tile(np.broadcast_to(cfg.u_lo, (nu,)), Hc)
    ub = np.tile(np.broadcast_to(cfg.u_hi, (nu,)), Hc)
    rows, lo, hi = [], [], []
    x_lo = np.broadcast_to(np.asarray(cfg.x_lo, float), (nx,)) if cfg.x_lo is not None else np.full(nx, -np.inf)
    x_hi = np.broadcast_to(np.asarray(cfg.x_hi, float), (nx,)) if cfg.x_hi is not None else np.full(nx, np.inf)
    keep = np.isfinite(x_lo) | np.isfinite(x_hi)
    for k in range(1, H + 1):
        if keep.any():
            rows.append(G[k][keep])
            lo.append(x_lo[keep] - h[k][keep])
            hi.append(x_hi[keep] - h[k][keep])
    C = np.vstack(rows) if rows else np.zeros((0, nvar))
    l = np.concatenate(lo) if lo else np.zeros(0)
    u = np.concatenate(hi) if hi else np.zeros(0)
    return MpcProblem(list(A_list), list(B_list), list(c_list), P, qv, G, h, lb, ub, C, l, u, warm)


def solve_problem(prob: MpcProblem, **kw) -> QPResult:
    # state bounds may be violated by the current state already; relax the
    # affected rows instead of declaring the QP infeasible
    l = np.minimum(prob.l, prob.u)
    return solve_qp(prob.P, prob.q, prob.lb, prob.ub, A=prob.C if prob.C.size else None,
                    l=l if prob.C.size else None, u=prob.u if prob.C.size else None,
                    x0=prob.warm, **kw)


def state_to_x(s: hd.BodyState) -> np.ndarray:
    """Quaternion body state -> 12-vector ``(p, roll, pitch, yaw, v, omega)``."""
    rpy = hd.quat_to_euler(s.q)
    return np.concatenate([np.asarray(s.p, float), rpy, np.asarray(s.v, float), np.asarray(s.omega, float)])


def pose_to_x(p, q) -> np.ndarray:
    return np.concatenate([np.asarray(p, float), hd.quat_to_euler(q), np.zeros(6)])


def unwrap_refs(refs, x):
    """Shift reference yaw by multiples of 2 pi to sit next to the current yaw."""
    refs = np.array(refs, dtype=float, copy=True)
    d = hd.wrap_angle(refs[:, 5] - x[5])
    refs[:, 5] = x[5] + d
    # keep consecutive references continuous
    refs[:, 5] = x[5] + np.concatenate([[d[0]], d[0] + np.cumsum(hd.wrap_angle(np.diff(d)))])
    return refs


@dataclass
class MpcStep:
    u: np.ndarray
    plan: np.ndarray  # (H, nu) move-blocked input plan
    result: QPResult
    fallback: bool


def mpc_step(x, refs, cfg: MpcConfig, fp: hd.FossenParams, u_prev=None, warm=None) -> MpcStep:
    """One receding-horizon solve; returns the first input clamped to bounds."""
    x = np.asarray(x, float)
    u_prev = np.zeros(NU) if u_prev is None else np.asarray(u_prev, float)
    A, B, c = linearize(x, u_prev, fp, cfg.dt)
    refs = unwrap_refs(refs, x)
    prob = build_problem([A] * cfg.H, [B] * cfg.H, [c] * cfg.H, x, refs, cfg, warm)
    res = solve_problem(prob)
    if not res.ok or not np.all(np.isfinite(res.x)):
        log.warning("MPC solve failed (%s); reusing previous input", res.status)
        plan = np.tile(u_prev, (cfg.H, 1))
        return MpcStep(u_prev, plan, res, True)
    U = np.clip(res.x, prob.lb, prob.ub)
    plan = block_inputs(U, cfg.H, cfg.H_c, NU)
    return MpcStep(plan[0].copy(), plan, res, False)


def shift_warm_start(plan: np.ndarray, H_c: int) -> np.ndarray:
    """Next step's initial guess: plan advanced by one input."""
    U = plan[:H_c]
    return np.concatenate([U[1:], U[-1:]], axis=0).ravel()


class MpcController:
    """Stateful controller: ``__call__(state, refs) -> wrench``.

    ``refs`` is a callable ``t -> (p_ref, q_ref)`` sampled every ``cfg.dt``.
    """

    def __init__(self, cfg: MpcConfig, fp: hd.FossenParams):
        self.cfg = cfg
        self.fp = fp
        self.u_prev = np.zeros(NU)
        self.warm = None
        self.failures = 0

    def reset(self):
        self.u_prev = np.zeros(NU)
        self.warm = None
        self.failures = 0

    def reference_slice(self, ref_fn, t: float) -> np.ndarray:
        out = []
        for k in range(self.cfg.H + 1):
            p, q = ref_fn(t + k * self.cfg.dt)
            out.append(pose_to_x(p, so3.normalize(q)))
        return np.array(out)

    def __call__(self, s: hd.BodyState, ref_fn, t: float) -> np.ndarray:
        x = state_to_x(s)
        step = mpc_step(x, self.reference_slice(ref_fn, t), self.cfg, self.fp, self.u_prev, self.warm)
        if step.fallback:
            self.failures += 1
        self.u_prev = step.u
        self.warm = shift_warm_start(step.plan, self.cfg.H_c)
        return step.u
