"""Dense networks, policy heads and the Adam optimizer, on plain numpy.

Every forward pass can return a cache; the matching ``*_backward`` function
is its exact vector-Jacobian product. Training runs in float32, gradient
checks in float64 (pass ``dtype``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
LN_EPS = 1e-8
LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# primitives


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def elu_backward(x, gy):
    return gy * np.where(x > 0, 1.0, np.exp(np.minimum(x, 0))).astype(gy.dtype)


# BLAS picks different kernels for different row counts; padding the rows to a
# fixed block multiple keeps each output row bitwise independent of the batch.
ROW_BLOCK = 16


def rows_matmul(x, W):
    n = x.shape[0]
    pad = (-n) % ROW_BLOCK
    if pad:
        x = np.concatenate([x, np.zeros((pad, x.shape[1]), dtype=x.dtype)])
        return (x @ W)[:n]
    return x @ W


def linear(x, W, b):
    return rows_matmul(x, W) + b


def linear_backward(x, W, gy):
    """Returns ``(gx, gW, gb)`` for ``y = x W + b``."""
    return rows_matmul(gy, W.T), x.T @ gy, gy.sum(axis=0)


def layer_norm(x, gain, bias, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def layer_norm_backward(cache, gain, gy):
    xhat, inv = cache
    ggain = (gy * xhat).sum(axis=0)
    gbias = gy.sum(axis=0)
    gxhat = gy * gain
    n = xhat.shape[-1]
    gx = inv / n * (n * gxhat - gxhat.sum(-1, keepdims=True) - xhat * (gxhat * xhat).sum(-1, keepdims=True))
    return gx, ggain, gbias


def dropout_mask(rng: np.random.Generator, shape, rate: float, dtype) -> np.ndarray | None:
    if rate <= 0.0:
        return None
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    keep = rng.random(shape) >= rate
    return (keep / (1.0 - rate)).astype(dtype)


def dropout_layernorm_forward(gain, bias, x, rng=None, rate=0.0):
    """Inverted dropout followed by layer normalization with learned gain/bias."""
    mask = dropout_mask(rng, x.shape, rate, x.dtype) if rng is not None else None
    xd = x * mask if mask is not None else x
    y, ln_cache = layer_norm(xd, gain, bias)
    return y, (mask, ln_cache)


# ---------------------------------------------------------------------------
# MLP


@dataclass
class MlpParams:
    weights: list
    biases: list
    ln_gain: list = field(default_factory=list)
    ln_bias: list = field(default_factory=list)
    activation: str = "elu"

    @property
    def layer_norm(self) -> bool:
        return bool(self.ln_gain)

    @property
    def sizes(self) -> list:
        return [self.weights[0].shape[0]] + [W.shape[1] for W in self.weights]

    def arrays(self) -> list:
        return [*self.weights, *self.biases, *self.ln_gain, *self.ln_bias]

    def names(self) -> list:
        n = len(self.weights)
        m = len(self.ln_gain)
        return ([f"W{i}" for i in range(n)] + [f"b{i}" for i in range(n)]
                + [f"ln_g{i}" for i in range(m)] + [f"ln_b{i}" for i in range(m)])

    def with_arrays(self, arrays) -> "MlpParams":
        n = len(self.weights)
        m = len(self.ln_gain)
        arrays = list(arrays)
        return MlpParams(arrays[:n], arrays[n:2 * n], arrays[2 * n:2 * n + m],
                         arrays[2 * n + m:2 * n + 2 * m], self.activation)

    def copy(self) -> "MlpParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    @property
    def dtype(self):
        return self.weights[0].dtype


def orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float = 1.0) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


def init_mlp(sizes, rng: np.random.Generator, final_scale: float = 1.0, layer_norm: bool = False,
             dtype=np.float32) -> MlpParams:
    weights, biases = [], []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        gain = final_scale if i == len(sizes) - 2 else 1.0
        weights.append(orthogonal(rng, a, b, gain).astype(dtype))
        biases.append(np.zeros(b, dtype=dtype))
    ln_g, ln_b = [], []
    if layer_norm:
        for h in sizes[1:-1]:
            ln_g.append(np.ones(h, dtype=dtype))
            ln_b.append(np.zeros(h, dtype=dtype))
    return MlpParams(weights, biases, ln_g, ln_b)


def mlp_forward(params: MlpParams, x, rng=None, dropout: float = 0.0, cache: bool = False):
    """Affine + (dropout, layer norm) + ELU stack with a linear output layer.

    Dropout only applies when ``rng`` is given and the net has layer norm.
    """
    x = np.asarray(x, dtype=params.dtype)
    if x.shape[-1] != params.weights[0].shape[0]:
        raise ShapeError(f"input width {x.shape[-1]} != {params.weights[0].shape[0]}")
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None]
    layers = []
    h = x
    n = len(params.weights)
    for i in range(n):
        W, b = params.weights[i], params.biases[i]
        z = linear(h, W, b)
        if i == n - 1:
            layers.append((h, None, None, None))
            h = z
            break
        ln_cache = mask = None
        if params.layer_norm:
            mask = dropout_mask(rng, z.shape, dropout, z.dtype) if rng is not None else None
            zd = z * mask if mask is not None else z
            z, ln_cache = layer_norm(zd, params.ln_gain[i], params.ln_bias[i])
        layers.append((h, z, ln_cache, mask))
        h = elu(z)
    y = h[0] if squeeze else h
    return (y, (layers, squeeze)) if cache else y


def mlp_backward(params: MlpParams, cache, gy):
    """VJP of ``mlp_forward``: returns ``(param grads in arrays() order, gx)``."""
    layers, squeeze = cache
    gy = np.asarray(gy, dtype=params.dtype)
    if squeeze:
        gy = gy[None]
    n = len(params.weights)
    gW = [None] * n
    gb = [None] * n
    gg = [None] * len(params.ln_gain)
    gbb = [None] * len(params.ln_bias)
    g = gy
    for i in reversed(range(n)):
        h_in, z, ln_cache, mask = layers[i]
        if i < n - 1:
            g = elu_backward(z, g)
            if params.layer_norm:
                g, gg[i], gbb[i] = layer_norm_backward(ln_cache, params.ln_gain[i], g)
                if mask is not None:
                    g = g * mask
        g, gW[i], gb[i] = linear_backward(h_in, params.weights[i], g)
    gx = g[0] if squeeze else g
    return [*gW, *gb, *gg, *gbb], gx


# ---------------------------------------------------------------------------
# Gaussian policies


@dataclass
class GaussianPolicy:
    """Diagonal Gaussian policy.

    ``log_std`` is a free vector (PPO, SHAC) or, when ``None``, the network
    emits ``2 * act_dim`` outputs with a state-dependent log-std and actions are
    tanh-squashed (DroQ).
    """

    net: MlpParams
    log_std: np.ndarray | None = None
    squash: bool = False

    @property
    def act_dim(self) -> int:
        out = self.net.weights[-1].shape[1]
        return out if self.log_std is not None else out // 2

    def arrays(self) -> list:
        return self.net.arrays() + ([self.log_std] if self.log_std is not None else [])

    def with_arrays(self, arrays) -> "GaussianPolicy":
        arrays = list(arrays)
        if self.log_std is not None:
            return GaussianPolicy(self.net.with_arrays(arrays[:-1]), arrays[-1], self.squash)
        return GaussianPolicy(self.net.with_arrays(arrays), None, self.squash)

    def copy(self) -> "GaussianPolicy":
        return self.with_arrays([a.copy() for a in self.arrays()])


def init_policy(obs_dim, act_dim, hidden, rng, state_dependent_std=False, init_log_std=-0.5,
                dtype=np.float32) -> GaussianPolicy:
    out = 2 * act_dim if state_dependent_std else act_dim
    net = init_mlp([obs_dim, *hidden, out], rng, final_scale=0.01, dtype=dtype)
    if state_dependent_std:
        return GaussianPolicy(net, None, squash=True)
    return GaussianPolicy(net, np.full(act_dim, init_log_std, dtype=dtype), squash=False)


def policy_dist(pol: GaussianPolicy, obs, cache=False):
    """``(mean, log_std)`` with the log-std clamped to ``[LOG_STD_MIN, LOG_STD_MAX]``."""
    out, c = mlp_forward(pol.net, obs, cache=True)
    if pol.log_std is not None:
        mean = out
        raw = np.broadcast_to(pol.log_std, mean.shape)
    else:
        d = pol.act_dim
        mean, raw = out[..., :d], out[..., d:]
    log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    if cache:
        return mean, log_std, (c, raw)
    return mean, log_std


def policy_dist_backward(pol: GaussianPolicy, cache, g_mean, g_log_std):
    """Gradients of the policy parameters given cotangents on ``(mean, log_std)``."""
    c, raw = cache
    g_ls = g_log_std * ((raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX))
    if pol.log_std is not None:
        grads, _ = mlp_backward(pol.net, c, g_mean)
        g_vec = g_ls.reshape(-1, g_ls.shape[-1]).sum(axis=0).astype(pol.log_std.dtype)
        return grads + [g_vec]
    grads, _ = mlp_backward(pol.net, c, np.concatenate([g_mean, g_ls], axis=-1))
    return grads


def gaussian_log_prob(x, mean, log_std):
    z = (x - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std, axis=-1) - 0.5 * mean.shape[-1] * LOG_2PI


def log1m_tanh_sq(u):
    """``log(1 - tanh(u)^2)`` computed stably."""
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def squash(u):
    """``tanh`` kept strictly inside ``(-1, 1)`` even where it rounds to +-1."""
    lim = 1.0 - np.finfo(np.asarray(u).dtype).eps
    return np.clip(np.tanh(u), -lim, lim)


def policy_sample(pol: GaussianPolicy, obs, rng: np.random.Generator):
    """Sample an action; returns ``(action, log_prob)``."""
    mean, log_std = policy_dist(pol, obs)
    eps = rng.standard_normal(mean.shape).astype(mean.dtype)
    u = mean + np.exp(log_std) * eps
    logp = gaussian_log_prob(u, mean, log_std)
    if not pol.squash:
        return u, logp
    return squash(u), logp - np.sum(log1m_tanh_sq(u), axis=-1)


def policy_log_prob(pol: GaussianPolicy, obs, action):
    mean, log_std = policy_dist(pol, obs)
    action = np.asarray(action, dtype=mean.dtype)
    if not pol.squash:
        return gaussian_log_prob(action, mean, log_std)
    a = np.clip(action, -1.0 + 1e-7, 1.0 - 1e-7) if action.dtype == np.float64 else \
        np.clip(action, -1.0 + 1e-6, 1.0 - 1e-6)
    u = np.arctanh(a)
    return gaussian_log_prob(u, mean, log_std) - np.sum(log1m_tanh_sq(u), axis=-1)


def policy_mean_action(pol: GaussianPolicy, obs):
    mean, _ = policy_dist(pol, obs)
    return squash(mean) if pol.squash else np.clip(mean, -1.0, 1.0)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    return AdamState([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params],
                     0, lr, beta1, beta2, eps)


def adam_update(state: AdamState, params, grads):
    """One bias-corrected Adam step. Returns ``(new_state, new_params)``.

    Raises NonFiniteGradientError (leaving everything untouched) on NaN/Inf.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer moments differ in length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"grad shape {g.shape} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError("non-finite gradient")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    ms, vs, out = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.astype(p.dtype, copy=False)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        ms.append(m)
        vs.append(v)
        out.append((p - step).astype(p.dtype, copy=False))
    return AdamState(ms, vs, t, state.lr, b1, b2, state.eps), out


def global_norm(grads) -> float:
    return float(math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))


def clip_by_global_norm(grads, max_norm: float):
    norm = global_norm(grads)
    if max_norm is None or max_norm <= 0 or norm <= max_norm or not math.isfinite(norm):
        return grads, norm
    s = max_norm / (norm + 1e-12)
    return [g * np.asarray(s, dtype=g.dtype) for g in grads], norm
