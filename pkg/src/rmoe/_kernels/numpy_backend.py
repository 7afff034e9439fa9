"""Pure-numpy implementations of the hot training kernels.

Reference backend: always available, and the one golden files are pinned to.
All kernels take float32 C-contiguous arrays, accumulate reductions in
float64, and return float32. The compiled backend in ``_core.pyx`` mirrors
these semantics; ``tests/test_kernels.py`` holds the two together.
"""

from __future__ import annotations

import numpy as np

NAME = "numpy"

_GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_C1 = 0.044715


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    inner = _GELU_C0 * (x64 + _GELU_C1 * x64 * x64 * x64)
    return (0.5 * x64 * (1.0 + np.tanh(inner))).astype(np.float32)


def gelu_bwd(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    inner = _GELU_C0 * (x64 + _GELU_C1 * x64 * x64 * x64)
    t = np.tanh(inner)
    dinner = _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x64 * x64)
    grad = 0.5 * (1.0 + t) + 0.5 * x64 * (1.0 - t * t) * dinner
    return (dy.astype(np.float64) * grad).astype(np.float32)


def layernorm_fwd(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    x64 = x.astype(np.float64)
    mean = x64.mean(axis=1)
    var = x64.var(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x64 - mean[:, None]) * rstd[:, None]
    y = (xhat * gamma.astype(np.float64) + beta.astype(np.float64)).astype(np.float32)
    return y, mean, rstd


def layernorm_bwd(x, gamma, mean, rstd, dy):
    x64 = x.astype(np.float64)
    dy64 = dy.astype(np.float64)
    xhat = (x64 - mean[:, None]) * rstd[:, None]
    dxhat = dy64 * gamma.astype(np.float64)
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (rstd[:, None] * (dxhat - m1 - xhat * m2)).astype(np.float32)
    dgamma = (dy64 * xhat).sum(axis=0).astype(np.float32)
    dbeta = dy64.sum(axis=0).astype(np.float32)
    return dx, dgamma, dbeta


def softmax_fwd(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    z = x64 - x64.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).astype(np.float32)


def softmax_bwd(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    y64 = y.astype(np.float64)
    dy64 = dy.astype(np.float64)
    dot = (y64 * dy64).sum(axis=1, keepdims=True)
    return (y64 * (dy64 - dot)).astype(np.float32)


def cross_entropy_fwd(logits: np.ndarray, labels: np.ndarray):
    z = logits.astype(np.float64)
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    sums = e.sum(axis=1, keepdims=True)
    probs = (e / sums).astype(np.float32)
    rows = np.arange(z.shape[0])
    logp = (z - zmax)[rows, labels] - np.log(sums[:, 0])
    loss = float(-logp.mean())
    return loss, probs


def cross_entropy_bwd(probs: np.ndarray, labels: np.ndarray, dloss: float) -> np.ndarray:
    b = probs.shape[0]
    d = probs.astype(np.float64)
    d[np.arange(b), labels] -= 1.0
    return (d * (dloss / b)).astype(np.float32)


def topk_mask(p: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -p keeps the lowest expert index first among ties
    order = np.argsort(-p, axis=1, kind="stable")[:, :k]
    mask = np.zeros(p.shape, dtype=np.uint8)
    np.put_along_axis(mask, order, 1, axis=1)
    return mask


def adamw_step(p, g, m, v, t, lr, beta1, beta2, eps, wd):
    # pure float32 elementwise arithmetic: bitwise identical across backends
    b1 = np.float32(beta1)
    b2 = np.float32(beta2)
    one = np.float32(1.0)
    m[...] = b1 * m + (one - b1) * g
    v[...] = b2 * v + (one - b2) * (g * g)
    c1 = np.float32(1.0 - beta1**t)
    c2 = np.float32(1.0 - beta2**t)
    upd = (m / c1) / (np.sqrt(v / c2) + np.float32(eps))
    p[...] = p - (np.float32(lr) * upd + np.float32(lr * wd) * p)


def sgd_step(p, g, lr):
    p[...] = p - np.float32(lr) * g
