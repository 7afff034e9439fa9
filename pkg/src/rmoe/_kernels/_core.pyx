# Compiled training kernels. Semantics mirror numpy_backend.py: float32
# in/out, float64 accumulation in reductions. The optimizer steps are pure
# float32 elementwise arithmetic in the same operation order as the numpy
# backend, so those match bitwise (the build disables FP contraction).

import numpy as np

from libc.math cimport tanh, exp, log, sqrt, sqrtf, pow

NAME = "cython"

cdef double C0 = 0.7978845608028654  # sqrt(2/pi)
cdef double C1 = 0.044715


def gelu_fwd(const float[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.float32)
    cdef float[::1] y = out
    cdef double xv, inner
    for i in range(n):
        xv = <double> x[i]
        inner = C0 * (xv + C1 * xv * xv * xv)
        y[i] = <float> (0.5 * xv * (1.0 + tanh(inner)))
    return out


def gelu_bwd(const float[::1] x, const float[::1] dy):
    cdef Py_ssize_t i, n = x.shape[0]
    out = np.empty(n, dtype=np.float32)
    cdef float[::1] dx = out
    cdef double xv, inner, t, dinner, grad
    for i in range(n):
        xv = <double> x[i]
        inner = C0 * (xv + C1 * xv * xv * xv)
        t = tanh(inner)
        dinner = C0 * (1.0 + 3.0 * C1 * xv * xv)
        grad = 0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t * t) * dinner
        dx[i] = <float> ((<double> dy[i]) * grad)
    return out


def layernorm_fwd(const float[:, ::1] x, const float[::1] gamma,
                  const float[::1] beta, double eps):
    cdef Py_ssize_t r, c, rows = x.shape[0], cols = x.shape[1]
    y_arr = np.empty((rows, cols), dtype=np.float32)
    mean_arr = np.empty(rows, dtype=np.float64)
    rstd_arr = np.empty(rows, dtype=np.float64)
    cdef float[:, ::1] y = y_arr
    cdef double[::1] mean = mean_arr
    cdef double[::1] rstd = rstd_arr
    cdef double acc, mu, d, var, rs
    for r in range(rows):
        acc = 0.0
        for c in range(cols):
            acc += <double> x[r, c]
        mu = acc / cols
        acc = 0.0
        for c in range(cols):
            d = (<double> x[r, c]) - mu
            acc += d * d
        var = acc / cols
        rs = 1.0 / sqrt(var + eps)
        mean[r] = mu
        rstd[r] = rs
        for c in range(cols):
            y[r, c] = <float> (((<double> x[r, c]) - mu) * rs
                               * (<double> gamma[c]) + (<double> beta[c]))
    return y_arr, mean_arr, rstd_arr


def layernorm_bwd(const float[:, ::1] x, const float[::1] gamma,
                  const double[::1] mean, const double[::1] rstd,
                  const float[:, ::1] dy):
    cdef Py_ssize_t r, c, rows = x.shape[0], cols = x.shape[1]
    dx_arr = np.empty((rows, cols), dtype=np.float32)
    dgamma64 = np.zeros(cols, dtype=np.float64)
    dbeta64 = np.zeros(cols, dtype=np.float64)
    cdef float[:, ::1] dx = dx_arr
    cdef double[::1] dg = dgamma64
    cdef double[::1] db = dbeta64
    cdef double mu, rs, xhat, dxhat, m1, m2, dyv
    for r in range(rows):
        mu = mean[r]
        rs = rstd[r]
        m1 = 0.0
        m2 = 0.0
        for c in range(cols):
            xhat = ((<double> x[r, c]) - mu) * rs
            dxhat = (<double> dy[r, c]) * (<double> gamma[c])
            m1 += dxhat
            m2 += dxhat * xhat
        m1 /= cols
        m2 /= cols
        for c in range(cols):
            xhat = ((<double> x[r, c]) - mu) * rs
            dxhat = (<double> dy[r, c]) * (<double> gamma[c])
            dx[r, c] = <float> (rs * (dxhat - m1 - xhat * m2))
            dyv = <double> dy[r, c]
            dg[c] += dyv * xhat
            db[c] += dyv
    return dx_arr, dgamma64.astype(np.float32), dbeta64.astype(np.float32)


def softmax_fwd(const float[:, ::1] x):
    cdef Py_ssize_t r, c, rows = x.shape[0], cols = x.shape[1]
    out = np.empty((rows, cols), dtype=np.float32)
    cdef float[:, ::1] y = out
    cdef double mx, acc, v
    # per-row scratch in double
    buf = np.empty(cols, dtype=np.float64)
    cdef double[::1] e = buf
    for r in range(rows):
        mx = <double> x[r, 0]
        for c in range(1, cols):
            v = <double> x[r, c]
            if v > mx:
                mx = v
        acc = 0.0
        for c in range(cols):
            v = exp((<double> x[r, c]) - mx)
            e[c] = v
            acc += v
        for c in range(cols):
            y[r, c] = <float> (e[c] / acc)
    return out


def softmax_bwd(const float[:, ::1] y, const float[:, ::1] dy):
    cdef Py_ssize_t r, c, rows = y.shape[0], cols = y.shape[1]
    out = np.empty((rows, cols), dtype=np.float32)
    cdef float[:, ::1] dx = out
    cdef double dot
    for r in range(rows):
        dot = 0.0
        for c in range(cols):
            dot += (<double> y[r, c]) * (<double> dy[r, c])
        for c in range(cols):
            dx[r, c] = <float> ((<double> y[r, c])
                                * ((<double> dy[r, c]) - dot))
    return out


def cross_entropy_fwd(const float[:, ::1] logits, const Py_ssize_t[::1] labels):
    cdef Py_ssize_t r, c, rows = logits.shape[0], cols = logits.shape[1]
    probs_arr = np.empty((rows, cols), dtype=np.float32)
    cdef float[:, ::1] probs = probs_arr
    cdef double mx, acc, v, total
    buf = np.empty(cols, dtype=np.float64)
    cdef double[::1] e = buf
    total = 0.0
    for r in range(rows):
        mx = <double> logits[r, 0]
        for c in range(1, cols):
            v = <double> logits[r, c]
            if v > mx:
                mx = v
        acc = 0.0
        for c in range(cols):
            v = exp((<double> logits[r, c]) - mx)
            e[c] = v
            acc += v
        for c in range(cols):
            probs[r, c] = <float> (e[c] / acc)
        total += log(acc) - ((<double> logits[r, labels[r]]) - mx)
    return total / rows, probs_arr


def cross_entropy_bwd(const float[:, ::1] probs, const Py_ssize_t[::1] labels,
                      double dloss):
    cdef Py_ssize_t r, c, rows = probs.shape[0], cols = probs.shape[1]
    out = np.empty((rows, cols), dtype=np.float32)
    cdef float[:, ::1] dx = out
    cdef double scale = dloss / rows
    cdef double v
    for r in range(rows):
        for c in range(cols):
            v = <double> probs[r, c]
            if c == labels[r]:
                v -= 1.0
            dx[r, c] = <float> (v * scale)
    return out


def topk_mask(const float[:, ::1] p, Py_ssize_t k):
    # k passes of running-max with strict '>' keeps the lowest index on ties,
    # matching a stable descending argsort
    cdef Py_ssize_t r, c, j, best, rows = p.shape[0], cols = p.shape[1]
    out = np.zeros((rows, cols), dtype=np.uint8)
    cdef unsigned char[:, ::1] mask = out
    cdef float bv
    for r in range(rows):
        for j in range(k):
            best = -1
            bv = 0.0
            for c in range(cols):
                if mask[r, c]:
                    continue
                if best < 0 or p[r, c] > bv:
                    best = c
                    bv = p[r, c]
            mask[r, best] = 1
    return out


def adamw_step(float[::1] p, const float[::1] g, float[::1] m, float[::1] v,
               Py_ssize_t t, double lr, double beta1, double beta2,
               double eps, double wd):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef float b1 = <float> beta1
    cdef float b2 = <float> beta2
    cdef float omb1 = <float> 1.0 - b1
    cdef float omb2 = <float> 1.0 - b2
    cdef float c1 = <float> (1.0 - pow(beta1, <double> t))
    cdef float c2 = <float> (1.0 - pow(beta2, <double> t))
    cdef float epsf = <float> eps
    cdef float lrf = <float> lr
    cdef float lrwd = <float> (lr * wd)
    cdef float mi, vi, upd
    for i in range(n):
        mi = b1 * m[i] + omb1 * g[i]
        vi = b2 * v[i] + omb2 * (g[i] * g[i])
        m[i] = mi
        v[i] = vi
        upd = (mi / c1) / (sqrtf(vi / c2) + epsf)
        p[i] = p[i] - (lrf * upd + lrwd * p[i])


def sgd_step(float[::1] p, const float[::1] g, double lr):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef float lrf = <float> lr
    for i in range(n):
        p[i] = p[i] - lrf * g[i]
