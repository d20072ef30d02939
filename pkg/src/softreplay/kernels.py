"""Hot numeric kernels, each in a numba and a pure-numpy build.

The public names bind to the numba build unless ``SOFTREPLAY_NUMBA=0`` is set
in the environment or numba is not importable.  Both builds stay importable
side by side so ``benchmarks/bench_kernels.py`` can time them against each
other.  Matrix backward products (transposed GEMMs) stay on numpy BLAS in
both builds; numba gains nothing there.

All kernels expect C-contiguous float64 arrays.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

JIT_ENABLED = HAVE_NUMBA and os.environ.get("SOFTREPLAY_NUMBA", "1") != "0"


# ---------------------------------------------------------------- numpy build

def softmax_rows_np(z):
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_xent_np(z, t):
    """Mean cross entropy of target rows t against softmax(z); returns (loss, probs)."""
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    loss = -(t * logp).sum() / z.shape[0]
    return loss, np.exp(logp)


def relu_fwd_np(x):
    return np.maximum(x, 0.0)


def relu_bwd_np(x, g):
    return np.where(x > 0.0, g, 0.0)


def affine_fwd_np(x, w, b):
    return x @ w + b


def ema_anchor_np(live, old, beta, onehot):
    """((1-beta)*live + beta*old + onehot) / 2, all operands row distributions."""
    return ((1.0 - beta) * live + beta * old + onehot) / 2.0


# ---------------------------------------------------------------- numba build

if HAVE_NUMBA:

    @njit(cache=True)
    def softmax_rows_nb(z):
        n, c = z.shape
        out = np.empty((n, c))
        for i in range(n):
            m = z[i, 0]
            for j in range(1, c):
                if z[i, j] > m:
                    m = z[i, j]
            s = 0.0
            for j in range(c):
                e = np.exp(z[i, j] - m)
                out[i, j] = e
                s += e
            for j in range(c):
                out[i, j] /= s
        return out

    @njit(cache=True)
    def softmax_xent_nb(z, t):
        n, c = z.shape
        p = np.empty((n, c))
        loss = 0.0
        for i in range(n):
            m = z[i, 0]
            for j in range(1, c):
                if z[i, j] > m:
                    m = z[i, j]
            s = 0.0
            for j in range(c):
                s += np.exp(z[i, j] - m)
            lse = np.log(s)
            for j in range(c):
                logp = z[i, j] - m - lse
                p[i, j] = np.exp(logp)
                loss -= t[i, j] * logp
        return loss / n, p

    @njit(cache=True)
    def relu_fwd_nb(x):
        out = x.ravel().copy()
        for i in range(out.size):
            if out[i] < 0.0:
                out[i] = 0.0
        return out.reshape(x.shape)

    @njit(cache=True)
    def relu_bwd_nb(x, g):
        xf = x.ravel()
        gf = g.ravel()
        out = np.empty(xf.size)
        for i in range(xf.size):
            out[i] = gf[i] if xf[i] > 0.0 else 0.0
        return out.reshape(x.shape)

    @njit(cache=True)
    def affine_fwd_nb(x, w, b):
        out = np.dot(x, w)
        n, c = out.shape
        for i in range(n):
            for j in range(c):
                out[i, j] += b[j]
        return out

    @njit(cache=True)
    def ema_anchor_nb(live, old, beta, onehot):
        n, c = live.shape
        out = np.empty((n, c))
        for i in range(n):
            for j in range(c):
                out[i, j] = ((1.0 - beta) * live[i, j] + beta * old[i, j] + onehot[i, j]) / 2.0
        return out


# ------------------------------------------------------------- public binding

if JIT_ENABLED:
    softmax_rows = softmax_rows_nb
    softmax_xent = softmax_xent_nb
    relu_fwd = relu_fwd_nb
    relu_bwd = relu_bwd_nb
    affine_fwd = affine_fwd_nb
    ema_anchor = ema_anchor_nb
else:
    softmax_rows = softmax_rows_np
    softmax_xent = softmax_xent_np
    relu_fwd = relu_fwd_np
    relu_bwd = relu_bwd_np
    affine_fwd = affine_fwd_np
    ema_anchor = ema_anchor_np


def affine_bwd(x, w, g):
    """Gradients of x @ w + b: (dx, dw, db).  Strided BLAS, numpy in both builds."""
    return g @ w.T, x.T @ g, g.sum(axis=0)
