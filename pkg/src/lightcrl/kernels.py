"""Row-wise numeric kernels behind the autograd ops.

Every kernel exists twice: a loop form compiled with numba (``_nb_*``) and a
vectorised numpy form (``_np_*``).  The public names are bound once at import
according to :data:`lightcrl._jit.USE_NUMBA`; both forms agree to rounding
and are each deterministic.  All kernels take C-contiguous 2-D arrays and
operate along the last axis.
"""

import numpy as np

from ._jit import USE_NUMBA, njit

# ---------------------------------------------------------------- numpy path


def _np_softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax_rows_backward(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def _np_log_softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _np_log_softmax_rows_backward(y, g):
    return g - np.exp(y) * g.sum(axis=1, keepdims=True)


def _np_layer_norm(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    mu += (x - mu).mean(axis=1, keepdims=True)  # correction pass: a constant row centres to exactly 0
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def _np_layer_norm_backward(g, xhat, rstd, gain):
    gx_hat = g * gain
    d = xhat.shape[1]
    a = gx_hat.sum(axis=1, keepdims=True) / d
    b = (gx_hat * xhat).sum(axis=1, keepdims=True) / d
    gx = (gx_hat - a - xhat * b) * rstd[:, None]
    return gx, (g * xhat).sum(axis=0), g.sum(axis=0)


def _np_row_norms(x):
    return np.sqrt((x * x).sum(axis=1))


def _np_l2_normalize_backward(y, norms, g):
    return (g - y * (g * y).sum(axis=1, keepdims=True)) / norms[:, None]


def _np_partner_ranks(sim):
    n = sim.shape[0]
    diag = np.diagonal(sim)[:, None]
    ahead = sim > diag
    ahead |= (sim == diag) & (np.arange(n)[None, :] < np.arange(n)[:, None])
    return ahead.sum(axis=1).astype(np.int64)


# ---------------------------------------------------------------- numba path


@njit
def _nb_softmax_rows(x):
    m, n = x.shape
    out = np.empty_like(x)
    for i in range(m):
        mx = x[i, 0]
        for j in range(1, n):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(n):
            e = np.exp(x[i, j] - mx)
            out[i, j] = e
            s += e
        for j in range(n):
            out[i, j] = out[i, j] / s
    return out


@njit
def _nb_softmax_rows_backward(y, g):
    m, n = y.shape
    out = np.empty_like(y)
    for i in range(m):
        dot = 0.0
        for j in range(n):
            dot += g[i, j] * y[i, j]
        for j in range(n):
            out[i, j] = y[i, j] * (g[i, j] - dot)
    return out


@njit
def _nb_log_softmax_rows(x):
    m, n = x.shape
    out = np.empty_like(x)
    for i in range(m):
        mx = x[i, 0]
        for j in range(1, n):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(n):
            s += np.exp(x[i, j] - mx)
        lse = np.log(s)
        for j in range(n):
            out[i, j] = (x[i, j] - mx) - lse
    return out


@njit
def _nb_log_softmax_rows_backward(y, g):
    m, n = y.shape
    out = np.empty_like(y)
    for i in range(m):
        s = 0.0
        for j in range(n):
            s += g[i, j]
        for j in range(n):
            out[i, j] = g[i, j] - np.exp(y[i, j]) * s
    return out


@njit
def _nb_layer_norm(x, gain, bias, eps):
    m, d = x.shape
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(m, dtype=x.dtype)
    for i in range(m):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        corr = 0.0
        for j in range(d):
            corr += x[i, j] - mu
        mu += corr / d
        var = 0.0
        for j in range(d):
            c = x[i, j] - mu
            var += c * c
        var /= d
        r = 1.0 / np.sqrt(var + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            out[i, j] = h * gain[j] + bias[j]
    return out, xhat, rstd


@njit
def _nb_layer_norm_backward(g, xhat, rstd, gain):
    m, d = g.shape
    gx = np.empty_like(g)
    ggain = np.zeros(d, dtype=g.dtype)
    gbias = np.zeros(d, dtype=g.dtype)
    for i in range(m):
        a = 0.0
        b = 0.0
        for j in range(d):
            gh = g[i, j] * gain[j]
            a += gh
            b += gh * xhat[i, j]
            ggain[j] += g[i, j] * xhat[i, j]
            gbias[j] += g[i, j]
        a /= d
        b /= d
        for j in range(d):
            gx[i, j] = (g[i, j] * gain[j] - a - xhat[i, j] * b) * rstd[i]
    return gx, ggain, gbias


@njit
def _nb_row_norms(x):
    m, d = x.shape
    out = np.empty(m, dtype=x.dtype)
    for i in range(m):
        s = 0.0
        for j in range(d):
            s += x[i, j] * x[i, j]
        out[i] = np.sqrt(s)
    return out


@njit
def _nb_l2_normalize_backward(y, norms, g):
    m, d = y.shape
    out = np.empty_like(y)
    for i in range(m):
        dot = 0.0
        for j in range(d):
            dot += g[i, j] * y[i, j]
        for j in range(d):
            out[i, j] = (g[i, j] - y[i, j] * dot) / norms[i]
    return out


@njit
def _nb_partner_ranks(sim):
    n = sim.shape[0]
    out = np.zeros(n, dtype=np.int64)
    for i in range(n):
        s = sim[i, i]
        r = 0
        for j in range(n):
            v = sim[i, j]
            if v > s or (v == s and j < i):
                r += 1
        out[i] = r
    return out


NUMPY_KERNELS = {
    "softmax_rows": _np_softmax_rows,
    "softmax_rows_backward": _np_softmax_rows_backward,
    "log_softmax_rows": _np_log_softmax_rows,
    "log_softmax_rows_backward": _np_log_softmax_rows_backward,
    "layer_norm": _np_layer_norm,
    "layer_norm_backward": _np_layer_norm_backward,
    "row_norms": _np_row_norms,
    "l2_normalize_backward": _np_l2_normalize_backward,
    "partner_ranks": _np_partner_ranks,
}

NUMBA_KERNELS = {
    "softmax_rows": _nb_softmax_rows,
    "softmax_rows_backward": _nb_softmax_rows_backward,
    "log_softmax_rows": _nb_log_softmax_rows,
    "log_softmax_rows_backward": _nb_log_softmax_rows_backward,
    "layer_norm": _nb_layer_norm,
    "layer_norm_backward": _nb_layer_norm_backward,
    "row_norms": _nb_row_norms,
    "l2_normalize_backward": _nb_l2_normalize_backward,
    "partner_ranks": _nb_partner_ranks,
}

BACKEND = "numba" if USE_NUMBA else "numpy"


def _bind(name):
    npf = NUMPY_KERNELS[name]
    if not USE_NUMBA:
        return npf
    nbf = NUMBA_KERNELS[name]

    # numba has no extended-precision floats; those go to numpy
    def kernel(x, *args):
        if x.dtype.itemsize > 8:
            return npf(x, *args)
        return nbf(x, *args)

    kernel.__name__ = name
    kernel.__doc__ = npf.__doc__
    return kernel


softmax_rows = _bind("softmax_rows")
softmax_rows_backward = _bind("softmax_rows_backward")
log_softmax_rows = _bind("log_softmax_rows")
log_softmax_rows_backward = _bind("log_softmax_rows_backward")
layer_norm = _bind("layer_norm")
layer_norm_backward = _bind("layer_norm_backward")
row_norms = _bind("row_norms")
l2_normalize_backward = _bind("l2_normalize_backward")
partner_ranks = _bind("partner_ranks")
