"""Row-wise numeric kernels used by the tensor core.

Two interchangeable backends are provided: numba ``@njit`` loops and plain
numpy expressions. The backend is chosen once at import from the
``BLRP_KERNELS`` environment variable (``numba`` or ``numpy``); when unset,
numba is used if it imports. :func:`set_backend` switches at runtime, which
the tests and the kernel benchmark rely on.

All kernels take and return 2-D float64 arrays laid out as (rows, cols); the
callers flatten leading axes.
"""
import math
import os

import numpy as np
from scipy.special import erf

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------

def _np_softmax_fwd(x, live):
    z = np.where(live, x, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _np_softmax_bwd(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def _np_layer_norm_fwd(x, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd[:, 0]


def _np_layer_norm_bwd(dxhat, xhat, rstd):
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    return rstd[:, None] * (dxhat - m1 - xhat * m2)


def _np_gelu_fwd(x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * cdf, cdf


def _np_gelu_bwd(x, cdf, g):
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


# ---------------------------------------------------------------------------
# numba backend
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_softmax_fwd(x, live):
        n, m = x.shape
        out = np.zeros((n, m))
        for i in range(n):
            mx = -np.inf
            for j in range(m):
                if live[i, j] and x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(m):
                if live[i, j]:
                    e = math.exp(x[i, j] - mx)
                    out[i, j] = e
                    s += e
            inv = 1.0 / s
            for j in range(m):
                out[i, j] *= inv
        return out

    @njit(cache=True)
    def _nb_softmax_bwd(y, g):
        n, m = y.shape
        out = np.empty((n, m))
        for i in range(n):
            dot = 0.0
            for j in range(m):
                dot += g[i, j] * y[i, j]
            for j in range(m):
                out[i, j] = y[i, j] * (g[i, j] - dot)
        return out

    @njit(cache=True)
    def _nb_layer_norm_fwd(x, eps):
        n, m = x.shape
        xhat = np.empty((n, m))
        rstd = np.empty(n)
        for i in range(n):
            mu = 0.0
            for j in range(m):
                mu += x[i, j]
            mu /= m
            var = 0.0
            for j in range(m):
                c = x[i, j] - mu
                xhat[i, j] = c
                var += c * c
            r = 1.0 / math.sqrt(var / m + eps)
            rstd[i] = r
            for j in range(m):
                xhat[i, j] *= r
        return xhat, rstd

    @njit(cache=True)
    def _nb_layer_norm_bwd(dxhat, xhat, rstd):
        n, m = xhat.shape
        out = np.empty((n, m))
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(m):
                m1 += dxhat[i, j]
                m2 += dxhat[i, j] * xhat[i, j]
            m1 /= m
            m2 /= m
            for j in range(m):
                out[i, j] = rstd[i] * (dxhat[i, j] - m1 - xhat[i, j] * m2)
        return out

    @njit(cache=True)
    def _nb_gelu_fwd(x):
        n, m = x.shape
        out = np.empty((n, m))
        cdf = np.empty((n, m))
        for i in range(n):
            for j in range(m):
                v = x[i, j]
                c = 0.5 * (1.0 + math.erf(v * _INV_SQRT2))
                cdf[i, j] = c
                out[i, j] = v * c
        return out, cdf

    @njit(cache=True)
    def _nb_gelu_bwd(x, cdf, g):
        n, m = x.shape
        out = np.empty((n, m))
        for i in range(n):
            for j in range(m):
                v = x[i, j]
                pdf = _INV_SQRT2PI * math.exp(-0.5 * v * v)
                out[i, j] = g[i, j] * (cdf[i, j] + v * pdf)
        return out


_BACKENDS = {
    "numpy": dict(
        softmax_fwd=_np_softmax_fwd,
        softmax_bwd=_np_softmax_bwd,
        layer_norm_fwd=_np_layer_norm_fwd,
        layer_norm_bwd=_np_layer_norm_bwd,
        gelu_fwd=_np_gelu_fwd,
        gelu_bwd=_np_gelu_bwd,
    )
}
if HAVE_NUMBA:
    _BACKENDS["numba"] = dict(
        softmax_fwd=_nb_softmax_fwd,
        softmax_bwd=_nb_softmax_bwd,
        layer_norm_fwd=_nb_layer_norm_fwd,
        layer_norm_bwd=_nb_layer_norm_bwd,
        gelu_fwd=_nb_gelu_fwd,
        gelu_bwd=_nb_gelu_bwd,
    )

softmax_fwd = softmax_bwd = layer_norm_fwd = layer_norm_bwd = None
gelu_fwd = gelu_bwd = None
BACKEND = None


def available_backends():
    return sorted(_BACKENDS)


def set_backend(name):
    """Route the module-level kernel names to ``name``'s implementations."""
    global BACKEND, softmax_fwd, softmax_bwd, layer_norm_fwd, layer_norm_bwd
    global gelu_fwd, gelu_bwd
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    k = _BACKENDS[name]
    softmax_fwd = k["softmax_fwd"]
    softmax_bwd = k["softmax_bwd"]
    layer_norm_fwd = k["layer_norm_fwd"]
    layer_norm_bwd = k["layer_norm_bwd"]
    gelu_fwd = k["gelu_fwd"]
    gelu_bwd = k["gelu_bwd"]
    BACKEND = name


set_backend(os.environ.get("BLRP_KERNELS", "numba" if HAVE_NUMBA else "numpy"))
