"""Hot sparse kernels.

Each kernel has a numba ``@njit`` implementation and a pure-numpy twin.  The
numba path is used when numba imports cleanly, unless ``SPARSEQ_DISABLE_NUMBA``
is set to a truthy value.  Both paths are always importable so the benchmark
and the tests can compare them directly.
"""
import os

import numpy as np

_DISABLED = os.environ.get("SPARSEQ_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")

try:  # pragma: no cover - exercised implicitly by the environment
    import numba as nb

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    nb = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and not _DISABLED


def _njit(func):
    if not HAVE_NUMBA:
        return func
    return nb.njit(cache=True)(func)


# --- compressed-row sparse times dense ------------------------------------


def spmm_numpy(indptr, indices, data, dense, block=4096):
    n_rows = indptr.shape[0] - 1
    out = np.zeros((n_rows, dense.shape[1]), dtype=np.float64)
    counts = np.diff(indptr)
    start = 0
    # row blocks of roughly `block` nonzeros keep the gathered products cache-sized
    while start < n_rows:
        stop = int(np.searchsorted(indptr, indptr[start] + block, side="right")) - 1
        stop = min(max(stop, start + 1), n_rows)
        lo, hi = indptr[start], indptr[stop]
        if hi > lo:
            prods = data[lo:hi, None] * dense[indices[lo:hi]]
            nonempty = counts[start:stop] > 0
            out[start:stop][nonempty] = np.add.reduceat(prods, indptr[start:stop][nonempty] - lo, axis=0)
        start = stop
    return out


@_njit
def spmm_numba(indptr, indices, data, dense):
    n_rows = indptr.shape[0] - 1
    n_cols = dense.shape[1]
    out = np.zeros((n_rows, n_cols), dtype=np.float64)
    for r in range(n_rows):
        for jj in range(indptr[r], indptr[r + 1]):
            c = indices[jj]
            v = data[jj]
            for k in range(n_cols):
                out[r, k] += v * dense[c, k]
    return out


# --- row-wise softmax cross-entropy and its gradient -----------------------


def softmax_xent_numpy(logits, labels, rows):
    z = logits[rows]
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(s)
    y = labels[rows]
    nll = -logp[np.arange(rows.shape[0]), y]
    grad = np.zeros_like(logits, dtype=np.float64)
    g = ez / s
    g[np.arange(rows.shape[0]), y] -= 1.0
    grad[rows] = g / rows.shape[0]
    return nll.mean(), grad


@_njit
def softmax_xent_numba(logits, labels, rows):
    n_sel = rows.shape[0]
    n_cls = logits.shape[1]
    grad = np.zeros(logits.shape, dtype=np.float64)
    total = 0.0
    for ii in range(n_sel):
        r = rows[ii]
        m = logits[r, 0]
        for c in range(1, n_cls):
            if logits[r, c] > m:
                m = logits[r, c]
        s = 0.0
        for c in range(n_cls):
            s += np.exp(logits[r, c] - m)
        log_s = np.log(s)
        y = labels[r]
        total += -(logits[r, y] - m - log_s)
        for c in range(n_cls):
            grad[r, c] = np.exp(logits[r, c] - m - log_s) / n_sel
        grad[r, y] -= 1.0 / n_sel
    return total / n_sel, grad


if USE_NUMBA:
    spmm = spmm_numba
    softmax_xent = softmax_xent_numba
else:
    spmm = spmm_numpy
    softmax_xent = softmax_xent_numpy


def backend_name():
    return "numba" if USE_NUMBA else "numpy"
