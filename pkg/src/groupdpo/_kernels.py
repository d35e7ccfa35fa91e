"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and ``GROUPDPO_DISABLE_NUMBA``
is unset (or ``0``).  Both paths are kept importable as ``numpy_kernels`` and
``numba_kernels`` so the benchmark and the tests can compare them directly.

The prefix-mean and scatter kernels do their additions in the same order on
both paths, so forward passes (and therefore generated datasets) are
bit-identical whichever backend is active.  The pairwise kernel only feeds
training-time coefficients and agrees with the fallback to rounding error.
"""

import os

import numpy as np


def _flag(name):
    return os.environ.get(name, "").strip().lower() not in ("", "0", "false", "no")


class _NumpyKernels:
    name = "numpy"

    @staticmethod
    def causal_mean(x):
        # x: (B, T, D); row t becomes the mean of rows 0..t
        counts = np.arange(1, x.shape[1] + 1, dtype=x.dtype)[None, :, None]
        return np.cumsum(x, axis=1) / counts

    @staticmethod
    def causal_mean_backward(g):
        counts = np.arange(1, g.shape[1] + 1, dtype=g.dtype)[None, :, None]
        scaled = g / counts
        # reverse cumulative sum along time
        return np.cumsum(scaled[:, ::-1, :], axis=1)[:, ::-1, :]

    @staticmethod
    def scatter_add_rows(out, idx, rows):
        # out[idx[k]] += rows[k], applied in k order
        np.add.at(out, idx, rows)
        return out

    @staticmethod
    def allpairs_loss_grad(up, un):
        d = up[:, None] - un[None, :]
        scale = 1.0 / (up.size * un.size)
        # -log sigmoid(d) == softplus(-d) == logaddexp(0, -d)
        loss = np.sum(np.logaddexp(0.0, -d)) * scale
        q = -_sigmoid_np(-d)
        return loss, q.sum(axis=1) * scale, -q.sum(axis=0) * scale


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


numpy_kernels = _NumpyKernels()
numba_kernels = None

if not _flag("GROUPDPO_DISABLE_NUMBA"):
    try:
        from numba import njit
    except ImportError:  # pragma: no cover - numba is an optional accelerator
        njit = None

    if njit is not None:

        @njit(cache=True, nogil=True)
        def _causal_mean(x):
            B, T, D = x.shape
            out = np.empty_like(x)
            for b in range(B):
                for k in range(D):
                    acc = x.dtype.type(0.0)
                    for t in range(T):
                        acc += x[b, t, k]
                        out[b, t, k] = acc / (t + 1)
            return out

        @njit(cache=True, nogil=True)
        def _causal_mean_backward(g):
            B, T, D = g.shape
            out = np.empty_like(g)
            for b in range(B):
                for k in range(D):
                    acc = g.dtype.type(0.0)
                    for t in range(T - 1, -1, -1):
                        acc += g[b, t, k] / (t + 1)
                        out[b, t, k] = acc
            return out

        @njit(cache=True, nogil=True)
        def _scatter_add_rows(out, idx, rows):
            for k in range(idx.shape[0]):
                r = idx[k]
                for j in range(rows.shape[1]):
                    out[r, j] += rows[k, j]
            return out

        @njit(cache=True, nogil=True)
        def _allpairs(up, un):
            P = up.shape[0]
            N = un.shape[0]
            scale = 1.0 / (P * N)
            gp = np.zeros(P)
            gn = np.zeros(N)
            loss = 0.0
            for i in range(P):
                for j in range(N):
                    d = up[i] - un[j]
                    if d >= 0:
                        e = np.exp(-d)
                        loss += np.log1p(e)
                        q = -e / (1.0 + e)
                    else:
                        e = np.exp(d)
                        loss += -d + np.log1p(e)
                        q = -1.0 / (1.0 + e)
                    gp[i] += q
                    gn[j] -= q
            return loss * scale, gp * scale, gn * scale

        class _NumbaKernels:
            name = "numba"

            @staticmethod
            def causal_mean(x):
                return _causal_mean(np.ascontiguousarray(x))

            @staticmethod
            def causal_mean_backward(g):
                return _causal_mean_backward(np.ascontiguousarray(g))

            @staticmethod
            def scatter_add_rows(out, idx, rows):
                return _scatter_add_rows(out, np.ascontiguousarray(idx, dtype=np.int64),
                                         np.ascontiguousarray(rows))

            @staticmethod
            def allpairs_loss_grad(up, un):
                return _allpairs(np.ascontiguousarray(up, dtype=np.float64),
                                 np.ascontiguousarray(un, dtype=np.float64))

        numba_kernels = _NumbaKernels()


kernels = numba_kernels if numba_kernels is not None else numpy_kernels
BACKEND = kernels.name
