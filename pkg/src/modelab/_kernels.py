"""Hot numeric kernels with a numba path and a pure-numpy path.

The numba path is used when numba imports and ``MODELAB_NUMBA`` is not set
to ``0``. Both paths compute the same quantities; ``tests/test_kernels.py``
checks them against each other and ``benchmarks/bench_kernels.py`` times
them.
"""
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

USE_NUMBA = numba is not None and os.environ.get("MODELAB_NUMBA", "1") != "0"


# --- pure numpy -------------------------------------------------------------

def _pairwise_dist_np(x, y):
    diff = x[:, None, :] - y[None, :, :]
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _batch_hard_indices_np(x, labels):
    d = _pairwise_dist_np(x, x)
    same = labels[:, None] == labels[None, :]
    eye = np.eye(len(labels), dtype=bool)
    pos = np.where(same & ~eye, d, -np.inf)
    neg = np.where(~same, d, np.inf)
    return np.argmax(pos, axis=1), np.argmin(neg, axis=1)


def _masked_argmin_np(anchors, candidates, mask):
    d = np.where(mask, _pairwise_dist_np(anchors, candidates), np.inf)
    return np.argmin(d, axis=1)


def _nearest_center_np(values, centers):
    # argmin returns the first minimum, i.e. ties go to the lower index
    return np.argmin(np.abs(values[:, None] - centers[None, :]), axis=1)


def _nearest_mean_np(x, means):
    d = x[:, None, :] - means[None, :, :]
    return np.argmin(np.sum(d * d, axis=-1), axis=1)


def _adam_update_np(p, g, m, v, lr, b1, b2, eps, t):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    mhat = m / (1.0 - b1 ** t)
    vhat = v / (1.0 - b2 ** t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


# --- numba ------------------------------------------------------------------

if numba is not None:
    _njit = numba.njit(cache=True, nogil=True)

    @_njit
    def _pairwise_dist_nb(x, y):
        n, k = x.shape[0], y.shape[0]
        out = np.empty((n, k))
        for i in range(n):
            for j in range(k):
                s = 0.0
                for c in range(x.shape[1]):
                    t = x[i, c] - y[j, c]
                    s += t * t
                out[i, j] = np.sqrt(s)
        return out

    @_njit
    def _batch_hard_indices_nb(x, labels):
        n = x.shape[0]
        d = _pairwise_dist_nb(x, x)
        pos = np.zeros(n, dtype=np.int64)
        neg = np.zeros(n, dtype=np.int64)
        for i in range(n):
            best_p = -np.inf
            best_n = np.inf
            for j in range(n):
                if labels[j] == labels[i]:
                    if j != i and d[i, j] > best_p:
                        best_p = d[i, j]
                        pos[i] = j
                elif d[i, j] < best_n:
                    best_n = d[i, j]
                    neg[i] = j
        return pos, neg

    @_njit
    def _masked_argmin_nb(anchors, candidates, mask):
        d = _pairwise_dist_nb(anchors, candidates)
        out = np.zeros(anchors.shape[0], dtype=np.int64)
        for i in range(anchors.shape[0]):
            best = np.inf
            for j in range(candidates.shape[0]):
                if mask[i, j] and d[i, j] < best:
                    best = d[i, j]
                    out[i] = j
        return out

    @_njit
    def _nearest_center_nb(values, centers):
        out = np.zeros(values.shape[0], dtype=np.int64)
        for i in range(values.shape[0]):
            best = np.inf
            for c in range(centers.shape[0]):
                e = abs(values[i] - centers[c])
                if e < best:
                    best = e
                    out[i] = c
        return out

    @_njit
    def _nearest_mean_nb(x, means):
        out = np.zeros(x.shape[0], dtype=np.int64)
        for i in range(x.shape[0]):
            best = np.inf
            for c in range(means.shape[0]):
                s = 0.0
                for k in range(x.shape[1]):
                    t = x[i, k] - means[c, k]
                    s += t * t
                if s < best:
                    best = s
                    out[i] = c
        return out

    @_njit
    def _adam_update_nb(p, g, m, v, lr, b1, b2, eps, t):
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        pf, gf, mf, vf = p.reshape(-1), g.reshape(-1), m.reshape(-1), v.reshape(-1)
        for i in range(pf.shape[0]):
            mf[i] = b1 * mf[i] + (1.0 - b1) * gf[i]
            vf[i] = b2 * vf[i] + (1.0 - b2) * (gf[i] * gf[i])
            pf[i] -= lr * (mf[i] / c1) / (np.sqrt(vf[i] / c2) + eps)


def _contig(a, dtype=np.float64):
    return np.ascontiguousarray(a, dtype=dtype)


def pairwise_dist(x, y):
    """Euclidean distance matrix between the rows of ``x`` and ``y``."""
    if USE_NUMBA:
        return _pairwise_dist_nb(_contig(x), _contig(y))
    return _pairwise_dist_np(_contig(x), _contig(y))


def batch_hard_indices(x, labels):
    """Per anchor: index of the farthest same-label row and the nearest
    other-label row. Ties resolve to the lowest index."""
    labels = _contig(labels, np.int64)
    if USE_NUMBA:
        return _batch_hard_indices_nb(_contig(x), labels)
    return _batch_hard_indices_np(_contig(x), labels)


def masked_argmin(anchors, candidates, mask):
    mask = np.ascontiguousarray(mask, dtype=np.bool_)
    if USE_NUMBA:
        return _masked_argmin_nb(_contig(anchors), _contig(candidates), mask)
    return _masked_argmin_np(_contig(anchors), _contig(candidates), mask)


def nearest_center(values, centers):
    if USE_NUMBA:
        return _nearest_center_nb(_contig(values), _contig(centers))
    return _nearest_center_np(_contig(values), _contig(centers))


def nearest_mean(x, means):
    if USE_NUMBA:
        return _nearest_mean_nb(_contig(x), _contig(means))
    return _nearest_mean_np(_contig(x), _contig(means))


def adam_update(p, g, m, v, lr, b1, b2, eps, t):
    """In-place adaptive-moment update of ``p``, ``m`` and ``v``."""
    if USE_NUMBA:
        _adam_update_nb(p, g, m, v, float(lr), float(b1), float(b2), float(eps), float(t))
    else:
        _adam_update_np(p, g, m, v, lr, b1, b2, eps, t)
