"""Hot numeric kernels, with numba and pure-numpy backends.

Every kernel exists twice: a vectorized numpy implementation (``_*_np``) and a
loop implementation compiled with ``numba.njit`` when available. The active
backend is chosen once at import time:

* ``BRANCHSEARCH_NUMBA=0`` in the environment forces the pure-numpy path.
* Otherwise numba is used if it imports; missing numba falls back to numpy.

``benchmarks/bench_kernels.py`` times the two backends against each other.
Both backends are deterministic for fixed inputs; they may differ in the last
few ulps because summation order differs, so cross-backend comparisons belong
at ~1e-12, not bitwise. Matrix products delegate to BLAS (``@``) in both
backends: a hand-rolled loop matmul would cost ~20x on the training path.

All kernels expect C-contiguous float64 arrays (int64 for label arrays) and
perform no validation; callers own the contracts.
"""

from __future__ import annotations

import os

import numpy as np

NUMBA_REQUESTED = os.environ.get("BRANCHSEARCH_NUMBA", "1") != "0"

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba installed
    numba = None
    HAVE_NUMBA = False

NUMBA_ENABLED = NUMBA_REQUESTED and HAVE_NUMBA
BACKEND = "numba" if NUMBA_ENABLED else "numpy"


# ---------------------------------------------------------------------------
# numpy implementations


def _relu_np(x):
    return np.maximum(x, 0.0)


def _relu_grad_np(upstream, x):
    return np.where(x > 0.0, upstream, 0.0)


def _softmax_rows_np(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_xent_fwd_np(logits, labels):
    n = logits.shape[0]
    m = logits.max(axis=1)
    shifted = logits - m[:, None]
    lse = m + np.log(np.exp(shifted).sum(axis=1))
    probs = np.exp(logits - lse[:, None])
    loss = float(np.mean(lse - logits[np.arange(n), labels]))
    return loss, probs


def _softmax_xent_bwd_np(probs, labels, upstream):
    n = probs.shape[0]
    g = probs.copy()
    g[np.arange(n), labels] -= 1.0
    g *= upstream / n
    return g


def _bce_logits_fwd_np(logits, targets):
    # max(z,0) - z*d + log1p(exp(-|z|)) is the overflow-safe form
    loss = float(
        np.mean(np.maximum(logits, 0.0) - logits * targets + np.log1p(np.exp(-np.abs(logits))))
    )
    sig = 1.0 / (1.0 + np.exp(-logits))
    return loss, sig


def _bce_logits_bwd_np(sig, targets, upstream):
    return (sig - targets) * (upstream / sig.shape[0])


def _dann_recip_fwd_np(logits, targets, eps):
    sig = 1.0 / (1.0 + np.exp(-logits))
    s = np.clip(sig, eps, 1.0 - eps)
    loss = float(np.mean(targets / s + (1.0 - targets) / (1.0 - s)))
    return loss, s


def _dann_recip_bwd_np(s, targets, upstream):
    g = -targets * (1.0 - s) / s + (1.0 - targets) * s / (1.0 - s)
    return g * (upstream / s.shape[0])


def _alda_fwd_np(logits, yhat, tvec, eps):
    n, k = logits.shape
    xi = 1.0 / (1.0 + np.exp(-logits))
    rows = np.arange(n)
    xi_y = np.clip(xi[rows, yhat], eps, 1.0 - eps)
    off = (1.0 - xi_y) / (k - 1)
    c = np.repeat(off[:, None], k, axis=1)
    c[rows, yhat] = xi_y
    per = -(tvec * np.log(c) + (1.0 - tvec) * np.log(1.0 - c)).sum(axis=1) / k
    return float(per.mean()), xi


def _alda_bwd_np(xi, yhat, tvec, upstream, eps):
    n, k = xi.shape
    rows = np.arange(n)
    xi_y = np.clip(xi[rows, yhat], eps, 1.0 - eps)
    off = (1.0 - xi_y) / (k - 1)
    t_y = tvec[rows, yhat]
    # d(per-sample loss)/d(xi_y); off-pseudo components move with -1/(k-1)
    d_own = t_y / xi_y - (1.0 - t_y) / (1.0 - xi_y)
    t_off = tvec.sum(axis=1) - t_y
    term_off = t_off / off - ((k - 1.0) - t_off) / (1.0 - off)
    d_xi = -(d_own - term_off / (k - 1)) / k
    g = np.zeros_like(xi)
    g[rows, yhat] = d_xi * xi_y * (1.0 - xi_y) * (upstream / n)
    return g


def _sgd_update_np(param, grad, vel, lr, momentum, wd):
    vel *= momentum
    vel += grad + wd * param
    param -= lr * vel


def _pairwise_sq_dists_np(x):
    sq = np.einsum("ij,ij->i", x, x)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def _silhouette_mean_np(dists, labels, k):
    n = dists.shape[0]
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    counts = onehot.sum(axis=0)
    sums = dists @ onehot
    own_count = counts[labels]
    with np.errstate(divide="ignore", invalid="ignore"):
        a = sums[np.arange(n), labels] / (own_count - 1.0)
        mean_other = sums / counts[None, :]
    mean_other[:, counts == 0] = np.inf
    mean_other[np.arange(n), labels] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    with np.errstate(invalid="ignore"):
        s = (b - a) / denom
    s = np.where((own_count <= 1) | (denom <= 0.0), 0.0, s)
    return float(s.mean())


def _kmeans_assign_np(x, centroids):
    d = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d, axis=1).astype(np.int64)


def _kmeans_accumulate_np(x, labels, k):
    n, dim = x.shape
    onehot = np.zeros((n, k))
    onehot[np.arange(n), labels] = 1.0
    sums = onehot.T @ x
    counts = onehot.sum(axis=0).astype(np.int64)
    return sums, counts


def _mode_rows_np(history, k):
    n, epochs = history.shape
    counts = np.zeros((n, k), dtype=np.int64)
    first = np.full((n, k), epochs + 1, dtype=np.int64)
    rows = np.arange(n)
    for e in range(epochs):
        counts[rows, history[:, e]] += 1
    for e in range(epochs - 1, -1, -1):
        first[rows, history[:, e]] = e
    # lexicographic (count desc, first-appearance asc); distinct classes in a
    # row can never tie on both, so a single integer key suffices
    score = counts * (epochs + 2) + (epochs + 1 - first)
    return np.argmax(score, axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# loop implementations (numba targets)


def _relu_loops(x):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            v = x[i, j]
            out[i, j] = v if v > 0.0 else 0.0
    return out


def _relu_grad_loops(upstream, x):
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            out[i, j] = upstream[i, j] if x[i, j] > 0.0 else 0.0
    return out


def _softmax_rows_loops(x):
    n, k = x.shape
    out = np.empty_like(x)
    for i in range(n):
        m = x[i, 0]
        for j in range(1, k):
            if x[i, j] > m:
                m = x[i, j]
        total = 0.0
        for j in range(k):
            e = np.exp(x[i, j] - m)
            out[i, j] = e
            total += e
        for j in range(k):
            out[i, j] /= total
    return out


def _softmax_xent_fwd_loops(logits, labels):
    n, k = logits.shape
    probs = np.empty_like(logits)
    loss = 0.0
    for i in range(n):
        m = logits[i, 0]
        for j in range(1, k):
            if logits[i, j] > m:
                m = logits[i, j]
        total = 0.0
        for j in range(k):
            total += np.exp(logits[i, j] - m)
        lse = m + np.log(total)
        for j in range(k):
            probs[i, j] = np.exp(logits[i, j] - lse)
        loss += lse - logits[i, labels[i]]
    return loss / n, probs


def _softmax_xent_bwd_loops(probs, labels, upstream):
    n, k = probs.shape
    g = np.empty_like(probs)
    scale = upstream / n
    for i in range(n):
        for j in range(k):
            g[i, j] = probs[i, j] * scale
        g[i, labels[i]] -= scale
    return g


def _bce_logits_fwd_loops(logits, targets):
    n = logits.shape[0]
    sig = np.empty_like(logits)
    loss = 0.0
    for i in range(n):
        z = logits[i]
        zabs = z if z >= 0.0 else -z
        zmax = z if z > 0.0 else 0.0
        loss += zmax - z * targets[i] + np.log1p(np.exp(-zabs))
        sig[i] = 1.0 / (1.0 + np.exp(-z))
    return loss / n, sig


def _bce_logits_bwd_loops(sig, targets, upstream):
    n = sig.shape[0]
    g = np.empty_like(sig)
    scale = upstream / n
    for i in range(n):
        g[i] = (sig[i] - targets[i]) * scale
    return g


def _dann_recip_fwd_loops(logits, targets, eps):
    n = logits.shape[0]
    s = np.empty_like(logits)
    loss = 0.0
    for i in range(n):
        v = 1.0 / (1.0 + np.exp(-logits[i]))
        if v < eps:
            v = eps
        elif v > 1.0 - eps:
            v = 1.0 - eps
        s[i] = v
        loss += targets[i] / v + (1.0 - targets[i]) / (1.0 - v)
    return loss / n, s


def _dann_recip_bwd_loops(s, targets, upstream):
    n = s.shape[0]
    g = np.empty_like(s)
    scale = upstream / n
    for i in range(n):
        g[i] = (-targets[i] * (1.0 - s[i]) / s[i] + (1.0 - targets[i]) * s[i] / (1.0 - s[i])) * scale
    return g


def _alda_fwd_loops(logits, yhat, tvec, eps):
    n, k = logits.shape
    xi = np.empty_like(logits)
    loss = 0.0
    for i in range(n):
        for j in range(k):
            xi[i, j] = 1.0 / (1.0 + np.exp(-logits[i, j]))
        x = xi[i, yhat[i]]
        if x < eps:
            x = eps
        elif x > 1.0 - eps:
            x = 1.0 - eps
        off = (1.0 - x) / (k - 1)
        acc = 0.0
        for j in range(k):
            c = x if j == yhat[i] else off
            t = tvec[i, j]
            acc -= t * np.log(c) + (1.0 - t) * np.log(1.0 - c)
        loss += acc / k
    return loss / n, xi


def _alda_bwd_loops(xi, yhat, tvec, upstream, eps):
    n, k = xi.shape
    g = np.zeros_like(xi)
    scale = upstream / n
    for i in range(n):
        x = xi[i, yhat[i]]
        if x < eps:
            x = eps
        elif x > 1.0 - eps:
            x = 1.0 - eps
        off = (1.0 - x) / (k - 1)
        t_y = tvec[i, yhat[i]]
        t_off = 0.0
        for j in range(k):
            t_off += tvec[i, j]
        t_off -= t_y
        d_own = t_y / x - (1.0 - t_y) / (1.0 - x)
        term_off = t_off / off - ((k - 1.0) - t_off) / (1.0 - off)
        d_xi = -(d_own - term_off / (k - 1)) / k
        g[i, yhat[i]] = d_xi * x * (1.0 - x) * scale
    return g


def _sgd_update_loops(param, grad, vel, lr, momentum, wd):
    for i in range(param.shape[0]):
        v = momentum * vel[i] + grad[i] + wd * param[i]
        vel[i] = v
        param[i] -= lr * v


def _pairwise_sq_dists_loops(x):
    n, dim = x.shape
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            acc = 0.0
            for m in range(dim):
                diff = x[i, m] - x[j, m]
                acc += diff * diff
            d[i, j] = acc
            d[j, i] = acc
    return d


def _silhouette_mean_loops(dists, labels, k):
    n = dists.shape[0]
    counts = np.zeros(k, dtype=np.int64)
    for i in range(n):
        counts[labels[i]] += 1
    total = 0.0
    sums = np.zeros(k)
    for i in range(n):
        for c in range(k):
            sums[c] = 0.0
        for j in range(n):
            sums[labels[j]] += dists[i, j]
        own = labels[i]
        if counts[own] <= 1:
            continue
        a = sums[own] / (counts[own] - 1.0)
        b = np.inf
        for c in range(k):
            if c == own or counts[c] == 0:
                continue
            m = sums[c] / counts[c]
            if m < b:
                b = m
        denom = a if a > b else b
        if denom > 0.0:
            total += (b - a) / denom
    return total / n


def _kmeans_assign_loops(x, centroids):
    n, dim = x.shape
    k = centroids.shape[0]
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = 0
        best_d = np.inf
        for c in range(k):
            acc = 0.0
            for m in range(dim):
                diff = x[i, m] - centroids[c, m]
                acc += diff * diff
            if acc < best_d:
                best_d = acc
                best = c
        labels[i] = best
    return labels


def _kmeans_accumulate_loops(x, labels, k):
    n, dim = x.shape
    sums = np.zeros((k, dim))
    counts = np.zeros(k, dtype=np.int64)
    for i in range(n):
        c = labels[i]
        counts[c] += 1
        for m in range(dim):
            sums[c, m] += x[i, m]
    return sums, counts


def _mode_rows_loops(history, k):
    n, epochs = history.shape
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        counts = np.zeros(k, dtype=np.int64)
        first = np.full(k, epochs + 1, dtype=np.int64)
        for e in range(epochs):
            c = history[i, e]
            counts[c] += 1
            if first[c] > epochs:
                first[c] = e
        best = history[i, 0]
        for c in range(k):
            if counts[c] == 0:
                continue
            if counts[c] > counts[best] or (counts[c] == counts[best] and first[c] < first[best]):
                best = c
        out[i] = best
    return out


# ---------------------------------------------------------------------------
# backend wiring

_NP_IMPLS = {
    "relu": _relu_np,
    "relu_grad": _relu_grad_np,
    "softmax_rows": _softmax_rows_np,
    "softmax_xent_fwd": _softmax_xent_fwd_np,
    "softmax_xent_bwd": _softmax_xent_bwd_np,
    "bce_logits_fwd": _bce_logits_fwd_np,
    "bce_logits_bwd": _bce_logits_bwd_np,
    "dann_recip_fwd": _dann_recip_fwd_np,
    "dann_recip_bwd": _dann_recip_bwd_np,
    "alda_fwd": _alda_fwd_np,
    "alda_bwd": _alda_bwd_np,
    "sgd_update": _sgd_update_np,
    "pairwise_sq_dists": _pairwise_sq_dists_np,
    "silhouette_mean": _silhouette_mean_np,
    "kmeans_assign": _kmeans_assign_np,
    "kmeans_accumulate": _kmeans_accumulate_np,
    "mode_rows": _mode_rows_np,
}

_LOOP_IMPLS = {
    "relu": _relu_loops,
    "relu_grad": _relu_grad_loops,
    "softmax_rows": _softmax_rows_loops,
    "softmax_xent_fwd": _softmax_xent_fwd_loops,
    "softmax_xent_bwd": _softmax_xent_bwd_loops,
    "bce_logits_fwd": _bce_logits_fwd_loops,
    "bce_logits_bwd": _bce_logits_bwd_loops,
    "dann_recip_fwd": _dann_recip_fwd_loops,
    "dann_recip_bwd": _dann_recip_bwd_loops,
    "alda_fwd": _alda_fwd_loops,
    "alda_bwd": _alda_bwd_loops,
    "sgd_update": _sgd_update_loops,
    "pairwise_sq_dists": _pairwise_sq_dists_loops,
    "silhouette_mean": _silhouette_mean_loops,
    "kmeans_assign": _kmeans_assign_loops,
    "kmeans_accumulate": _kmeans_accumulate_loops,
    "mode_rows": _mode_rows_loops,
}


def compile_numba_impls():
    """Compile and return the numba backend; raises if numba is unavailable."""
    if not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    jit = numba.njit(cache=True, nogil=True)
    return {name: jit(fn) for name, fn in _LOOP_IMPLS.items()}


numpy_backend = _NP_IMPLS

if NUMBA_ENABLED:
    _active = compile_numba_impls()
else:
    _active = _NP_IMPLS

relu = _active["relu"]
relu_grad = _active["relu_grad"]
softmax_rows = _active["softmax_rows"]
softmax_xent_fwd = _active["softmax_xent_fwd"]
softmax_xent_bwd = _active["softmax_xent_bwd"]
bce_logits_fwd = _active["bce_logits_fwd"]
bce_logits_bwd = _active["bce_logits_bwd"]
dann_recip_fwd = _active["dann_recip_fwd"]
dann_recip_bwd = _active["dann_recip_bwd"]
alda_fwd = _active["alda_fwd"]
alda_bwd = _active["alda_bwd"]
sgd_update = _active["sgd_update"]
pairwise_sq_dists = _active["pairwise_sq_dists"]
silhouette_mean = _active["silhouette_mean"]
kmeans_assign = _active["kmeans_assign"]
kmeans_accumulate = _active["kmeans_accumulate"]
mode_rows = _active["mode_rows"]
