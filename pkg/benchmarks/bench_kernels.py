"""Timing comparison of the two kernel backends.

Runs every kernel on training-shaped inputs against both the vectorized numpy
implementations and the numba-compiled loops, checks they agree, and prints a
per-kernel table. The package itself picks its backend at import time; this
script loads both regardless of BRANCHSEARCH_NUMBA.

    python3 benchmarks/bench_kernels.py --rows 2048 --repeats 200
"""

import argparse
import time

import numpy as np

from branchsearch import kernels


def build_cases(rows, rng):
    """Representative inputs per kernel. sgd_update mutates, so it gets fresh
    copies from here for the agreement check and shared buffers for timing."""
    k = 7
    dim = 16
    width = 64
    x = rng.normal(size=(rows, width))
    logits_k = np.ascontiguousarray(rng.normal(size=(rows, k)))
    labels = rng.integers(0, k, rows)
    probs = kernels.numpy_backend["softmax_rows"](logits_k)
    logits1 = rng.normal(size=rows)
    targets = (rng.random(rows) < 0.5).astype(np.float64)
    sig = 1.0 / (1.0 + np.exp(-logits1))
    feats = np.ascontiguousarray(rng.normal(size=(rows, dim)))
    dists = kernels.numpy_backend["pairwise_sq_dists"](feats)
    clus = rng.integers(0, k, rows)
    yhat = rng.integers(0, k, rows)
    tvec = (rng.random((rows, k)) < 0.5).astype(np.float64)
    history = np.ascontiguousarray(rng.integers(0, k, (rows, 15)))
    centroids = np.ascontiguousarray(rng.normal(size=(k, dim)))
    eps = 1e-6
    return {
        "relu": (x,),
        "relu_grad": (x, x),
        "softmax_rows": (logits_k,),
        "softmax_xent_fwd": (logits_k, labels),
        "softmax_xent_bwd": (probs, labels, 1.0),
        "bce_logits_fwd": (logits1, targets),
        "bce_logits_bwd": (sig, targets, 1.0),
        "dann_recip_fwd": (logits1, targets, eps),
        "dann_recip_bwd": (np.clip(sig, eps, 1 - eps), targets, 1.0),
        "alda_fwd": (logits_k, yhat, tvec, eps),
        "alda_bwd": (probs, yhat, tvec, 1.0, eps),
        "sgd_update": (x.copy(), x, np.zeros_like(x), 0.01, 0.9, 5e-4),
        "pairwise_sq_dists": (feats,),
        "silhouette_mean": (dists, clus, k),
        "kmeans_assign": (feats, centroids),
        "kmeans_accumulate": (feats, clus, k),
        "mode_rows": (history, k),
    }


def fresh(args):
    return tuple(a.copy() if isinstance(a, np.ndarray) else a for a in args)


def agree(a, b):
    if isinstance(a, tuple):
        return all(agree(x, y) for x, y in zip(a, b))
    if isinstance(a, np.ndarray) and a.dtype.kind == "i":
        return np.array_equal(a, b)
    return np.allclose(a, b, rtol=1e-10, atol=1e-12)


def best_time(fn, args, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rows", type=int, default=2048)
    ap.add_argument("--repeats", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    if not kernels.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    numba_impls = kernels.compile_numba_impls()
    numpy_impls = kernels.numpy_backend

    cases = build_cases(args.rows, np.random.default_rng(args.seed))
    print(f"rows={args.rows} repeats={args.repeats} "
          f"(package backend: {kernels.BACKEND})")
    print(f"{'kernel':<20} {'numpy':>10} {'numba':>10} {'numba/numpy':>12}")
    for name, case in cases.items():
        ref = numpy_impls[name](*fresh(case))
        got = numba_impls[name](*fresh(case))  # also the warmup call
        if name == "sgd_update":
            a, b = fresh(case), fresh(case)
            numpy_impls[name](*a)
            numba_impls[name](*b)
            ok = agree(a[0], b[0]) and agree(a[2], b[2])
        else:
            ok = agree(ref, got)
        if not ok:
            print(f"{name:<20} BACKENDS DISAGREE")
            continue
        t_np = best_time(numpy_impls[name], case, args.repeats)
        t_nb = best_time(numba_impls[name], case, args.repeats)
        print(f"{name:<20} {t_np * 1e6:>8.1f}us {t_nb * 1e6:>8.1f}us "
              f"{t_nb / t_np:>11.2f}x")


if __name__ == "__main__":
    main()
