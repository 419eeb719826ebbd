"""Backend agreement: every kernel's numpy and loop implementations must
compute the same thing. The loop variants are what numba compiles, so passing
here with BRANCHSEARCH_NUMBA=0 still certifies the jitted path's arithmetic."""

import zlib

import numpy as np
import pytest

from branchsearch import kernels

import oracles

RTOL = 1e-12


def _seed(name, salt=0):
    return zlib.crc32(name.encode()) + salt


def _inputs(name, rng):
    n, k, dim = 17, 5, 7
    x = rng.normal(size=(n, dim))
    logits = rng.normal(size=(n, k)) * 3.0
    labels = rng.integers(0, k, size=n)
    if name == "relu":
        return (rng.normal(size=(n, k)),)
    if name == "relu_grad":
        return (rng.normal(size=(n, k)), rng.normal(size=(n, k)))
    if name == "softmax_rows":
        return (logits,)
    if name == "softmax_xent_fwd":
        return (logits, labels)
    if name == "softmax_xent_bwd":
        probs = kernels.numpy_backend["softmax_rows"](logits)
        return (probs, labels, 0.7)
    if name == "bce_logits_fwd":
        return (rng.normal(size=n) * 4.0, rng.integers(0, 2, size=n).astype(np.float64))
    if name == "bce_logits_bwd":
        sig = 1.0 / (1.0 + np.exp(-rng.normal(size=n)))
        return (sig, rng.integers(0, 2, size=n).astype(np.float64), 1.3)
    if name == "dann_recip_fwd":
        return (rng.normal(size=n) * 4.0, rng.integers(0, 2, size=n).astype(np.float64), 1e-7)
    if name == "dann_recip_bwd":
        s = np.clip(1.0 / (1.0 + np.exp(-rng.normal(size=n))), 1e-7, 1.0 - 1e-7)
        return (s, rng.integers(0, 2, size=n).astype(np.float64), 0.9)
    if name == "alda_fwd":
        tvec = np.zeros((n, k))
        tvec[np.arange(n), labels] = 1.0
        return (logits, labels, tvec, 1e-12)
    if name == "alda_bwd":
        xi = 1.0 / (1.0 + np.exp(-logits))
        tvec = rng.uniform(size=(n, k))
        return (xi, labels, tvec, 0.8, 1e-12)
    if name == "sgd_update":
        return (rng.normal(size=(k, dim)), rng.normal(size=(k, dim)),
                rng.normal(size=(k, dim)), 0.01, 0.9, 5e-4)
    if name == "pairwise_sq_dists":
        return (x,)
    if name == "silhouette_mean":
        d = kernels.numpy_backend["pairwise_sq_dists"](x)
        return (np.sqrt(d), labels.astype(np.int64), k)
    if name == "kmeans_assign":
        return (x, rng.normal(size=(k, dim)))
    if name == "kmeans_accumulate":
        return (x, labels.astype(np.int64), k)
    if name == "mode_rows":
        return (rng.integers(0, k, size=(n, 11)).astype(np.int64), k)
    raise AssertionError(f"no input recipe for kernel {name}")


def _freeze(args):
    return tuple(a.copy() if isinstance(a, np.ndarray) else a for a in args)


def _run(fn, args):
    args = _freeze(args)
    out = fn(*args)
    # sgd_update mutates in place and returns None; compare the buffers
    return args if out is None else out


def _assert_same(a, b):
    if isinstance(a, tuple):
        assert len(a) == len(b)
        for ai, bi in zip(a, b):
            _assert_same(ai, bi)
    else:
        np.testing.assert_allclose(a, b, rtol=RTOL, atol=1e-12)


@pytest.mark.parametrize("name", sorted(kernels.numpy_backend))
def test_numpy_vs_loops(name):
    rng = np.random.default_rng(_seed(name))
    for _ in range(5):
        args = _inputs(name, rng)
        _assert_same(_run(kernels.numpy_backend[name], args),
                     _run(kernels._LOOP_IMPLS[name], args))


@pytest.mark.skipif(not kernels.NUMBA_ENABLED, reason="numba backend not active")
@pytest.mark.parametrize("name", sorted(kernels.numpy_backend))
def test_numpy_vs_numba(name):
    rng = np.random.default_rng(_seed(name, 1))
    active = getattr(kernels, name)
    for _ in range(3):
        args = _inputs(name, rng)
        _assert_same(_run(kernels.numpy_backend[name], args), _run(active, args))


def test_backend_tables_align():
    assert set(kernels.numpy_backend) == set(kernels._LOOP_IMPLS)


def test_sgd_update_math():
    param = np.array([1.0, -2.0])
    grad = np.array([0.5, 0.5])
    vel = np.array([0.1, 0.0])
    kernels.sgd_update(param, grad, vel, lr=0.1, momentum=0.9, wd=0.01)
    # v = 0.9*v + (g + wd*w); w -= lr*v
    np.testing.assert_allclose(vel, [0.9 * 0.1 + 0.5 + 0.01 * 1.0, 0.5 - 0.02])
    np.testing.assert_allclose(param, [1.0 - 0.1 * 0.6, -2.0 - 0.1 * 0.48])


def test_mode_rows_tie_goes_to_earliest():
    h = np.array([[2, 1, 1, 2], [0, 3, 3, 0], [4, 4, 1, 1]], dtype=np.int64)
    np.testing.assert_array_equal(kernels.mode_rows(h, 5), [2, 0, 4])
    np.testing.assert_array_equal(oracles.mode_direct(h), [2, 0, 4])


def test_mode_rows_against_oracle():
    rng = np.random.default_rng(7)
    for _ in range(50):
        n = int(rng.integers(1, 30))
        e = int(rng.integers(1, 12))
        k = int(rng.integers(2, 8))
        h = rng.integers(0, k, size=(n, e)).astype(np.int64)
        np.testing.assert_array_equal(kernels.mode_rows(h, k), oracles.mode_direct(h))


def test_silhouette_matches_oracle_given_labels():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n = int(rng.integers(4, 40))
        k = int(rng.integers(2, 5))
        x = rng.normal(size=(n, 3))
        labels = rng.integers(0, k, size=n).astype(np.int64)
        labels[:2] = [0, 1]  # the kernel's single-cluster case is guarded upstream
        d = np.sqrt(kernels.pairwise_sq_dists(x))
        got = kernels.silhouette_mean(d, labels, k)
        want = oracles.silhouette_direct(x, labels)
        assert got == pytest.approx(want, abs=1e-9)
