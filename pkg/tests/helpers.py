"""Shared test oracles, kept independent of the library's autodiff path."""

from __future__ import annotations

import numpy as np


def finite_difference(f, arrays, h=1e-5):
    """Central-difference gradients of the scalar ``f()`` w.r.t. each array.

    ``f`` must recompute its value from the (temporarily perturbed) arrays.
    Arrays are mutated in place during probing and restored afterwards.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = f()
            flat[i] = orig - h
            minus = f()
            flat[i] = orig
            gf[i] = (plus - minus) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_error(got: np.ndarray, want: np.ndarray, floor: float = 1e-6) -> float:
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    denom = np.maximum(np.abs(want), floor)
    return float(np.max(np.abs(got - want) / denom))


def matmul_triple_loop(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for l in range(k):
                acc += a[i, l] * b[l, j]
            out[i, j] = acc
    return out
