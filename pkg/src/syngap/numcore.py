"""Dense float64 numeric kernel shared by every other module.

Matrices are plain 2-D numpy arrays in row-major order. The finite-difference
gradient implemented here is the independent oracle the test suite uses to
check analytic gradients, so it deliberately stays a plain loop over entries
and never calls any analytic-gradient code.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

Matrix = np.ndarray


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got shapes {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def row_softmax(m: Matrix, temperature: float = 1.0) -> Matrix:
    """Row-wise softmax of ``m / temperature``, stabilised by max subtraction."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = np.asarray(m, dtype=np.float64) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: Matrix, labels: np.ndarray) -> tuple[float, Matrix]:
    """Mean negative log-likelihood of integer labels under a row softmax.

    Returns ``(loss, probs)`` where ``probs`` is ``row_softmax(logits, 1)``.
    The loss itself is computed through a log-sum-exp so extreme logits do
    not overflow.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects 2-D logits, got shape {logits.shape}")
    n, c = logits.shape
    if labels.shape[0] != n:
        raise ValueError(f"{labels.shape[0]} labels for {n} logit rows")
    bad = (labels < 0) | (labels >= c)
    if bad.any():
        i = int(np.argmax(bad))
        raise ValueError(f"label {labels[i]} at row {i} outside [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    nll = lse - shifted[np.arange(n), labels]
    return float(nll.mean()), row_softmax(logits, 1.0)


def finite_diff_grad(f: Callable[[Matrix], float], x: Matrix, h: float = 1e-4) -> Matrix:
    """Central-difference gradient of a scalar function of a matrix.

    Perturbs one entry at a time: g[i,j] = (f(x + h*E_ij) - f(x - h*E_ij)) / 2h.
    """
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        ij = it.multi_index
        xp = x.copy()
        xp[ij] += h
        xm = x.copy()
        xm[ij] -= h
        g[ij] = (f(xp) - f(xm)) / (2.0 * h)
    return g
