"""Deterministic dense linear algebra and elementwise primitives.

All math runs in float64. Reductions that feed bit-reproducibility
contracts (matmul) accumulate in a fixed row-major, left-to-right order;
BLAS-backed kernels are avoided there because their blocked summation is
not bitwise equal to the naive triple loop.
"""

import numpy as np

from .errors import ShapeMismatchError, ZeroNormError

ZERO_NORM_FLOOR = 1e-12


def as_vector(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeMismatchError(f"expected a nonempty 1-D vector, got shape {v.shape}")
    return v


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise ShapeMismatchError(f"expected a nonempty 2-D matrix, got shape {m.shape}")
    return m


def check_finite(x, what: str = "array") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite entries")
    return arr


def cossim(a, b) -> float:
    """Cosine similarity a.b / (|a||b|), clamped to [-1, 1].

    Raises ZeroNormError when either norm is below 1e-12; a zero feature
    carries no direction and must not be classified silently.
    """
    a = as_vector(a)
    b = as_vector(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"cossim dims differ: {a.shape[0]} vs {b.shape[0]}")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < ZERO_NORM_FLOOR or nb < ZERO_NORM_FLOOR:
        raise ZeroNormError(f"vector norm below {ZERO_NORM_FLOOR}")
    return min(1.0, max(-1.0, float(np.dot(a, b)) / (na * nb)))


def relu(x) -> np.ndarray:
    """Elementwise max(0, x)."""
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def matmul(a, b) -> np.ndarray:
    """Matrix product with left-to-right accumulation over the shared axis.

    Decomposed into rank-1 updates so every output element is summed in
    index order; the result is bitwise equal to the naive triple loop on
    any shape, unlike BLAS gemm.
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul shapes do not chain: {a.shape} x {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    tmp = np.empty((m, n))
    for i in range(k):
        np.multiply(a[:, i, None], b[i, None, :], out=tmp)
        np.add(out, tmp, out=out)
    return out


def softmax_ce(logits, target):
    """Numerically stable cross-entropy and its gradient w.r.t. the logits.

    target is either a class index or a probability vector (soft labels
    from feature interpolation). Returns (loss, grad) with grad = p - t.
    """
    z = as_vector(logits)
    shifted = z - z.max()
    exp = np.exp(shifted)
    total = exp.sum()
    p = exp / total
    logp = shifted - np.log(total)
    if np.isscalar(target) or getattr(target, "ndim", 1) == 0:
        idx = int(target)
        if not 0 <= idx < z.size:
            raise ShapeMismatchError(f"target index {idx} out of range for {z.size} logits")
        t = np.zeros_like(z)
        t[idx] = 1.0
        loss = -float(logp[idx])
    else:
        t = as_vector(target)
        if t.shape != z.shape:
            raise ShapeMismatchError("soft target length differs from logits")
        loss = -float(np.dot(t, logp))
    return loss, p - t
