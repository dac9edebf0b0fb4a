"""Shared test oracles: finite differences and naive reference implementations."""

import numpy as np


def central_diff(f, x, step=1e-5):
    """Central finite-difference gradient of scalar f at x (flat array)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi[i] += step
        lo[i] -= step
        grad[i] = (f(hi) - f(lo)) / (2 * step)
    return grad


def rel_err(a, b, floor=1e-10):
    """Norm-wise relative error ||a - b|| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b)) / denom


def naive_matmul(a, b):
    """Pure-Python triple loop, k-innermost, accumulating left to right."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    n = b.shape[1]
    out = np.empty((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def flatten_params(params):
    """All weights and biases as one flat vector, layer order."""
    chunks = []
    for layer in params.layers:
        chunks.append(layer.weight.ravel().copy())
        chunks.append(layer.bias.copy())
    return np.concatenate(chunks)


def set_params_from_flat(params, flat):
    """Inverse of flatten_params; writes in place."""
    off = 0
    for layer in params.layers:
        n = layer.weight.size
        layer.weight[...] = flat[off : off + n].reshape(layer.weight.shape)
        off += n
        n = layer.bias.size
        layer.bias[...] = flat[off : off + n]
        off += n
    assert off == flat.size


def param_grad_flat(tape, params):
    """Gradient buffers flattened in the same order as flatten_params."""
    chunks = []
    for idx in range(len(params.layers)):
        chunks.append(tape.grad_w[idx].ravel().copy())
        chunks.append(tape.grad_b[idx].copy())
    return np.concatenate(chunks)
