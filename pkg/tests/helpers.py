"""Independent oracles shared across the test suite.

The finite-difference checker perturbs raw float64 inputs and never reuses
the analytic path; the matmul and n-gram oracles are deliberately naive
re-implementations.
"""

from __future__ import annotations

import numpy as np

from rowtab.tensor import Tape, Tensor, backward


def finite_difference_grads(fn, arrays: list[np.ndarray], h: float = 1e-4) -> list[np.ndarray]:
    """Central-difference gradient of scalar fn(*arrays) wrt each array (float64)."""
    grads = []
    for i, base in enumerate(arrays):
        grad = np.zeros_like(base, dtype=np.float64)
        flat = grad.reshape(-1)
        for j in range(base.size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i].reshape(-1)[j] += h
            minus[i].reshape(-1)[j] -= h
            flat[j] = (fn(*plus) - fn(*minus)) / (2.0 * h)
        grads.append(grad)
    return grads


def analytic_grads(build, arrays: list[np.ndarray]) -> tuple[float, list[np.ndarray]]:
    """Loss value and autodiff gradients of build(*tensors) for float64 leaves."""
    tensors = [Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    with Tape():
        loss = build(*tensors)
        backward(loss)
    return loss.item(), [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]


def check_gradients(build, arrays: list[np.ndarray], h: float = 1e-4,
                    rtol: float = 1e-4, atol: float = 1e-7) -> float:
    """Assert analytic vs central-difference grads agree; returns worst relative error."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]

    def value(*raw):
        ts = [Tensor(r) for r in raw]
        return build(*ts).item()

    _, analytic = analytic_grads(build, arrays)
    numeric = finite_difference_grads(value, arrays, h=h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
        rel = np.abs(a - n) / denom
        worst = max(worst, float(rel.max()) if rel.size else 0.0)
        np.testing.assert_allclose(a, n, rtol=rtol, atol=atol)
    return worst


def matmul_oracle(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Naive triple-loop matrix multiply."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.result_type(a, b))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for l in range(k):
                acc += a[i, l] * b[l, j]
            out[i, j] = acc
    return out


def ngram_oracle(text: str, n: int, unit: str) -> set:
    """Brute-force gram enumerator, independent of the library implementation."""
    if unit == "char":
        s = text.lower()
        if not s:
            return set()
        if len(s) < n:
            return {s}
        grams = set()
        for i in range(len(s)):
            if i + n <= len(s):
                grams.add(s[i:i + n])
        return grams
    import re

    toks = re.findall(r"\w+|[^\w\s]", text.lower())
    if not toks:
        return set()
    if len(toks) < n:
        return {tuple(toks)}
    grams = set()
    for i in range(len(toks)):
        if i + n <= len(toks):
            grams.add(tuple(toks[i:i + n]))
    return grams


def dice_oracle(a: str, b: str, n: int, unit: str) -> float:
    ga, gb = ngram_oracle(a, n, unit), ngram_oracle(b, n, unit)
    if not ga and not gb:
        return 0.0
    inter = 0
    for g in ga:
        if g in gb:
            inter += 1
    return 2.0 * inter / (len(ga) + len(gb))
