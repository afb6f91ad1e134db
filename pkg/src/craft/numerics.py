"""Dense float64 kernel shared by every other module.

Matrices are plain ``numpy`` float64 arrays. Randomness comes from
:class:`SeededRng`, a thin wrapper over numpy's PCG64 bit generator, whose
output stream is fixed across platforms for a given seed.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "NumericsError",
    "SeededRng",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "kl_divergence",
    "sym_eigen",
    "gaussian_matrix",
    "as_matrix",
]


class NumericsError(ValueError):
    pass


class SeededRng:
    """Deterministic random stream (PCG64) owned by a single consumer.

    ``child(index)`` derives an independent stream from ``seed ^ index`` so
    concurrent workers never share state.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, size=None, std: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(size) * std

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def child(self, index: int) -> "SeededRng":
        return SeededRng(self.seed ^ int(index))

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed})"


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise NumericsError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericsError(f"non-finite entries in {name}")
    return a


def log_softmax(scores) -> np.ndarray:
    """Row-wise log-softmax with max subtraction. Accepts a vector or a matrix."""
    x = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericsError("non-finite score")
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(scores) -> np.ndarray:
    """Row-wise softmax, shift invariant; raises on non-finite scores."""
    x = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericsError("non-finite score")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or y.shape[0] != n:
        raise NumericsError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == np.round(y)):
            raise NumericsError("labels must be integers")
        y = y.astype(np.int64)
    if n and (y.min() < 0 or y.max() >= k):
        raise NumericsError(f"label out of range [0, {k})")
    return y


def cross_entropy(logits, labels) -> float:
    """Mean over rows of ``-log softmax(row)[label]``."""
    z = as_matrix(logits, "logits")
    y = _check_labels(labels, z.shape[0], z.shape[1])
    logp = log_softmax(z)
    return float(-logp[np.arange(z.shape[0]), y].mean())


def kl_divergence(logits_p, logits_q) -> float:
    """Mean row KL(softmax(p) || softmax(q)), evaluated in log space."""
    p = as_matrix(logits_p, "logits_p")
    q = as_matrix(logits_q, "logits_q")
    if p.shape != q.shape:
        raise NumericsError(f"shape mismatch: {p.shape} vs {q.shape}")
    logp = log_softmax(p)
    logq = log_softmax(q)
    return float((np.exp(logp) * (logp - logq)).sum(axis=1).mean())


def _jacobi_eigen(a: np.ndarray, tol: float, max_sweeps: int):
    # cyclic-by-row Jacobi; a is overwritten
    d = a.shape[0]
    v = np.eye(d)
    scale = max(np.linalg.norm(a), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off <= tol * scale:
            break
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if abs(apq) <= 1e-18 * scale:
                    a[p, q] = a[q, p] = 0.0
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q]
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap = a[p, :].copy()
                aq = a[q, :]
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q]
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise NumericsError("Jacobi eigendecomposition did not converge")
    return np.diag(a).copy(), v


def sym_eigen(c, method: str = "lapack", sym_tol: float = 1e-10, return_clamped: bool = False):
    """Eigendecomposition ``C = B diag(D) B^T`` of a symmetric PSD matrix.

    ``method`` selects LAPACK (``numpy.linalg.eigh``) or the in-house cyclic
    Jacobi solver. Negative round-off eigenvalues are clamped to zero; pass
    ``return_clamped=True`` to also receive the number of clamped values.
    """
    a = as_matrix(c, "C")
    if a.shape[0] != a.shape[1]:
        raise NumericsError(f"matrix must be square, got {a.shape}")
    asym = np.max(np.abs(a - a.T)) if a.size else 0.0
    if asym > sym_tol * max(1.0, np.max(np.abs(a))):
        raise NumericsError(f"matrix is not symmetric (max asymmetry {asym:.3g})")
    a = 0.5 * (a + a.T)
    if method == "lapack":
        vals, vecs = np.linalg.eigh(a)
    elif method == "jacobi":
        vals, vecs = _jacobi_eigen(a.copy(), tol=1e-14, max_sweeps=60)
    else:
        raise ValueError(f"unknown eigen method {method!r}")
    clamped = int(np.sum(vals < 0))
    vals = np.maximum(vals, 0.0)
    if return_clamped:
        return vecs, vals, clamped
    return vecs, vals


def gaussian_matrix(rng: SeededRng, rows: int, cols: int, std: float) -> np.ndarray:
    if std < 0:
        raise NumericsError("std must be non-negative")
    return rng.normal((rows, cols), std=std)
