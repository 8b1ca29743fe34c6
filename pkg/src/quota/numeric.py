"""Dense numeric primitives shared by the rest of the package.

Everything here works on float64 numpy arrays. Matrix products go through
``np.einsum`` without path optimization so the result never depends on the
BLAS backend or its thread count.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with a backend-independent reduction order."""
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} @ {b.shape}")
    return np.einsum("ik,kj->ij", a, b)


def matmul_t(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b.T``; weights are stored as (out_features, in_features)."""
    if a.shape[-1] != b.shape[-1]:
        raise ValueError(f"shape mismatch: {a.shape} @ {b.shape}.T")
    return np.einsum("ik,jk->ij", a, b)


def row_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", x, x))


def l2_norm(x) -> float:
    flat = np.asarray(x, dtype=np.float64).ravel()
    return math.sqrt(float(np.dot(flat, flat)))


def percentile(values: Sequence[float], p: float) -> float:
    """Linearly interpolated percentile with inclusive endpoints.

    The rank of ``p`` is ``p/100 * (n-1)`` on the sorted sample, so
    ``p=0`` gives the minimum and ``p=100`` the maximum.
    """
    data = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if data.size == 0:
        raise ValueError("empty sample")
    if not 0.0 <= p <= 100.0:
        raise ValueError(f"percentile must lie in [0, 100], got {p}")
    if not np.all(np.isfinite(data)):
        raise ValueError("non-finite sample")
    rank = p / 100.0 * (data.size - 1)
    lo = math.floor(rank)
    hi = min(lo + 1, data.size - 1)
    frac = rank - lo
    if frac == 0.0:
        return float(data[lo])
    return float(data[lo] + frac * (data[hi] - data[lo]))


def median(values: Sequence[float]) -> float:
    return percentile(values, 50.0)


def softmax_with_temperature(logits: Sequence[float], tau: float) -> np.ndarray:
    if not tau > 0:
        raise ValueError("invalid temperature")
    z = np.asarray(logits, dtype=np.float64) / tau
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax; ``-inf`` entries act as masked positions."""
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def median_pairwise_cosine(tokens) -> float:
    x = as_matrix(tokens, "tokens")
    if x.shape[0] < 2:
        raise ValueError("need at least two tokens")
    norms = row_norms(x)
    if np.any(norms == 0.0):
        raise ValueError("degenerate token")
    unit = x / norms[:, None]
    gram = matmul_t(unit, unit)
    iu = np.triu_indices(x.shape[0], k=1)
    return float(np.clip(median(gram[iu]), -1.0, 1.0))
