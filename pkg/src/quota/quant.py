"""Symmetric low-bit quantization: fake-quant, integer storage, KV cache.

Codes live on the symmetric grid ``[-(2**(bits-1) - 1), 2**(bits-1) - 1]``
(``[-7, 7]`` at 4 bits) and rounding is half-to-even. Scaling multiplies by
the reciprocal of the scale, so a value exactly halfway between two grid
points in decimal (``0.3`` at scale ``0.2``) lands on the tie.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .numeric import as_matrix, matmul_t

GROUP_AXES = ("tensor", "row", "column")

# clip ratios searched when calibrating an activation site, largest first
DEFAULT_CLIP_GRID = tuple(round(1.0 - 0.01 * i, 2) for i in range(51))


def qmax(bits: int) -> int:
    if not 2 <= bits <= 8:
        raise ValueError(f"bits must be in [2, 8], got {bits}")
    return 2 ** (bits - 1) - 1


@dataclass(frozen=True, eq=False)
class QuantParams:
    bits: int
    scale: np.ndarray  # broadcastable against the quantized matrix
    group_axis: str

    def __post_init__(self):
        qmax(self.bits)
        if self.group_axis not in GROUP_AXES:
            raise ValueError(f"unknown group axis {self.group_axis!r}")
        if not np.all(self.scale > 0):
            raise ValueError("scales must be positive")


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    codes: np.ndarray  # int8
    params: QuantParams

    @property
    def shape(self) -> tuple:
        return self.codes.shape

    def dequantize(self) -> np.ndarray:
        return self.codes.astype(np.float64) * self.params.scale


def fit_params(x, bits: int = 4, group_axis: str = "tensor", clip_ratio: float = 1.0) -> QuantParams:
    """Max-abs scale per group; an all-zero group gets scale 1."""
    x = as_matrix(x, "x")
    q = qmax(bits)
    if group_axis == "tensor":
        amax = np.abs(x).max(keepdims=True) if x.size else np.zeros((1, 1))
    elif group_axis == "row":
        amax = np.abs(x).max(axis=1, keepdims=True)
    elif group_axis == "column":
        amax = np.abs(x).max(axis=0, keepdims=True)
    else:
        raise ValueError(f"unknown group axis {group_axis!r}")
    if not 0 < clip_ratio <= 1:
        raise ValueError(f"clip ratio must lie in (0, 1], got {clip_ratio}")
    scale = np.where(amax > 0, clip_ratio * amax / q, 1.0)
    return QuantParams(bits=bits, scale=scale, group_axis=group_axis)


def quantize(x, params: QuantParams) -> QuantizedTensor:
    x = np.asarray(x, dtype=np.float64)
    q = qmax(params.bits)
    codes = np.clip(np.rint(x * (1.0 / params.scale)), -q, q).astype(np.int8)
    return QuantizedTensor(codes=codes, params=params)


def dequantize(t: QuantizedTensor) -> np.ndarray:
    return t.dequantize()


def fake_quant(x, params: QuantParams) -> np.ndarray:
    return quantize(x, params).dequantize()


def fake_quant_tokens(x: np.ndarray, bits: Optional[int], clip_ratio: float = 1.0) -> np.ndarray:
    """Per-token (per-row) dynamic activation quantization; ``bits=None`` is a no-op."""
    if bits is None:
        return x
    return fake_quant(x, fit_params(x, bits, "row", clip_ratio))


def quantize_weight(w, bits: int = 4) -> QuantizedTensor:
    """Weights are (out_features, in_features); one scale per output channel."""
    return quantize(w, fit_params(w, bits, "row"))


def quantized_linear(x, w: QuantizedTensor, act_bits: Optional[int] = 4, clip_ratio: float = 1.0) -> np.ndarray:
    """Simulated W-bit/A-bit linear layer: ``fake_quant(x) @ dequantize(w).T``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != w.shape[1]:
        raise ValueError(f"shape mismatch: input {x.shape} vs weight {w.shape}")
    return matmul_t(fake_quant_tokens(x, act_bits, clip_ratio), w.dequantize())


def kv_quantize(keys_or_values, bits: int = 4) -> QuantizedTensor:
    """One scale per cached token row (callers pass one head at a time)."""
    x = as_matrix(keys_or_values, "keys_or_values")
    return quantize(x, fit_params(x, bits, "row"))


def fit_clip_ratio(rows: np.ndarray, bits: int, grid: Sequence[float] = DEFAULT_CLIP_GRID) -> float:
    """Pick the per-token clip ratio with the smallest squared fake-quant error.

    This is the only calibrated quantity of the activation quantizer, which
    makes the result depend on which tokens the calibration graph carried.
    Ties go to the first (largest) ratio in ``grid``.
    """
    rows = as_matrix(rows, "rows")
    best, best_err = None, np.inf
    for ratio in grid:
        err = float(np.sum((fake_quant_tokens(rows, bits, ratio) - rows) ** 2))
        if err < best_err:
            best, best_err = float(ratio), err
    return best
