"""Budgeted visual-token selection and aligned pruning.

At a candidate layer every live visual token gets four importance signals
(activation norm, attention received from text queries, attention received
from other visual tokens, and its activation-quantization residual). Each
signal is robustly rescaled to [0, 1], fused with fixed weights, and the
top-K tokens survive.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np

from .numeric import percentile, row_norms
from .quant import fake_quant_tokens
from .recipe import DEFAULT_WEIGHTS, MetricWeights, PruningRecipe
from .sequence import KVCacheState, LayerActivationRecord, LayerCache, SequenceLayout, take_rows

METRIC_NAMES = ("mag", "inter", "intra", "quant")


class PruningError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TokenMetrics:
    mag: np.ndarray
    inter: np.ndarray
    intra: np.ndarray
    quant: np.ndarray  # ||Q(v) - v||_2

    def as_dict(self) -> Dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in METRIC_NAMES}


@dataclass(frozen=True, eq=False)
class ScoreVector:
    normalized: Dict[str, np.ndarray]
    score: np.ndarray
    weights: MetricWeights


@dataclass(frozen=True, eq=False)
class RetainedSet:
    """Indices (into the current visual tokens, ascending) that survive ``layer``."""

    layer: int
    indices: np.ndarray
    budget: int
    positions: Optional[np.ndarray] = None  # original position ids, filled in by the forward pass

    def to_trace(self) -> dict:
        ids = self.positions if self.positions is not None else self.indices
        return {"layer": int(self.layer), "budget": int(self.budget), "retained_indices": [int(i) for i in ids]}


def compute_budget(keep_ratio: float, v0: int) -> int:
    """``ceil(keep_ratio * v0)``.

    The product is nudged down by 1e-9 before the ceiling so that ratios
    which are exact in decimal (0.3 * 10) do not round up because of float
    representation error.
    """
    if not 0 < keep_ratio <= 1:
        raise ValueError(f"keep ratio must lie in (0, 1], got {keep_ratio}")
    if v0 < 1:
        raise ValueError(f"v0 must be >= 1, got {v0}")
    return max(1, math.ceil(keep_ratio * v0 - 1e-9))


def compute_metrics(record: LayerActivationRecord, act_bits: Optional[int] = 4,
                    n_heads: Optional[int] = None) -> TokenMetrics:
    h = record.n_heads
    if n_heads is not None and n_heads != h:
        raise ValueError(f"head count mismatch: record has {h}, expected {n_heads}")
    inter, intra = record.attn_inter, record.attn_intra
    if inter.shape[0] != h or intra.shape[0] != h:
        raise ValueError("head count mismatch between attention blocks")
    v = record.visual_states
    return TokenMetrics(
        mag=row_norms(v),
        inter=inter.sum(axis=(0, 1)) / h,
        intra=intra.sum(axis=(0, 1)) / h,
        quant=row_norms(fake_quant_tokens(v, act_bits) - v),
    )


def robust_normalize(values, lo: float = 5.0, hi: float = 95.0) -> np.ndarray:
    """Clip to the [P5, P95] band of this layer and map it onto [0, 1].

    A (numerically) constant vector maps to 0.5 everywhere.
    """
    x = np.asarray(values, dtype=np.float64)
    p_lo, p_hi = percentile(x, lo), percentile(x, hi)
    if p_hi - p_lo < 1e-12:
        return np.full(x.shape, 0.5)
    return (np.clip(x, p_lo, p_hi) - p_lo) / (p_hi - p_lo)


def fuse_scores(normalized: Mapping[str, np.ndarray], weights: MetricWeights = DEFAULT_WEIGHTS) -> np.ndarray:
    weights.validate(tol=1e-6)
    out = None
    for name in METRIC_NAMES:
        term = getattr(weights, name) * np.asarray(normalized[name], dtype=np.float64)
        out = term if out is None else out + term
    return out


def score_tokens(metrics: TokenMetrics, weights: MetricWeights = DEFAULT_WEIGHTS) -> ScoreVector:
    normalized = {k: robust_normalize(v) for k, v in metrics.as_dict().items()}
    return ScoreVector(normalized=normalized, score=fuse_scores(normalized, weights), weights=weights)


def select_top_k(scores, k: int, layer: int = -1) -> RetainedSet:
    """The ``k`` highest scores; equal scores prefer the smaller index."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="stable")
    keep = np.sort(order[:k])
    return RetainedSet(layer=layer, indices=keep.astype(np.int64), budget=int(k))


def kept_rows(layout: SequenceLayout, retained: RetainedSet) -> np.ndarray:
    idx = np.asarray(retained.indices, dtype=np.int64)
    v = layout.visual_count
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise PruningError("pruning text or out-of-range token")
    if np.any(np.diff(idx) <= 0):
        raise PruningError("retained indices must be strictly increasing")
    return np.concatenate([idx, np.arange(v, len(layout), dtype=np.int64)])


def apply_pruning(layout: SequenceLayout, retained: RetainedSet,
                  cache: Optional[KVCacheState] = None) -> Tuple[SequenceLayout, Optional[KVCacheState]]:
    """Drop the unselected visual tokens from the layout and from every cache
    layer deeper than ``retained.layer``. Text tokens always survive and no
    position id is renumbered.
    """
    rows = kept_rows(layout, retained)
    new_layout = layout.take(rows)
    if cache is None:
        return new_layout, None
    dropped = np.setdiff1d(layout.position_ids, new_layout.position_ids)
    layers: List[LayerCache] = []
    for depth, entry in enumerate(cache.layers):
        if depth <= retained.layer or dropped.size == 0:
            layers.append(entry)
            continue
        keep = np.flatnonzero(~np.isin(entry.position_ids, dropped))
        layers.append(LayerCache(
            keys=[take_rows(k, keep) for k in entry.keys],
            values=[take_rows(v, keep) for v in entry.values],
            position_ids=entry.position_ids[keep],
        ))
    return new_layout, KVCacheState(mode=cache.mode, layers=layers, next_position=cache.next_position)


class TokenPruner:
    """Forward-pass hook that enforces a recipe's budgets at its candidate layers."""

    def __init__(self, recipe: PruningRecipe, act_bits: Optional[int] = 4,
                 weights: Optional[MetricWeights] = None):
        self.recipe = recipe
        self.act_bits = act_bits
        self.weights = weights if weights is not None else recipe.metric_weights
        self.budgets = {l: compute_budget(r, recipe.v0) for l, r in zip(recipe.candidate_layers, recipe.keep_ratios)}

    def __call__(self, record: LayerActivationRecord) -> Optional[RetainedSet]:
        budget = self.budgets.get(record.layer)
        if budget is None:
            return None
        scores = score_tokens(compute_metrics(record, self.act_bits), self.weights)
        return select_top_k(scores.score, budget, layer=record.layer)


class ReplayPruner:
    """Re-applies a fixed set of retained original positions, layer by layer."""

    def __init__(self, retained: Iterable[RetainedSet]):
        self.by_layer = {r.layer: r for r in retained}

    def __call__(self, record: LayerActivationRecord) -> Optional[RetainedSet]:
        r = self.by_layer.get(record.layer)
        if r is None:
            return None
        positions = record.layout.visual_positions
        idx = np.flatnonzero(np.isin(positions, r.positions))
        return RetainedSet(layer=record.layer, indices=idx, budget=r.budget)


def write_trace(path, retained: Iterable[RetainedSet]) -> None:
    """JSON-lines trace, one ``{layer, budget, retained_indices}`` object per line."""
    lines = [json.dumps(r.to_trace(), sort_keys=True) for r in retained]
    Path(path).write_text("".join(l + "\n" for l in lines), encoding="utf-8")
