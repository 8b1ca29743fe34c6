"""Token layout, per-layer activation records and the KV cache state."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np

from .quant import QuantizedTensor, QuantParams

VISUAL = 0
TEXT = 1

CacheEntry = Union[QuantizedTensor, np.ndarray]


@dataclass(frozen=True, eq=False)
class SequenceLayout:
    """Original position ids and modality of every live token.

    Visual tokens form a prefix; text tokens follow. Pruning removes rows but
    never renumbers positions.
    """

    position_ids: np.ndarray
    modality: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.position_ids, dtype=np.int64)
        mod = np.asarray(self.modality, dtype=np.int8)
        object.__setattr__(self, "position_ids", pos)
        object.__setattr__(self, "modality", mod)
        if pos.ndim != 1 or pos.shape != mod.shape:
            raise ValueError("position_ids and modality must be 1-D and equal length")
        if pos.size > 1 and np.any(np.diff(pos) <= 0):
            raise ValueError("position_ids must be strictly increasing")
        if not np.all((mod == VISUAL) | (mod == TEXT)):
            raise ValueError("modality entries must be VISUAL or TEXT")
        if np.any(np.diff(mod) < 0):
            raise ValueError("visual tokens must precede text tokens")

    @classmethod
    def initial(cls, visual_count: int, text_count: int) -> "SequenceLayout":
        n = visual_count + text_count
        mod = np.array([VISUAL] * visual_count + [TEXT] * text_count, dtype=np.int8)
        return cls(np.arange(n, dtype=np.int64), mod)

    def __len__(self) -> int:
        return int(self.position_ids.size)

    @property
    def visual_count(self) -> int:
        return int(np.count_nonzero(self.modality == VISUAL))

    @property
    def text_count(self) -> int:
        return int(np.count_nonzero(self.modality == TEXT))

    @property
    def visual_positions(self) -> np.ndarray:
        return self.position_ids[: self.visual_count]

    def take(self, rows: np.ndarray) -> "SequenceLayout":
        return SequenceLayout(self.position_ids[rows], self.modality[rows])

    def equals(self, other: "SequenceLayout") -> bool:
        return np.array_equal(self.position_ids, other.position_ids) and np.array_equal(
            self.modality, other.modality
        )


@dataclass(frozen=True, eq=False)
class Sample:
    embeddings: np.ndarray
    layout: SequenceLayout

    def __post_init__(self):
        if self.embeddings.shape[0] != len(self.layout):
            raise ValueError("embedding rows must match the layout length")


@dataclass(eq=False)
class LayerActivationRecord:
    """What layer ``layer`` saw: the residual stream after attention (before any
    pruning at this layer) and the post-softmax attention split by modality.

    ``attn_inter`` is (heads, text queries, visual keys) and ``attn_intra`` is
    (heads, visual queries, visual keys). ``output`` is the post-block hidden
    state of the tokens that continued past this layer.
    """

    layer: int
    layout: SequenceLayout
    visual_states: np.ndarray
    text_states: np.ndarray
    attention: np.ndarray
    output: Optional[np.ndarray] = None

    @property
    def n_heads(self) -> int:
        return self.attention.shape[0]

    @property
    def attn_inter(self) -> np.ndarray:
        v = self.layout.visual_count
        return self.attention[:, v:, :v]

    @property
    def attn_intra(self) -> np.ndarray:
        v = self.layout.visual_count
        return self.attention[:, :v, :v]


@dataclass(eq=False)
class LayerCache:
    keys: List[CacheEntry]  # one (tokens, d_head) entry per head
    values: List[CacheEntry]
    position_ids: np.ndarray

    def __len__(self) -> int:
        return int(self.position_ids.size)


def take_rows(entry: CacheEntry, rows: np.ndarray) -> CacheEntry:
    if isinstance(entry, QuantizedTensor):
        params = QuantParams(bits=entry.params.bits, scale=entry.params.scale[rows], group_axis="row")
        return QuantizedTensor(entry.codes[rows], params)
    return entry[rows]


def append_rows(entry: CacheEntry, new: CacheEntry) -> CacheEntry:
    if isinstance(entry, QuantizedTensor) and isinstance(new, QuantizedTensor):
        params = QuantParams(
            bits=entry.params.bits,
            scale=np.concatenate([entry.params.scale, new.params.scale]),
            group_axis="row",
        )
        return QuantizedTensor(np.concatenate([entry.codes, new.codes]), params)
    as_fp = lambda e: e.dequantize() if isinstance(e, QuantizedTensor) else e
    return np.concatenate([as_fp(entry), as_fp(new)])


def materialize(entry: CacheEntry) -> np.ndarray:
    return entry.dequantize() if isinstance(entry, QuantizedTensor) else entry


@dataclass(eq=False)
class KVCacheState:
    """Per-layer keys/values of the tokens present when that layer attended.

    A token pruned at layer ``l`` still has an entry at ``l`` (its key was
    part of that layer's attention) but none at any deeper layer.
    """

    mode: str
    layers: List[LayerCache] = field(default_factory=list)
    next_position: int = 0

    def token_counts(self) -> List[int]:
        return [len(c) for c in self.layers]
