"""A small seeded decoder whose input is a visual-token prefix plus text.

Block structure (pre-norm, no biases)::

    h = x + W_o . attn(rope(W_q . rms(x)), rope(W_k . rms(x)), W_v . rms(x))
    [optional pruning of visual rows of h]
    out = h + W_down . gelu(W_up . rms(h))

Visual queries attend to all visual keys; text queries attend to every
visual key and causally to text keys. Positions are rotary and always use
the token's original position id, so pruning never shifts positions.

In ``quantized`` mode every linear layer runs as a simulated W/A low-bit
operator, queries are fake-quantized per token and head, and keys/values are
stored in the cache as per-token, per-head integer codes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .numeric import matmul, matmul_t, softmax_rows
from .quant import QuantizedTensor, fake_quant_tokens, kv_quantize, quantize_weight
from .selection import PruningError, RetainedSet, apply_pruning, kept_rows
from .sequence import (
    TEXT,
    VISUAL,
    KVCacheState,
    LayerActivationRecord,
    LayerCache,
    Sample,
    SequenceLayout,
    append_rows,
    materialize,
)

MODES = ("fp", "quantized")
LINEAR_NAMES = ("wq", "wk", "wv", "wo", "w_up", "w_down")

Pruner = Callable[[LayerActivationRecord], Optional[RetainedSet]]
Collector = Callable[[str, np.ndarray], None]


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 12
    n_heads: int = 4
    d_model: int = 32
    d_head: int = 8
    d_ff: int = 128
    vocab_size: int = 128
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_head", "d_ff", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError("d_model must equal n_heads * d_head")
        if self.n_layers < 4:
            raise ValueError("n_layers must be >= 4")
        if self.d_head % 2:
            raise ValueError("d_head must be even for rotary positions")

    def params_per_layer(self) -> int:
        d = self.d_model
        return 2 * d + 4 * d * d + 2 * d * self.d_ff


@dataclass(frozen=True)
class QuantConfig:
    """Bit-widths of the simulated low-bit path; ``None`` leaves that part in FP."""

    weight_bits: Optional[int] = 4
    act_bits: Optional[int] = 4
    kv_bits: Optional[int] = 4

    @classmethod
    def disabled(cls) -> "QuantConfig":
        return cls(None, None, None)

    @property
    def enabled(self) -> bool:
        return any(b is not None for b in (self.weight_bits, self.act_bits, self.kv_bits))


@dataclass(frozen=True, eq=False)
class Model:
    config: ModelConfig
    quant: QuantConfig
    embedding: np.ndarray
    layers: Tuple[Dict[str, np.ndarray], ...]
    final_norm: np.ndarray
    lm_head: np.ndarray
    qlayers: Tuple[Dict[str, QuantizedTensor], ...] = ()
    qhead: Optional[QuantizedTensor] = None
    clip_ratios: Mapping[str, float] = field(default_factory=dict)

    def with_quant(self, quant: QuantConfig) -> "Model":
        qlayers, qhead = _quantize_weights(self.layers, self.lm_head, quant.weight_bits)
        return dataclasses.replace(self, quant=quant, qlayers=qlayers, qhead=qhead)

    def with_clip_ratios(self, ratios: Mapping[str, float]) -> "Model":
        return dataclasses.replace(self, clip_ratios=dict(ratios))

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(dataclasses.asdict(self.config), sort_keys=True).encode())
        for arr in [self.embedding, self.final_norm, self.lm_head]:
            h.update(np.ascontiguousarray(arr).tobytes())
        for layer in self.layers:
            for name in sorted(layer):
                h.update(np.ascontiguousarray(layer[name]).tobytes())
        return h.hexdigest()

    def quant_digest(self) -> str:
        payload = {"quant": dataclasses.asdict(self.quant), "clip_ratios": dict(sorted(self.clip_ratios.items()))}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def embed_tokens(self, ids: Sequence[int]) -> np.ndarray:
        return self.embedding[np.asarray(ids, dtype=np.int64)]


def _quantize_weights(layers, lm_head, bits):
    if bits is None:
        return (), None
    qlayers = tuple({n: quantize_weight(layer[n], bits) for n in LINEAR_NAMES} for layer in layers)
    return qlayers, quantize_weight(lm_head, bits)


def init_model(config: ModelConfig, quant: QuantConfig = QuantConfig()) -> Model:
    """Draw all weights from ``np.random.default_rng(config.seed)`` in a fixed order."""
    rng = np.random.default_rng(config.seed)
    d, f = config.d_model, config.d_ff

    def dense(out_f, in_f):
        return rng.standard_normal((out_f, in_f)) / math.sqrt(in_f)

    embedding = rng.standard_normal((config.vocab_size, d))
    layers = []
    for _ in range(config.n_layers):
        layers.append({
            "ln1": np.ones(d),
            "wq": dense(d, d),
            "wk": dense(d, d),
            "wv": dense(d, d),
            "wo": dense(d, d),
            "ln2": np.ones(d),
            "w_up": dense(f, d),
            "w_down": dense(d, f),
        })
    lm_head = dense(config.vocab_size, d)
    model = Model(config=config, quant=quant, embedding=embedding, layers=tuple(layers),
                  final_norm=np.ones(d), lm_head=lm_head)
    return model.with_quant(quant)


def make_samples(model_config: ModelConfig, n: int, seed: int, v0: int = 64,
                 text_range: Tuple[int, int] = (8, 32), embedding: Optional[np.ndarray] = None) -> List[Sample]:
    """Synthetic prompts: ``v0`` visual embeddings with log-normal per-token
    scale, followed by 8-32 text tokens looked up in ``embedding``."""
    rng = np.random.default_rng(seed)
    lo, hi = text_range
    if not 1 <= lo <= hi:
        raise ValueError("invalid text length range")
    samples = []
    for _ in range(n):
        t = int(rng.integers(lo, hi + 1))
        vis = rng.standard_normal((v0, model_config.d_model)) * rng.lognormal(0.0, 0.5, size=(v0, 1))
        ids = rng.integers(0, model_config.vocab_size, size=t)
        txt = embedding[ids] if embedding is not None else rng.standard_normal((t, model_config.d_model))
        samples.append(Sample(np.concatenate([vis, txt]), SequenceLayout.initial(v0, t)))
    return samples


def _rms_norm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    return x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * gain


def _gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def _rope(x: np.ndarray, positions: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    inv_freq = 10000.0 ** (-np.arange(half, dtype=np.float64) / half)
    angle = positions.astype(np.float64)[:, None] * inv_freq[None, :]
    cos, sin = np.cos(angle), np.sin(angle)
    x1, x2 = x[:, :half], x[:, half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _attention_mask(q_layout: SequenceLayout, k_layout: SequenceLayout) -> np.ndarray:
    q_text = (q_layout.modality == TEXT)[:, None]
    k_vis = (k_layout.modality == VISUAL)[None, :]
    causal = k_layout.position_ids[None, :] <= q_layout.position_ids[:, None]
    return k_vis | (q_text & causal)


class _Runner:
    """Executes the shared per-layer math for one mode."""

    def __init__(self, model: Model, mode: str, collector: Optional[Collector] = None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        self.model = model
        self.quantized = mode == "quantized"
        self.collector = collector
        q = model.quant
        self.act_bits = q.act_bits if self.quantized else None
        self.kv_bits = q.kv_bits if self.quantized else None
        self.weight_bits = q.weight_bits if self.quantized else None

    def linear(self, x, layer: Optional[int], name: str, site: str) -> np.ndarray:
        if self.collector is not None:
            self.collector(site, x)
        m = self.model
        if self.quantized:
            x = fake_quant_tokens(x, self.act_bits, m.clip_ratios.get(site, 1.0))
        if layer is None:
            w = m.qhead.dequantize() if self.weight_bits is not None else m.lm_head
        else:
            w = m.qlayers[layer][name].dequantize() if self.weight_bits is not None else m.layers[layer][name]
        return matmul_t(x, w)

    def qkv(self, x, layer: int, positions: np.ndarray):
        m = self.model
        dh, nh = m.config.d_head, m.config.n_heads
        xn = _rms_norm(x, m.layers[layer]["ln1"])
        site = f"{layer}.attn_in"
        q = self.linear(xn, layer, "wq", site)
        k = self.linear(xn, layer, "wk", site)
        v = self.linear(xn, layer, "wv", site)
        qs, ks, vs = [], [], []
        for h in range(nh):
            sl = slice(h * dh, (h + 1) * dh)
            qh = _rope(q[:, sl], positions)
            kh = _rope(k[:, sl], positions)
            vh = v[:, sl]
            if self.quantized:
                qh = fake_quant_tokens(qh, self.act_bits)
            qs.append(qh)
            ks.append(kv_quantize(kh, self.kv_bits) if self.kv_bits is not None else kh)
            vs.append(kv_quantize(vh, self.kv_bits) if self.kv_bits is not None else vh)
        return qs, ks, vs

    def attend(self, qs, ks, vs, mask: np.ndarray, layer: int):
        scale = 1.0 / math.sqrt(self.model.config.d_head)
        probs, outs = [], []
        for qh, kh, vh in zip(qs, ks, vs):
            scores = np.where(mask, matmul_t(qh, materialize(kh)) * scale, -np.inf)
            p = softmax_rows(scores)
            probs.append(p)
            outs.append(matmul(p, materialize(vh)))
        out = self.linear(np.concatenate(outs, axis=-1), layer, "wo", f"{layer}.attn_out")
        return out, np.stack(probs)

    def mlp(self, h, layer: int) -> np.ndarray:
        hn = _rms_norm(h, self.model.layers[layer]["ln2"])
        up = _gelu(self.linear(hn, layer, "w_up", f"{layer}.mlp_in"))
        return self.linear(up, layer, "w_down", f"{layer}.mlp_hidden")

    def head(self, h) -> np.ndarray:
        return self.linear(_rms_norm(h, self.model.final_norm), None, "lm_head", "head")


@dataclass(eq=False)
class PrefillResult:
    logits: np.ndarray  # (live tokens after the last layer, vocab)
    records: List[LayerActivationRecord]
    cache: KVCacheState
    layout: SequenceLayout
    retained: List[RetainedSet]

    @property
    def last_logits(self) -> np.ndarray:
        return self.logits[-1]


def forward_prefill(model: Model, sample: Sample, mode: str = "fp", pruner: Optional[Pruner] = None,
                    collector: Optional[Collector] = None) -> PrefillResult:
    """Run the prompt through every layer, optionally pruning visual tokens.

    ``pruner`` is called with each layer's record and may return the visual
    rows to keep; the layer's own cache entry keeps every token that took part
    in its attention, deeper layers only see the survivors.
    """
    run = _Runner(model, mode, collector)
    h = np.asarray(sample.embeddings, dtype=np.float64)
    layout = sample.layout
    cache = KVCacheState(mode=mode, next_position=int(layout.position_ids[-1]) + 1 if len(layout) else 0)
    records: List[LayerActivationRecord] = []
    retained_log: List[RetainedSet] = []
    for layer in range(model.config.n_layers):
        qs, ks, vs = run.qkv(h, layer, layout.position_ids)
        attn_out, probs = run.attend(qs, ks, vs, _attention_mask(layout, layout), layer)
        h = h + attn_out
        cache.layers.append(LayerCache(keys=ks, values=vs, position_ids=layout.position_ids.copy()))
        v = layout.visual_count
        record = LayerActivationRecord(layer=layer, layout=layout, visual_states=h[:v], text_states=h[v:],
                                       attention=probs)
        if pruner is not None:
            retained = pruner(record)
            if retained is not None:
                if retained.layer != layer:
                    raise PruningError(f"pruner answered for layer {retained.layer} at layer {layer}")
                rows = kept_rows(layout, retained)
                retained = dataclasses.replace(retained, positions=layout.position_ids[retained.indices])
                layout, cache = apply_pruning(layout, retained, cache)
                h = h[rows]
                retained_log.append(retained)
        h = h + run.mlp(h, layer)
        record.output = h
        records.append(record)
    return PrefillResult(logits=run.head(h), records=records, cache=cache, layout=layout, retained=retained_log)


def decode_step(model: Model, cache: KVCacheState, new_token: Union[int, np.ndarray], mode: str) -> np.ndarray:
    """Logits for one new text token; its keys/values are appended to ``cache``."""
    if mode != cache.mode:
        raise ValueError(f"cache was built in {cache.mode!r} mode, step requested {mode!r}")
    if len(cache.layers) != model.config.n_layers:
        raise ValueError("cache does not cover every layer")
    run = _Runner(model, mode)
    if isinstance(new_token, (int, np.integer)):
        x = model.embedding[int(new_token)][None, :]
    else:
        x = np.asarray(new_token, dtype=np.float64).reshape(1, -1)
    pos = np.array([cache.next_position], dtype=np.int64)
    for layer, entry in enumerate(cache.layers):
        qs, ks, vs = run.qkv(x, layer, pos)
        entry.keys = [append_rows(old, new) for old, new in zip(entry.keys, ks)]
        entry.values = [append_rows(old, new) for old, new in zip(entry.values, vs)]
        entry.position_ids = np.concatenate([entry.position_ids, pos])
        mask = np.ones((1, len(entry)), dtype=bool)
        attn_out, _ = run.attend(qs, entry.keys, entry.values, mask, layer)
        x = x + attn_out
        x = x + run.mlp(x, layer)
    cache.next_position += 1
    return run.head(x)[0]
