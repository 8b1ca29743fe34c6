import numpy as np
import pytest

from quota.model import ModelConfig, QuantConfig, decode_step, forward_prefill, init_model
from quota.quant import QuantizedTensor
from quota.selection import PruningError, ReplayPruner, RetainedSet
from quota.sequence import TEXT, KVCacheState, LayerCache, Sample, SequenceLayout


def drop_at(layer, local_indices_to_drop):
    def hook(record):
        if record.layer != layer:
            return None
        keep = np.setdiff1d(np.arange(record.layout.visual_count), local_indices_to_drop)
        return RetainedSet(layer=layer, indices=keep, budget=keep.size)
    return hook


def keep_all(record):
    return RetainedSet(record.layer, np.arange(record.layout.visual_count), record.layout.visual_count)


def extend(sample, token_row):
    pos = np.append(sample.layout.position_ids, sample.layout.position_ids[-1] + 1)
    mod = np.append(sample.layout.modality, TEXT)
    return Sample(np.vstack([sample.embeddings, token_row]), SequenceLayout(pos, mod))


def test_same_seed_same_weights():
    cfg = ModelConfig(seed=5)
    assert init_model(cfg).checksum() == init_model(cfg).checksum()
    assert init_model(ModelConfig(seed=1)).checksum() != init_model(ModelConfig(seed=2)).checksum()


def test_parameter_count_closed_form():
    cfg = ModelConfig(n_layers=4, n_heads=2, d_model=8, d_head=4, d_ff=32)
    # 2 RMS gains (8 each) + Q, K, V, O (8x8 each) + up (32x8) + down (8x32)
    assert cfg.params_per_layer() == 2 * 8 + 4 * 64 + 2 * 256 == 784
    model = init_model(cfg)
    for layer in model.layers:
        assert sum(w.size for w in layer.values()) == 784


@pytest.mark.parametrize("kwargs", [
    dict(d_model=30, n_heads=4, d_head=8),
    dict(n_layers=3),
    dict(d_model=12, n_heads=4, d_head=3),
])
def test_invalid_config(kwargs):
    with pytest.raises(ValueError):
        ModelConfig(**kwargs)


@pytest.mark.parametrize("mode", ["fp", "quantized"])
def test_attention_rows_normalized(small_model, small_samples, mode):
    res = forward_prefill(small_model, small_samples[0], mode)
    for rec in res.records:
        np.testing.assert_allclose(rec.attention.sum(axis=-1), 1.0, atol=1e-6)
        v = rec.layout.visual_count
        assert rec.attn_inter.shape == (small_model.config.n_heads, rec.layout.text_count, v)
        assert rec.attn_intra.shape == (small_model.config.n_heads, v, v)
        # visual queries never see text keys
        assert np.all(rec.attention[:, :v, v:] == 0)


@pytest.mark.parametrize("mode", ["fp", "quantized"])
def test_identity_pruning_is_bitwise_noop(small_model, small_samples, mode):
    for sample in small_samples:
        plain = forward_prefill(small_model, sample, mode)
        hooked = forward_prefill(small_model, sample, mode, keep_all)
        np.testing.assert_array_equal(plain.logits, hooked.logits)


def test_removing_one_token(small_model, small_samples):
    sample = small_samples[0]
    v0 = sample.layout.visual_count
    res = forward_prefill(small_model, sample, "fp", drop_at(2, [5]))
    counts = [r.layout.visual_count for r in res.records]
    assert counts == [v0, v0, v0, v0 - 1, v0 - 1, v0 - 1]
    for depth, entry in enumerate(res.cache.layers):
        assert (5 in entry.position_ids) == (depth <= 2)
    assert res.cache.token_counts() == [len(sample.layout)] * 3 + [len(sample.layout) - 1] * 3
    # survivors keep original positions
    np.testing.assert_array_equal(res.layout.position_ids, np.delete(sample.layout.position_ids, 5))


@pytest.mark.parametrize("bad", [[-1], [99]])
def test_hook_cannot_prune_text(small_model, small_samples, bad):
    def hook(record):
        return RetainedSet(record.layer, np.array(bad), 1) if record.layer == 1 else None
    with pytest.raises(PruningError, match="pruning text or out-of-range token"):
        forward_prefill(small_model, small_samples[0], "fp", hook)


def test_quantization_disabled_equals_fp(small_config, small_samples):
    model = init_model(small_config, QuantConfig.disabled())
    a = forward_prefill(model, small_samples[1], "fp")
    b = forward_prefill(model, small_samples[1], "quantized")
    np.testing.assert_array_equal(a.logits, b.logits)


def test_quantized_cache_holds_codes(small_model, small_samples):
    res = forward_prefill(small_model, small_samples[0], "quantized")
    entry = res.cache.layers[0].keys[0]
    assert isinstance(entry, QuantizedTensor)
    assert np.abs(entry.codes).max() <= 7


def test_prefill_is_deterministic(small_model, small_samples):
    a = forward_prefill(small_model, small_samples[2], "quantized", drop_at(1, [0, 3]))
    b = forward_prefill(small_model, small_samples[2], "quantized", drop_at(1, [0, 3]))
    np.testing.assert_array_equal(a.logits, b.logits)


@pytest.mark.parametrize("hook", [None, drop_at(2, [1, 4, 7])])
def test_decode_matches_full_recompute(small_model, small_samples, hook):
    token = 7
    for sample in small_samples:
        res = forward_prefill(small_model, sample, "fp", hook)
        step = decode_step(small_model, res.cache, token, "fp")
        full = forward_prefill(small_model, extend(sample, small_model.embedding[token]), "fp",
                               ReplayPruner(res.retained))
        np.testing.assert_allclose(step, full.last_logits, atol=1e-5, rtol=0)


def test_decode_appends_and_advances(small_model, small_samples):
    sample = small_samples[0]
    res = forward_prefill(small_model, sample, "fp", drop_at(1, [0]))
    before = res.cache.token_counts()
    decode_step(small_model, res.cache, 3, "fp")
    assert res.cache.token_counts() == [n + 1 for n in before]
    assert res.cache.next_position == len(sample.layout) + 1
    assert res.cache.layers[-1].position_ids[-1] == len(sample.layout)


def test_quantized_decode_equals_dequantized_cache(small_model, small_samples):
    res = forward_prefill(small_model, small_samples[0], "quantized", drop_at(3, [2]))
    shadow = KVCacheState(
        mode="quantized",
        layers=[LayerCache([k.dequantize() for k in e.keys], [v.dequantize() for v in e.values],
                           e.position_ids.copy()) for e in res.cache.layers],
        next_position=res.cache.next_position,
    )
    np.testing.assert_array_equal(decode_step(small_model, res.cache, 5, "quantized"),
                                  decode_step(small_model, shadow, 5, "quantized"))


def test_decode_mode_mismatch(small_model, small_samples):
    res = forward_prefill(small_model, small_samples[0], "fp")
    with pytest.raises(ValueError, match="mode"):
        decode_step(small_model, res.cache, 1, "quantized")
