import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from quota.model import forward_prefill
from quota.recipe import MetricWeights, PruningRecipe
from quota.selection import (
    PruningError,
    RetainedSet,
    TokenMetrics,
    TokenPruner,
    apply_pruning,
    compute_budget,
    compute_metrics,
    fuse_scores,
    robust_normalize,
    score_tokens,
    select_top_k,
    write_trace,
)
from quota.sequence import KVCacheState, LayerActivationRecord, LayerCache, SequenceLayout

ONE_HOT = {name: MetricWeights(**{k: float(k == name) for k in ("mag", "inter", "intra", "quant")})
           for name in ("mag", "inter", "intra", "quant")}


@pytest.mark.parametrize("r, v0, k", [(0.30, 576, 173), (1.0, 64, 64), (0.5, 7, 4), (0.3, 10, 3), (0.7, 10, 7)])
def test_budget(r, v0, k):
    assert compute_budget(r, v0) == k


def _record(visual, text_count, attention):
    n_vis = visual.shape[0]
    layout = SequenceLayout.initial(n_vis, text_count)
    return LayerActivationRecord(layer=0, layout=layout, visual_states=visual,
                                 text_states=np.zeros((text_count, visual.shape[1])), attention=attention)


def test_metrics_uniform_attention():
    v, t, h = 5, 3, 2
    n = v + t
    att = np.full((h, n, n), 1.0 / n)
    rec = _record(np.random.default_rng(0).standard_normal((v, 4)), t, att)
    m = compute_metrics(rec)
    # each of the t text queries puts 1/n on every visual key
    np.testing.assert_allclose(m.inter, t / n)
    np.testing.assert_allclose(m.intra, v / n)


def test_metrics_zero_and_grid_tokens():
    visual = np.array([[0.0, 0.0, 0.0], [7.0, -7.0, 1.0], [0.7, 0.3, -0.1]])
    att = np.full((1, 5, 5), 0.2)
    m = compute_metrics(_record(visual, 2, att))
    assert m.mag[0] == 0 and m.quant[0] == 0
    assert m.quant[1] == 0  # already on the 4-bit grid of its own row
    assert m.quant[2] > 0
    assert m.mag[1] == pytest.approx(np.sqrt(99))


def test_metrics_head_mismatch():
    rec = _record(np.ones((2, 2)), 1, np.full((2, 3, 3), 1 / 3))
    with pytest.raises(ValueError, match="head count"):
        compute_metrics(rec, n_heads=4)


def _oracle_normalize(x):
    lo, hi = np.percentile(x, 5), np.percentile(x, 95)
    out = []
    for v in x:
        c = min(max(v, lo), hi)
        out.append((c - lo) / (hi - lo))
    return np.array(out)


def test_robust_normalize_examples(rng):
    np.testing.assert_array_equal(robust_normalize([2.0] * 6), [0.5] * 6)
    x = rng.standard_normal(20)
    out = robust_normalize(x)
    np.testing.assert_allclose(out, _oracle_normalize(x), atol=1e-12)
    assert out.min() == 0.0 and out.max() == 1.0
    # with 21 evenly spaced values P5 and P95 are the 2nd and 20th entries
    y = np.arange(21.0)
    out = robust_normalize(y)
    assert out[1] == 0.0 and out[19] == 1.0


def test_fuse_scores_examples(rng):
    ones = {k: np.ones(3) for k in ("mag", "inter", "intra", "quant")}
    np.testing.assert_allclose(fuse_scores(ones, MetricWeights()), 1.0, atol=1e-15)
    m = {k: rng.uniform(size=5) for k in ("mag", "inter", "intra", "quant")}
    np.testing.assert_array_equal(fuse_scores(m, ONE_HOT["mag"]), m["mag"])
    hand = [0.25 * m["mag"][i] + 0.45 * m["inter"][i] + 0.10 * m["intra"][i] + 0.20 * m["quant"][i] for i in range(5)]
    np.testing.assert_allclose(fuse_scores(m, MetricWeights()), hand, atol=1e-15)
    with pytest.raises(ValueError):
        fuse_scores(m, MetricWeights(0.3, 0.45, 0.1, 0.2))


def _oracle_topk(scores, k):
    ranked = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return sorted(ranked[:k])


def test_top_k_examples(rng):
    assert select_top_k([0.1, 0.9, 0.5], 2).indices.tolist() == [1, 2]
    assert select_top_k([0.3, 0.3, 0.3], 2).indices.tolist() == [0, 1]
    assert select_top_k([0.3, 0.1], 5).indices.tolist() == [0, 1]
    s = rng.uniform(size=50)
    assert select_top_k(s, 13).indices.tolist() == _oracle_topk(s.tolist(), 13)


@given(st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), min_size=1, max_size=60), st.integers(1, 70))
def test_top_k_with_ties_matches_oracle(scores, k):
    assert select_top_k(scores, k).indices.tolist() == _oracle_topk(scores, k)


@given(st.lists(st.floats(0.01, 100), min_size=3, max_size=40, unique=True), st.integers(1, 10),
       st.sampled_from(["log", "cube", "exp"]))
def test_selection_rank_invariance(values, k, transform):
    f = {"log": np.log, "cube": lambda x: x ** 3, "exp": lambda x: np.exp(x / 10)}[transform]
    x = np.asarray(values)
    base = select_top_k(robust_normalize(x), k).indices
    moved = select_top_k(robust_normalize(f(x)), k).indices
    # order statistics are preserved, so the clipped tails and interior ordering match
    assert base.tolist() == moved.tolist()


def _cache(layout, n_layers=3):
    layers = []
    for _ in range(n_layers):
        keys = [np.arange(len(layout) * 2, dtype=float).reshape(len(layout), 2)]
        layers.append(LayerCache(keys=keys, values=[k.copy() for k in keys], position_ids=layout.position_ids.copy()))
    return KVCacheState(mode="fp", layers=layers, next_position=len(layout))


def test_apply_pruning_retain_all_is_noop():
    layout = SequenceLayout.initial(4, 2)
    cache = _cache(layout)
    new_layout, new_cache = apply_pruning(layout, RetainedSet(0, np.arange(4), 4), cache)
    assert new_layout.equals(layout)
    for a, b in zip(cache.layers, new_cache.layers):
        np.testing.assert_array_equal(a.keys[0], b.keys[0])
        np.testing.assert_array_equal(a.position_ids, b.position_ids)


def test_apply_pruning_keep_first():
    layout = SequenceLayout.initial(4, 2)
    cache = _cache(layout)
    new_layout, new_cache = apply_pruning(layout, RetainedSet(0, np.array([0]), 1), cache)
    assert new_layout.visual_count == 1
    assert new_layout.position_ids.tolist() == [0, 4, 5]
    assert new_cache.token_counts() == [6, 3, 3]
    assert new_cache.layers[1].position_ids.tolist() == [0, 4, 5]


def test_apply_pruning_composes():
    layout = SequenceLayout.initial(8, 2)
    first = RetainedSet(1, np.array([0, 2, 3, 5, 7]), 5)
    second = RetainedSet(2, np.array([1, 2, 4]), 3)
    mid, _ = apply_pruning(layout, first)
    final, _ = apply_pruning(mid, second)
    composed = np.array([0, 2, 3, 5, 7])[[1, 2, 4]]
    assert final.visual_positions.tolist() == composed.tolist()
    assert final.position_ids[-2:].tolist() == [8, 9]


def test_apply_pruning_rejects_text():
    with pytest.raises(PruningError, match="pruning text"):
        apply_pruning(SequenceLayout.initial(3, 2), RetainedSet(0, np.array([0, 3]), 2))


def test_pruner_budgets_are_exact_and_nested(small_model, small_samples):
    recipe = PruningRecipe((1, 2, 3), (0.75, 0.5, 0.25), v0=12)
    res = forward_prefill(small_model, small_samples[0], "quantized", TokenPruner(recipe))
    counts = [r.layout.visual_count for r in res.records]
    assert counts == [12, 12, 9, 6, 3, 3]
    survivors = [set(r.positions.tolist()) for r in res.retained]
    assert survivors[1] <= survivors[0] and survivors[2] <= survivors[1]
    assert [r.budget for r in res.retained] == [9, 6, 3]


def test_pruner_budget_above_count_keeps_all(small_model, small_samples):
    recipe = PruningRecipe((1, 2), (0.25, 0.25), v0=12)
    res = forward_prefill(small_model, small_samples[0], "fp", TokenPruner(recipe))
    assert [r.layout.visual_count for r in res.records][2:] == [3, 3, 3, 3]


def test_score_tokens_from_record(small_model, small_samples):
    rec = forward_prefill(small_model, small_samples[0], "quantized").records[2]
    scores = score_tokens(compute_metrics(rec))
    for v in scores.normalized.values():
        assert np.all((v >= 0) & (v <= 1))
    assert scores.score.shape == (rec.layout.visual_count,)


def test_write_trace(tmp_path):
    sets = [RetainedSet(2, np.array([0, 1]), 2, positions=np.array([4, 9]))]
    write_trace(tmp_path / "t.jsonl", sets)
    rows = [json.loads(l) for l in (tmp_path / "t.jsonl").read_text().splitlines()]
    assert rows == [{"layer": 2, "budget": 2, "retained_indices": [4, 9]}]
