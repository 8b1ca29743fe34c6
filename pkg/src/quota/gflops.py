"""Prefill FLOPs accounting under depth-dependent visual-token pruning.

Per layer, with ``S = T + V_hat`` live tokens and a multiply-accumulate
counted as two FLOPs::

    projections (Q, K, V, O)   8 * S * d_model**2
    scores + weighted sum      4 * S**2 * d_model
    MLP (up, down)             4 * S * d_model * d_ff

The vision tower and projector enter as constants that do not change with
pruning.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

from .recipe import PruningRecipe
from .selection import compute_budget


@dataclass(frozen=True)
class CostModel:
    n_layers: int
    d_model: int
    d_ff: int
    n_heads: int = 1
    text_len: int = 16
    f_vt: float = 0.0
    f_pj: float = 0.0

    def __post_init__(self):
        if self.n_layers < 1 or self.d_model < 1 or self.d_ff < 1 or self.n_heads < 1:
            raise ValueError("cost model dims must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.text_len < 0 or self.f_vt < 0 or self.f_pj < 0:
            raise ValueError("text length and constant FLOPs must be nonnegative")


@dataclass(frozen=True)
class GflopsReport:
    v_hat: Tuple[int, ...]
    layer_costs: Tuple[float, ...]
    f_vlm: float
    f_base: float

    @property
    def ratio_pct(self) -> float:
        return self.f_vlm / self.f_base * 100.0

    def to_dict(self) -> dict:
        return {
            "layers": [{"layer": i, "v_hat": v, "cost": c} for i, (v, c) in enumerate(zip(self.v_hat, self.layer_costs))],
            "f_vlm": self.f_vlm,
            "f_base": self.f_base,
            "ratio_pct": self.ratio_pct,
        }


def layer_cost_terms(seq_len: int, d_model: int, d_ff: int) -> Tuple[float, float]:
    """(attention term, token-wise term) for one layer; the first is quadratic in ``seq_len``."""
    if seq_len < 1:
        raise ValueError(f"sequence length must be >= 1, got {seq_len}")
    s = float(seq_len)
    attention = 4.0 * s * s * d_model
    linear = 8.0 * s * d_model * d_model + 4.0 * s * d_model * d_ff
    return attention, linear


def layer_cost(seq_len: int, d_model: int, d_ff: int) -> float:
    attention, linear = layer_cost_terms(seq_len, d_model, d_ff)
    return attention + linear


def pipeline_flops(v_hat: Sequence[int], cost: CostModel, v0: int) -> GflopsReport:
    v_hat = tuple(int(v) for v in v_hat)
    if len(v_hat) != cost.n_layers:
        raise ValueError(f"need one executed length per layer ({cost.n_layers}), got {len(v_hat)}")
    if any(v < 0 or v > v0 for v in v_hat):
        raise ValueError(f"executed visual lengths must lie in [0, {v0}]")
    if any(b > a for a, b in zip(v_hat, v_hat[1:])):
        raise ValueError("executed visual lengths must be non-increasing over depth")
    t = cost.text_len
    costs = tuple(layer_cost(t + v, cost.d_model, cost.d_ff) for v in v_hat)
    base_layer = layer_cost(t + v0, cost.d_model, cost.d_ff)
    const = cost.f_vt + cost.f_pj
    f_vlm = const + sum(costs)
    f_base = const + base_layer * cost.n_layers
    return GflopsReport(v_hat, costs, f_vlm, f_base)


def executed_lengths(recipe: PruningRecipe, n_layers: int) -> List[int]:
    """Visual tokens entering each layer when ``recipe`` prunes after a candidate layer."""
    if recipe.candidate_layers and max(recipe.candidate_layers) >= n_layers:
        raise ValueError(f"recipe prunes at layer {max(recipe.candidate_layers)} but the model has {n_layers} layers")
    budgets = {l: compute_budget(r, recipe.v0) for l, r in zip(recipe.candidate_layers, recipe.keep_ratios)}
    live, out = recipe.v0, []
    for layer in range(n_layers):
        out.append(live)
        if layer in budgets:
            live = min(live, budgets[layer])
    return out


def recipe_flops(recipe: PruningRecipe, cost: CostModel) -> GflopsReport:
    return pipeline_flops(executed_lengths(recipe, cost.n_layers), cost, recipe.v0)
