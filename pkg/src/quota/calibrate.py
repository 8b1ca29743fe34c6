"""Offline recipe generation from low-bit calibration.

1. Profile how far each candidate layer's output drifts under quantized
   execution (median relative deviation over calibration samples).
2. Rescale the drifts by their 10th-90th percentile band, clipped to
   [0.1, 0.9].
3. Split the total drop budget ``1 - p_min`` across layers with a
   temperature softmax that favours the least sensitive layers.
4. Accumulate drops into a non-increasing keep-ratio table ending at
   ``p_min``.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .model import Model, forward_prefill
from .numeric import l2_norm, median, median_pairwise_cosine, percentile, softmax_with_temperature
from .quant import fit_clip_ratio
from .recipe import DEFAULT_WEIGHTS, MetricWeights, PruningRecipe, RecipeError
from .sequence import Sample

DEFAULT_TAU = 0.25
DEFAULT_P_MIN = 0.30
DEFAULT_ETA = 1e-6
DEFAULT_WINDOW = 5
CLIP_LO, CLIP_HI = 0.1, 0.9


@dataclass(frozen=True, eq=False)
class SensitivityProfile:
    layers: tuple
    raw: np.ndarray
    normalized: np.ndarray
    eta: float
    sample_count: int

    def to_dict(self) -> dict:
        return {
            "layers": list(self.layers),
            "raw": [float(x) for x in self.raw],
            "normalized": [float(x) for x in self.normalized],
            "eta": self.eta,
            "sample_count": self.sample_count,
        }


@dataclass(frozen=True, eq=False)
class BudgetSchedule:
    candidate_layers: tuple
    drop_shares: np.ndarray
    drops: np.ndarray
    keep_ratios: np.ndarray
    tau: float
    p_min: float

    @property
    def budget(self) -> float:
        return 1.0 - self.p_min

    def check(self) -> None:
        r = self.keep_ratios
        m = len(self.candidate_layers)
        if not (len(self.drop_shares) == len(self.drops) == len(r) == m) or m == 0:
            raise RecipeError("schedule arrays must match the candidate layers")
        if abs(float(np.sum(self.drop_shares)) - 1.0) > 1e-9:
            raise RecipeError("drop shares must sum to 1")
        if np.any(np.diff(r) > 0):
            raise RecipeError("keep ratios must be non-increasing")
        if np.any(r < self.p_min) or r[-1] != self.p_min:
            raise RecipeError("keep ratios must end at, and never fall below, p_min")


@dataclass(frozen=True, eq=False)
class LayerDiagnostics:
    concentration: np.ndarray  # median over samples of the top-10 text->visual attention mass
    concentration_iqr: np.ndarray
    redundancy: np.ndarray  # median pairwise cosine among visual tokens
    top: int = 10

    @property
    def n_layers(self) -> int:
        return len(self.concentration)

    def to_dict(self) -> dict:
        return {
            "top": self.top,
            "layers": [
                {"layer": i, "concentration": float(c), "concentration_iqr": float(q), "redundancy": float(r)}
                for i, (c, q, r) in enumerate(zip(self.concentration, self.concentration_iqr, self.redundancy))
            ],
        }


def relative_deviation(x, x_q, eta: float = DEFAULT_ETA) -> float:
    return l2_norm(np.asarray(x_q) - np.asarray(x)) / (l2_norm(x) + eta)


def profile_sensitivity(model: Model, samples: Sequence[Sample], layers: Sequence[int],
                        eta: float = DEFAULT_ETA) -> SensitivityProfile:
    """Median relative drift of each layer's post-block hidden state, FP vs quantized."""
    if not samples:
        raise ValueError("no calibration samples")
    n = model.config.n_layers
    if any(not 0 <= l < n for l in layers):
        raise ValueError(f"candidate layers {list(layers)} out of range for {n} layers")
    per_layer: Dict[int, List[float]] = {l: [] for l in layers}
    for sample in samples:
        fp = forward_prefill(model, sample, "fp").records
        q = forward_prefill(model, sample, "quantized").records
        for l in layers:
            per_layer[l].append(relative_deviation(fp[l].output, q[l].output, eta))
    raw = np.array([median(per_layer[l]) for l in layers])
    return SensitivityProfile(tuple(layers), raw, normalize_sensitivities(raw), eta, len(samples))


def normalize_sensitivities(raw: Sequence[float]) -> np.ndarray:
    """``clip((S - P10) / (P90 - P10), 0.1, 0.9)``; a flat profile maps to 0.5."""
    s = np.asarray(raw, dtype=np.float64)
    if s.size == 0:
        raise ValueError("need at least one layer")
    p10, p90 = percentile(s, 10), percentile(s, 90)
    if p90 - p10 < 1e-12:
        return np.full(s.shape, 0.5)
    return np.clip((s - p10) / (p90 - p10), CLIP_LO, CLIP_HI)


def allocate_drop_shares(normalized: Sequence[float], tau: float = DEFAULT_TAU) -> np.ndarray:
    return softmax_with_temperature(1.0 - np.asarray(normalized, dtype=np.float64), tau)


def build_keep_schedule(shares: Sequence[float], p_min: float = DEFAULT_P_MIN) -> np.ndarray:
    pi = np.asarray(shares, dtype=np.float64)
    if not 0 < p_min <= 1:
        raise ValueError(f"p_min must lie in (0, 1], got {p_min}")
    if pi.size == 0 or np.any(pi < 0) or abs(float(pi.sum()) - 1.0) > 1e-9:
        raise ValueError("drop shares must be nonnegative and sum to 1")
    drops = (1.0 - p_min) * pi
    ratios = np.maximum(p_min, 1.0 - np.cumsum(drops))
    # the drops sum to the whole budget, so the table ends at p_min; pin it
    # against rounding in the cumulative sum
    ratios[-1] = p_min
    return ratios


def budget_schedule(layers: Sequence[int], normalized: Sequence[float], tau: float = DEFAULT_TAU,
                    p_min: float = DEFAULT_P_MIN) -> BudgetSchedule:
    pi = allocate_drop_shares(normalized, tau)
    sched = BudgetSchedule(tuple(int(l) for l in layers), pi, (1.0 - p_min) * pi,
                           build_keep_schedule(pi, p_min), tau, p_min)
    sched.check()
    return sched


def compute_diagnostics(model: Model, samples: Sequence[Sample], mode: str = "quantized",
                        top: int = 10) -> LayerDiagnostics:
    if not samples:
        raise ValueError("no calibration samples")
    n = model.config.n_layers
    conc = np.zeros((len(samples), n))
    red = np.zeros((len(samples), n))
    for i, sample in enumerate(samples):
        for rec in forward_prefill(model, sample, mode).records:
            inter = rec.attn_inter  # (heads, text, visual)
            k = min(top, inter.shape[-1])
            conc[i, rec.layer] = np.sort(inter, axis=-1)[..., -k:].sum(axis=-1).mean()
            red[i, rec.layer] = median_pairwise_cosine(rec.visual_states)
    return LayerDiagnostics(
        concentration=np.array([median(conc[:, l]) for l in range(n)]),
        concentration_iqr=np.array([percentile(conc[:, l], 75) - percentile(conc[:, l], 25) for l in range(n)]),
        redundancy=np.array([median(red[:, l]) for l in range(n)]),
        top=top,
    )


def select_candidate_layers(diagnostics: LayerDiagnostics, window: int = DEFAULT_WINDOW,
                            exclude_first: int = 2, exclude_last: Optional[int] = None) -> tuple:
    """Contiguous window maximising mean concentration minus mean redundancy.

    The first ``exclude_first`` layers and the last ``exclude_last`` (default:
    a quarter of the depth) are never candidates. Ties keep the earliest window.
    """
    n = diagnostics.n_layers
    if exclude_last is None:
        exclude_last = n // 4
    first, stop = exclude_first, n - exclude_last
    if window < 1 or stop - first < window:
        raise ValueError(f"infeasible candidate window: {window} layers within eligible range [{first}, {stop})")
    best, best_score = None, -np.inf
    for start in range(first, stop - window + 1):
        sl = slice(start, start + window)
        score = float(np.mean(diagnostics.concentration[sl]) - np.mean(diagnostics.redundancy[sl]))
        if score > best_score:
            best, best_score = start, score
    return tuple(range(best, best + window))


def emit_recipe(schedule: BudgetSchedule, weights: MetricWeights = DEFAULT_WEIGHTS, v0: int = 64,
                quant_digest: str = "", path=None) -> PruningRecipe:
    schedule.check()
    recipe = PruningRecipe(
        candidate_layers=schedule.candidate_layers,
        keep_ratios=tuple(float(r) for r in schedule.keep_ratios),
        metric_weights=weights,
        v0=v0,
        quant_digest=quant_digest,
    )
    recipe.validate()
    if path is not None:
        recipe.save(path)
    return recipe


def calibrate_activation_clips(model: Model, samples: Sequence[Sample], mode: str = "fp",
                               pruner=None) -> Dict[str, float]:
    """Fit one activation clip ratio per linear-layer input from the token rows
    that actually flow through it (so a pruner changes the result)."""
    bits = model.quant.act_bits
    if bits is None:
        return {}
    rows: Dict[str, list] = defaultdict(list)
    for sample in samples:
        forward_prefill(model, sample, mode, pruner, collector=lambda site, x: rows[site].append(x))
    return {site: fit_clip_ratio(np.concatenate(rows[site]), bits) for site in sorted(rows)}


@dataclass(eq=False)
class CalibrationResult:
    recipe: PruningRecipe
    diagnostics: LayerDiagnostics
    profile: SensitivityProfile
    schedule: BudgetSchedule
    extras: dict = field(default_factory=dict)


def calibrate_recipe(model: Model, samples: Sequence[Sample], *, window: int = DEFAULT_WINDOW,
                     tau: float = DEFAULT_TAU, p_min: float = DEFAULT_P_MIN,
                     weights: MetricWeights = DEFAULT_WEIGHTS, eta: float = DEFAULT_ETA,
                     candidate_layers: Optional[Sequence[int]] = None) -> CalibrationResult:
    """Diagnostics -> candidate window -> sensitivities -> schedule -> recipe."""
    if not samples:
        raise ValueError("no calibration samples")
    diagnostics = compute_diagnostics(model, samples)
    layers = tuple(candidate_layers) if candidate_layers is not None else select_candidate_layers(diagnostics, window)
    profile = profile_sensitivity(model, samples, layers, eta)
    schedule = budget_schedule(layers, profile.normalized, tau, p_min)
    v0 = samples[0].layout.visual_count
    recipe = emit_recipe(schedule, weights, v0, model.quant_digest())
    return CalibrationResult(recipe, diagnostics, profile, schedule)
