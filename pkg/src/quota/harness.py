"""Run the toy model under the stage-wise and collaborative integration orders.

Modes:

``fp_baseline``      FP, no pruning (the reference for divergence)
``quant_only``       low-bit, clip ratios fitted on the unpruned graph
``prune_only``       FP with recipe pruning
``quant_then_prune`` clip ratios fitted on the unpruned graph, then pruned low-bit execution
``prune_then_quant`` clip ratios fitted on the pruned FP subgraph, then pruned low-bit execution
``collaborative``    clip ratios fitted on the pruned low-bit execution; scores include
                     the quantization residual

All pruning modes share one recipe. The stage-wise modes score tokens with
magnitude and attention only (the residual weight is spread over the other
three), mirroring a pruner designed without knowledge of the quantizer.

Divergence is the L2 distance of final-position logits from ``fp_baseline``;
it is a desk-scale stand-in and not a benchmark retention number.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .calibrate import (
    DEFAULT_ETA,
    DEFAULT_P_MIN,
    DEFAULT_TAU,
    DEFAULT_WINDOW,
    CalibrationResult,
    calibrate_activation_clips,
    calibrate_recipe,
)
from .gflops import CostModel, GflopsReport, pipeline_flops, recipe_flops
from .model import Model, ModelConfig, QuantConfig, forward_prefill, init_model, make_samples
from .numeric import l2_norm
from .recipe import DEFAULT_WEIGHTS, MetricWeights, PruningRecipe
from .selection import TokenPruner
from .sequence import Sample

MODES = ("collaborative", "fp_baseline", "prune_only", "prune_then_quant", "quant_only", "quant_then_prune")
PRUNING_MODES = frozenset({"collaborative", "prune_only", "prune_then_quant", "quant_then_prune"})
QUANT_MODES = frozenset({"collaborative", "prune_then_quant", "quant_only", "quant_then_prune"})

DIVERGENCE_LABEL = "mean L2 distance of final-position logits from fp_baseline (desk-scale proxy, not retention)"

CALIB_STREAM, EVAL_STREAM = 1, 2


class ConfigError(ValueError):
    pass


def stream_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


@dataclass(frozen=True)
class PipelineConfig:
    mode: str = "collaborative"
    seed: int = 0
    model: ModelConfig = ModelConfig()
    quant: QuantConfig = QuantConfig()
    calib_samples: int = 16
    eval_samples: int = 8
    v0: int = 64
    text_range: tuple = (8, 32)
    p_min: float = DEFAULT_P_MIN
    tau: float = DEFAULT_TAU
    window: int = DEFAULT_WINDOW
    eta: float = DEFAULT_ETA
    metric_weights: MetricWeights = DEFAULT_WEIGHTS
    text_len: int = 16  # fixed text-length proxy for the FLOPs estimate

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; choose from {', '.join(MODES)}")
        if self.calib_samples < 1 or self.eval_samples < 1:
            raise ConfigError("calib_samples and eval_samples must be >= 1")
        if self.v0 < 1:
            raise ConfigError("v0 must be >= 1")
        if not 0 < self.p_min <= 1:
            raise ConfigError("p_min must lie in (0, 1]")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.text_len < 0:
            raise ConfigError("text_len must be >= 0")
        try:
            self.metric_weights.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kw = dict(d)
        try:
            if "model" in kw:
                kw["model"] = ModelConfig(**kw["model"])
            if "quant" in kw:
                kw["quant"] = QuantConfig(**kw["quant"])
            if "metric_weights" in kw:
                kw["metric_weights"] = MetricWeights(**kw["metric_weights"])
            if "text_range" in kw:
                kw["text_range"] = tuple(kw["text_range"])
            cfg = cls(**kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config: {exc}") from None
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["text_range"] = list(self.text_range)
        return d

    def cost_model(self) -> CostModel:
        m = self.model
        return CostModel(n_layers=m.n_layers, d_model=m.d_model, d_ff=m.d_ff, n_heads=m.n_heads, text_len=self.text_len)


@dataclass(eq=False)
class Context:
    """Everything derived from a config before any mode runs."""

    config: PipelineConfig
    model: Model
    qmodel: Model  # clip ratios fitted on the unpruned graph
    calib: List[Sample]
    calibration: Optional[CalibrationResult] = None


def build_context(config: PipelineConfig) -> Context:
    config.validate()
    model = init_model(config.model, config.quant)
    calib = make_samples(config.model, config.calib_samples, stream_seed(config.seed, CALIB_STREAM),
                         config.v0, config.text_range, model.embedding)
    qmodel = model.with_clip_ratios(calibrate_activation_clips(model, calib, "fp"))
    return Context(config, model, qmodel, calib)


def eval_samples_for(config: PipelineConfig, model: Model, n: Optional[int] = None) -> List[Sample]:
    return make_samples(config.model, n or config.eval_samples, stream_seed(config.seed, EVAL_STREAM),
                        config.v0, config.text_range, model.embedding)


def calibrate(ctx: Context) -> CalibrationResult:
    if ctx.calibration is None:
        c = ctx.config
        ctx.calibration = calibrate_recipe(ctx.qmodel, ctx.calib, window=c.window, tau=c.tau, p_min=c.p_min,
                                           weights=c.metric_weights, eta=c.eta)
    return ctx.calibration


def sample_digest(samples: Sequence[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        h.update(np.ascontiguousarray(s.embeddings).tobytes())
        h.update(s.layout.position_ids.tobytes())
    return h.hexdigest()[:16]


def logits_digest(logits: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(logits, dtype=np.float64).tobytes()).hexdigest()[:16]


@dataclass(eq=False)
class RunReport:
    mode: str
    seed: int
    recipe_digest: Optional[str]
    sample_digest: str
    logits_digests: List[str]
    divergences: List[float]
    initial_lengths: List[int]
    final_lengths: List[int]
    final_visual_counts: List[int]
    retained: List[List[dict]]
    gflops: dict
    extras: dict = field(default_factory=dict)

    @property
    def mean_divergence(self) -> float:
        return float(np.mean(self.divergences))

    @property
    def mean_final_visual(self) -> float:
        return float(np.mean(self.final_visual_counts))

    def to_dict(self) -> dict:
        return {
            "header": {"tool": "quota", "version": __version__, "seed": self.seed, "recipe_digest": self.recipe_digest},
            "mode": self.mode,
            "sample_digest": self.sample_digest,
            "divergence_metric": DIVERGENCE_LABEL,
            "mean_divergence": self.mean_divergence,
            "samples": [
                {"logits_digest": d, "divergence": div, "initial_length": n0, "final_length": n1,
                 "final_visual_count": v, "retained": r}
                for d, div, n0, n1, v, r in zip(self.logits_digests, self.divergences, self.initial_lengths,
                                                self.final_lengths, self.final_visual_counts, self.retained)
            ],
            "gflops": self.gflops,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        try:
            samples = d["samples"]
            return cls(
                mode=d["mode"],
                seed=d["header"]["seed"],
                recipe_digest=d["header"]["recipe_digest"],
                sample_digest=d["sample_digest"],
                logits_digests=[s["logits_digest"] for s in samples],
                divergences=[float(s["divergence"]) for s in samples],
                initial_lengths=[int(s["initial_length"]) for s in samples],
                final_lengths=[int(s["final_length"]) for s in samples],
                final_visual_counts=[int(s["final_visual_count"]) for s in samples],
                retained=[s["retained"] for s in samples],
                gflops=d["gflops"],
            )
        except (KeyError, TypeError) as exc:
            raise ValueError(f"not a run report: missing {exc}") from None


def _check_recipe(recipe: PruningRecipe, config: PipelineConfig) -> None:
    n = config.model.n_layers
    if recipe.candidate_layers and max(recipe.candidate_layers) >= n:
        raise ConfigError(f"recipe/model layer mismatch: recipe prunes at layer {max(recipe.candidate_layers)}, "
                         f"model has {n} layers")
    if recipe.v0 != config.v0:
        raise ConfigError(f"recipe/model mismatch: recipe v0={recipe.v0}, samples carry {config.v0} visual tokens")


def plan_mode(ctx: Context, mode: str, recipe: Optional[PruningRecipe]):
    """(model, execution mode, pruner) for ``mode``."""
    act_bits = ctx.config.quant.act_bits
    score_bits = act_bits if act_bits is not None else 4
    if mode == "fp_baseline":
        return ctx.model, "fp", None
    if mode == "quant_only":
        return ctx.qmodel, "quantized", None
    stage_weights = recipe.metric_weights.without("quant")
    if mode == "prune_only":
        return ctx.model, "fp", TokenPruner(recipe, score_bits, stage_weights)
    if mode == "quant_then_prune":
        return ctx.qmodel, "quantized", TokenPruner(recipe, score_bits, stage_weights)
    if mode == "prune_then_quant":
        pruner = TokenPruner(recipe, score_bits, stage_weights)
        clips = calibrate_activation_clips(ctx.model, ctx.calib, "fp", pruner)
        return ctx.model.with_clip_ratios(clips), "quantized", pruner
    if mode == "collaborative":
        pruner = TokenPruner(recipe, score_bits)
        clips = calibrate_activation_clips(ctx.qmodel, ctx.calib, "quantized", pruner)
        return ctx.model.with_clip_ratios(clips), "quantized", pruner
    raise ConfigError(f"unknown mode {mode!r}")


def run_pipeline(config: PipelineConfig, eval_samples: Optional[Sequence[Sample]] = None,
                 recipe: Optional[PruningRecipe] = None, ctx: Optional[Context] = None) -> RunReport:
    """Evaluate one mode; pass ``ctx`` to share model and calibration between modes."""
    config.validate()
    ctx = ctx or build_context(config)
    mode = config.mode
    samples = list(eval_samples) if eval_samples is not None else eval_samples_for(config, ctx.model)
    if mode in PRUNING_MODES and recipe is None:
        recipe = calibrate(ctx).recipe
    if recipe is not None:
        _check_recipe(recipe, config)
    model, exec_mode, pruner = plan_mode(ctx, mode, recipe)

    digests, divs, n0, n1, vis, trace = [], [], [], [], [], []
    for sample in samples:
        base = forward_prefill(ctx.model, sample, "fp").last_logits
        res = forward_prefill(model, sample, exec_mode, pruner)
        digests.append(logits_digest(res.logits))
        divs.append(l2_norm(res.last_logits - base))
        n0.append(len(sample.layout))
        n1.append(len(res.layout))
        vis.append(res.layout.visual_count)
        trace.append([r.to_trace() for r in res.retained])

    cost = config.cost_model()
    if mode in PRUNING_MODES:
        gflops = recipe_flops(recipe, cost)
    else:
        gflops = pipeline_flops([config.v0] * cost.n_layers, cost, config.v0)
    return RunReport(
        mode=mode,
        seed=config.seed,
        recipe_digest=recipe.digest() if recipe is not None and mode in PRUNING_MODES else None,
        sample_digest=sample_digest(samples),
        logits_digests=digests,
        divergences=divs,
        initial_lengths=n0,
        final_lengths=n1,
        final_visual_counts=vis,
        retained=trace,
        gflops=gflops.to_dict(),
    )


COLUMNS = ("mode", "divergence", "divergence_delta", "final_visual_tokens", "gflops_ratio_pct")


@dataclass(eq=False)
class ComparisonTable:
    rows: List[dict]

    def to_dict(self) -> dict:
        return {"columns": list(COLUMNS), "divergence_metric": DIVERGENCE_LABEL, "rows": self.rows}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def render_text(self) -> str:
        cells = [list(COLUMNS)]
        for r in self.rows:
            cells.append([
                r["mode"],
                f"{r['divergence']:.6f}",
                f"{r['divergence_delta']:+.6f}",
                f"{r['final_visual_tokens']:.2f}",
                f"{r['gflops_ratio_pct']:.2f}",
            ])
        widths = [max(len(row[i]) for row in cells) for i in range(len(COLUMNS))]
        lines = []
        for j, row in enumerate(cells):
            parts = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
            lines.append("  ".join(parts).rstrip())
            if j == 0:
                lines.append("  ".join("-" * w for w in widths))
        return "\n".join(lines) + "\n"


def compare_report(reports: Sequence[RunReport]) -> ComparisonTable:
    """Rows sorted by mode; deltas are relative to the first report given."""
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    digests = {r.sample_digest for r in reports}
    if len(digests) != 1:
        raise ValueError("sample-set mismatch: reports were evaluated on different samples")
    ref = reports[0].mean_divergence
    rows = [
        {
            "mode": r.mode,
            "divergence": r.mean_divergence,
            "divergence_delta": r.mean_divergence - ref,
            "final_visual_tokens": r.mean_final_visual,
            "gflops_ratio_pct": float(r.gflops["ratio_pct"]),
        }
        for r in reports
    ]
    rows.sort(key=lambda row: row["mode"])
    return ComparisonTable(rows)
