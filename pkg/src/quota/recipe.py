"""The pruning recipe: the offline artifact consumed at inference time.

On disk it is a JSON object with exactly these keys::

    {"schema_version": 1, "candidate_layers": [...], "keep_ratios": [...],
     "metric_weights": {"mag": .., "inter": .., "intra": .., "quant": ..},
     "v0": 64, "quant_digest": "..."}

Floats are written with ``repr`` precision so a reload is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple

SCHEMA_VERSION = 1

RECIPE_KEYS = ("schema_version", "candidate_layers", "keep_ratios", "metric_weights", "v0", "quant_digest")
WEIGHT_KEYS = ("mag", "inter", "intra", "quant")


class RecipeError(ValueError):
    """A recipe that is malformed or violates its invariants."""

    def __init__(self, message: str, pos: int | None = None):
        if pos is not None:
            message = f"{message} (at char {pos})"
        super().__init__(message)
        self.pos = pos


class SchemaVersionError(RecipeError):
    pass


@dataclass(frozen=True)
class MetricWeights:
    mag: float = 0.25
    inter: float = 0.45
    intra: float = 0.10
    quant: float = 0.20

    def as_dict(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in WEIGHT_KEYS}

    def validate(self, tol: float = 1e-9) -> None:
        vals = [getattr(self, k) for k in WEIGHT_KEYS]
        if any((not math.isfinite(v)) or v < 0 for v in vals):
            raise ValueError(f"metric weights must be finite and nonnegative: {self.as_dict()}")
        if abs(math.fsum(vals) - 1.0) > tol:
            raise ValueError(f"metric weights must sum to 1, got {math.fsum(vals)!r}")

    def without(self, name: str) -> "MetricWeights":
        """Zero one weight and spread it uniformly over the other three."""
        if name not in WEIGHT_KEYS:
            raise ValueError(f"unknown metric {name!r}")
        removed = getattr(self, name)
        d = {k: (0.0 if k == name else v + removed / 3.0) for k, v in self.as_dict().items()}
        return MetricWeights(**d)


DEFAULT_WEIGHTS = MetricWeights()


@dataclass(frozen=True)
class PruningRecipe:
    candidate_layers: Tuple[int, ...]
    keep_ratios: Tuple[float, ...]
    metric_weights: MetricWeights = DEFAULT_WEIGHTS
    v0: int = 64
    quant_digest: str = ""
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "candidate_layers", tuple(int(x) for x in self.candidate_layers))
        object.__setattr__(self, "keep_ratios", tuple(float(x) for x in self.keep_ratios))

    @property
    def final_keep_ratio(self) -> float:
        return self.keep_ratios[-1] if self.keep_ratios else 1.0

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise SchemaVersionError(
                f"recipe schema_version {self.schema_version!r} is not supported (expected {SCHEMA_VERSION})"
            )
        layers, ratios = self.candidate_layers, self.keep_ratios
        if len(layers) != len(ratios):
            raise RecipeError("candidate_layers and keep_ratios differ in length")
        if any(l < 0 for l in layers) or any(b <= a for a, b in zip(layers, layers[1:])):
            raise RecipeError("candidate_layers must be nonnegative and strictly increasing")
        if any(not (math.isfinite(r) and 0 < r <= 1) for r in ratios):
            raise RecipeError("keep_ratios must lie in (0, 1]")
        if any(b > a for a, b in zip(ratios, ratios[1:])):
            raise RecipeError("keep_ratios must be non-increasing")
        if isinstance(self.v0, bool) or not isinstance(self.v0, int) or self.v0 < 1:
            raise RecipeError("v0 must be a positive integer")
        if not isinstance(self.quant_digest, str):
            raise RecipeError("quant_digest must be a string")
        try:
            self.metric_weights.validate()
        except ValueError as exc:
            raise RecipeError(str(exc)) from None

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "candidate_layers": list(self.candidate_layers),
            "keep_ratios": list(self.keep_ratios),
            "metric_weights": self.metric_weights.as_dict(),
            "v0": self.v0,
            "quant_digest": self.quant_digest,
        }

    def to_json(self) -> str:
        self.validate()
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:16]

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def recipe_from_dict(obj) -> PruningRecipe:
    if not isinstance(obj, dict):
        raise RecipeError("recipe must be a JSON object")
    unknown = sorted(set(obj) - set(RECIPE_KEYS))
    if unknown:
        raise RecipeError(f"unknown recipe keys: {unknown}")
    missing = [k for k in RECIPE_KEYS if k not in obj]
    if missing:
        raise RecipeError(f"missing recipe keys: {missing}")
    if obj["schema_version"] != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"recipe schema_version {obj['schema_version']!r} is not supported (expected {SCHEMA_VERSION})"
        )
    w = obj["metric_weights"]
    if not isinstance(w, dict) or set(w) != set(WEIGHT_KEYS):
        raise RecipeError(f"metric_weights must have exactly the keys {list(WEIGHT_KEYS)}")
    layers, ratios = obj["candidate_layers"], obj["keep_ratios"]
    if not isinstance(layers, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in layers):
        raise RecipeError("candidate_layers must be a list of integers")
    if not isinstance(ratios, list) or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in ratios):
        raise RecipeError("keep_ratios must be a list of numbers")
    if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in w.values()):
        raise RecipeError("metric weights must be numbers")
    recipe = PruningRecipe(
        candidate_layers=tuple(layers),
        keep_ratios=tuple(ratios),
        metric_weights=MetricWeights(**{k: float(w[k]) for k in WEIGHT_KEYS}),
        v0=obj["v0"],
        quant_digest=obj["quant_digest"],
        schema_version=obj["schema_version"],
    )
    recipe.validate()
    return recipe


def parse_recipe(text: str) -> PruningRecipe:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RecipeError(f"malformed recipe: {exc.msg} (line {exc.lineno}, column {exc.colno})", exc.pos) from None
    return recipe_from_dict(obj)


def load_recipe(path) -> PruningRecipe:
    return parse_recipe(Path(path).read_text(encoding="utf-8"))
