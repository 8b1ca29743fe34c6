"""Low-bit transformer inference with quantization-aware visual-token pruning."""

__version__ = "0.1.0"
