"""mixview: gated mixture-of-views classification with baselines and a
cross-validated evaluation harness."""

from . import baselines, data, harness, metrics, mov, nn

__all__ = ["baselines", "data", "harness", "metrics", "mov", "nn"]
__version__ = "0.1.0"
