"""Scanner-robust attention MIL training on frozen tile features.

Adds a paired-scan contrastive loss on tile embeddings and a paired score
loss to an attention-MIL classifier, and measures robustness with
inconsistency / classification agreement. A synthetic cohort generator with
planted scanner confounds stands in for real whole-slide data.
"""

from robustmil.errors import (
    ConfigError,
    DataError,
    DimensionError,
    IntegrityError,
    NumericError,
    RobustMilError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DimensionError",
    "IntegrityError",
    "NumericError",
    "RobustMilError",
]
