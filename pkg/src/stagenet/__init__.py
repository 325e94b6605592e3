"""stagenet: sequential multi-center training with knowledge-retention methods.

A small reverse-mode tensor core (`engine`), a compact residual conv
network with swappable classifier heads (`network`), the retention methods
themselves (`continual`), dataset plumbing (`data`), evaluation metrics
(`metrics`), and an experiment harness (config / checkpoints / reports /
CLI).
"""

from .engine import (
    Tensor,
    Tape,
    ParamSet,
    SGDMomentum,
    ShapeError,
    TapeError,
    ValidationError,
    backward,
    tensor,
)

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Tape",
    "ParamSet",
    "SGDMomentum",
    "ShapeError",
    "TapeError",
    "ValidationError",
    "backward",
    "tensor",
    "__version__",
]
