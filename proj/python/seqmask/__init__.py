"""Sequential adversarial masking for contrastive pretraining."""

from ._core import (
    ContractViolation,
    IoError,
    Model,
    NumericError,
    TrainConfig,
    adversary_objective,
    budget_penalty,
    build_id,
    consistency_penalty,
    load_checkpoint,
    nt_xent,
    overlap_penalty,
    pretrain,
    run_cli,
    synthetic_shapes,
)

__all__ = [
    "ContractViolation",
    "IoError",
    "Model",
    "NumericError",
    "TrainConfig",
    "adversary_objective",
    "budget_penalty",
    "build_id",
    "consistency_penalty",
    "load_checkpoint",
    "nt_xent",
    "overlap_penalty",
    "pretrain",
    "run_cli",
    "synthetic_shapes",
]
