"""Python facade over the native _tforge extension."""

import torch  # noqa: F401  (initializes tensor<->Python interop before _tforge loads)

from _tforge import (
    apply_trigger,
    evaluate_checkpoint,
    load_cifar10,
    make_synthetic,
    make_trigger_spec,
    poison_dataset,
    scan_checkpoint,
    ssim,
    train_model,
)

__all__ = [
    "apply_trigger",
    "evaluate_checkpoint",
    "load_cifar10",
    "make_synthetic",
    "make_trigger_spec",
    "poison_dataset",
    "scan_checkpoint",
    "ssim",
    "train_model",
]
