"""Multi-task training objective.

Binary dimensions use mean binary cross-entropy on logits over every
forecast position; continuous dimensions use mean squared error restricted
to days the user was actually active (inactive days carry no signal about
magnitudes, but they do carry the binary signal, so binary dimensions stay
supervised everywhere).  Per-dimension losses are combined with learnable
log-variances s_i:

    total = sum_i exp(-s_i)/2 * L_i + s_i          (default)
    total = sum_i exp(-s_i)   * L_i + s_i          (variant "appendix")

The additive s_i term keeps any dimension from being assigned zero
uncertainty.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datamodel import TaskKind, TaskSpec

LOSS_VARIANTS = ("equation", "appendix")


@dataclass
class LossBreakdown:
    """Unweighted per-dimension losses plus their weighted combination."""

    per_dim: np.ndarray           # (d_u,) unweighted L_i, indexed by dimension
    total: float
    log_vars_snapshot: np.ndarray
    node: Tensor                  # graph node carrying the total, for backward()


def bce(logits: Tensor | np.ndarray, targets: np.ndarray) -> Tensor:
    """Numerically stable mean binary cross-entropy over all positions."""
    if not isinstance(logits, Tensor):
        logits = Tensor(np.asarray(logits, dtype=np.float64))
    t = np.asarray(targets, dtype=np.float64)
    if not np.all(np.isin(t, (0.0, 1.0))):
        raise ValueError("bce targets must be 0 or 1")
    return ad.bce_with_logits(logits, t.astype(logits.dtype)).mean()


def masked_mse(
    pred: Tensor | np.ndarray, target: np.ndarray, mask: np.ndarray
) -> Tensor:
    """Mean squared error over mask-true positions; an all-false mask yields
    exactly 0 with zero gradient."""
    if not isinstance(pred, Tensor):
        pred = Tensor(np.asarray(pred, dtype=np.float64))
    t = np.asarray(target, dtype=pred.dtype)
    m = np.asarray(mask)
    if t.shape != pred.shape or m.shape != pred.shape:
        raise ValueError(
            f"shape mismatch: pred {pred.shape}, target {t.shape}, mask {m.shape}"
        )
    count = int(m.sum())
    diff = (pred - Tensor(t)) * Tensor(m.astype(pred.dtype))
    return (diff * diff).sum() / float(max(count, 1))


def multitask_loss(
    per_dim_losses: Sequence[Tensor | float],
    log_vars: Tensor,
    variant: str = "equation",
) -> Tensor:
    """Uncertainty-weighted combination of per-dimension losses."""
    if variant not in LOSS_VARIANTS:
        raise ValueError(f"unknown loss variant {variant!r}")
    if len(per_dim_losses) != log_vars.data.size:
        raise ValueError(
            f"{len(per_dim_losses)} losses but {log_vars.data.size} log-variances"
        )
    parts = [
        (li if isinstance(li, Tensor) else Tensor(np.asarray(li, dtype=log_vars.dtype))).reshape(1)
        for li in per_dim_losses
    ]
    stacked = ad.concat(parts, axis=0)
    precision = (-log_vars).exp()
    if variant == "equation":
        weighted = precision * stacked * 0.5 + log_vars
    else:
        weighted = precision * stacked + log_vars
    return weighted.sum()


def compute_loss(
    predictions: Tensor,
    sample,
    task_specs: Sequence[TaskSpec],
    model,
) -> LossBreakdown:
    """Dispatch each behavioral dimension to its loss family and combine.

    ``sample`` may be a single TrainingSample or a stacked batch; only its
    ``targets`` and ``activity_mask`` fields are consulted.
    """
    d_u = predictions.shape[-1]
    if len(task_specs) != d_u:
        raise ValueError(f"{len(task_specs)} task specs for {d_u} prediction dims")
    targets = np.asarray(sample.targets)
    mask = np.asarray(sample.activity_mask)
    if targets.shape != predictions.shape:
        raise ValueError(
            f"targets shape {targets.shape} != predictions shape {predictions.shape}"
        )

    dt = predictions.dtype
    per_dim: list[Tensor | None] = [None] * d_u
    eye = np.eye(d_u, dtype=dt)
    for spec in task_specs:
        col = (predictions * Tensor(eye[spec.index])).sum(axis=-1)
        if spec.kind is TaskKind.BINARY:
            per_dim[spec.index] = bce(col, targets[..., spec.index])
        else:
            per_dim[spec.index] = masked_mse(
                col, targets[..., spec.index], mask[..., spec.index]
            )

    log_vars = model.p("log_vars")
    node = multitask_loss(per_dim, log_vars, model.config.loss_variant)
    return LossBreakdown(
        per_dim=np.array([li.item() for li in per_dim]),
        total=node.item(),
        log_vars_snapshot=log_vars.data.copy(),
        node=node,
    )
