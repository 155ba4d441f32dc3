"""Margin-based supervised loss, per-task cross-entropy, and the gated total.

The total training objective is

    l_tot = l_c + ssl_ratio * sum_n (1/B) * sum_i gate[i, n] * task_loss[n][i]

where ``gate`` is the row-stochastic output of the gating head and each task
loss is a per-sample cross-entropy on that task's self-labels. ``l_c`` is a
class-margin cross-entropy whose per-class margins scale with
``count^(-1/4)``, optionally reweighted late in training by effective-number
class weights (the deferred reweighting switch lives in the training loop).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, NumericError, ShapeError

DEFAULT_MAX_MARGIN = 0.5
DEFAULT_LOGIT_SCALE = 30.0
DEFAULT_EFFECTIVE_BETA = 0.9999


@dataclass(frozen=True)
class ClassMargins:
    """Per-class margins, largest for the rarest class."""

    deltas: np.ndarray  # (K,) float64, max entry == max_margin
    max_margin: float = DEFAULT_MAX_MARGIN
    scale: float = DEFAULT_LOGIT_SCALE


@dataclass(frozen=True)
class ClassWeights:
    """Effective-number class weights, normalized to mean 1."""

    weights: np.ndarray  # (K,) float64
    beta: float = DEFAULT_EFFECTIVE_BETA


@dataclass
class LossBreakdown:
    """One training step's loss terms; all entries are 0-dim tensors."""

    l_c: torch.Tensor
    per_task_gated: torch.Tensor  # (t,)
    l_tot: torch.Tensor

    def to_floats(self) -> tuple[float, list[float], float]:
        return (
            float(self.l_c.detach()),
            [float(v) for v in self.per_task_gated.detach()],
            float(self.l_tot.detach()),
        )


def ldam_margins(
    counts, max_margin: float = DEFAULT_MAX_MARGIN, scale: float = DEFAULT_LOGIT_SCALE
) -> ClassMargins:
    """Margins proportional to ``n_j**(-1/4)``, rescaled so the largest equals
    ``max_margin``. Invariant under rescaling all counts by a constant."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 1):
        raise ConfigError(f"class counts must be >= 1, got {counts}")
    if max_margin <= 0:
        raise ConfigError(f"max_margin must be positive, got {max_margin}")
    raw = counts ** (-0.25)
    deltas = max_margin * raw / raw.max()
    return ClassMargins(deltas, max_margin, scale)


def drw_weights(counts, beta: float = DEFAULT_EFFECTIVE_BETA) -> ClassWeights:
    """Inverse effective-number weights ``(1 - beta) / (1 - beta**n_j)``,
    normalized to mean 1 so the loss scale is comparable with and without
    reweighting."""
    if not 0.0 < beta < 1.0:
        raise ConfigError(f"beta must be in (0, 1), got {beta}")
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 1):
        raise ConfigError(f"class counts must be >= 1, got {counts}")
    raw = (1.0 - beta) / (1.0 - beta**counts)
    return ClassWeights(raw / raw.mean(), beta)


def _check_finite(t: torch.Tensor, what: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"{what} contains NaN or Inf")


def ldam_loss(
    class_logits: torch.Tensor,
    targets: torch.Tensor,
    margins: ClassMargins,
    weights: ClassWeights | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Cross-entropy over margin-shifted, scaled logits.

    The target class logit is lowered by its margin, everything is multiplied
    by ``margins.scale``, and per-sample losses are optionally weighted by the
    target's class weight. Returns (per-sample losses, weight-normalized
    mean).
    """
    _check_finite(class_logits, "class logits")
    K = class_logits.shape[1]
    if targets.min() < 0 or targets.max() >= K:
        raise ConfigError(f"targets must lie in [0, {K}), got {targets.tolist()}")
    deltas = torch.as_tensor(margins.deltas, dtype=class_logits.dtype, device=class_logits.device)
    shift = torch.zeros_like(class_logits)
    shift[torch.arange(class_logits.shape[0]), targets] = deltas[targets]
    scaled = margins.scale * (class_logits - shift)
    log_probs = torch.log_softmax(scaled, dim=1)
    per_sample = -log_probs[torch.arange(class_logits.shape[0]), targets]
    if weights is None:
        return per_sample, per_sample.mean()
    w = torch.as_tensor(weights.weights, dtype=per_sample.dtype, device=per_sample.device)[targets]
    weighted = per_sample * w
    return weighted, weighted.sum() / w.sum()


def task_ce(ssl_logits: torch.Tensor, ssl_labels: torch.Tensor) -> torch.Tensor:
    """Per-sample cross-entropy on a self-supervision head (stable log-sum-exp)."""
    _check_finite(ssl_logits, "ssl logits")
    C = ssl_logits.shape[1]
    if ssl_labels.min() < 0 or ssl_labels.max() >= C:
        raise ConfigError(f"ssl labels must lie in [0, {C})")
    log_probs = torch.log_softmax(ssl_logits, dim=1)
    return -log_probs[torch.arange(ssl_logits.shape[0]), ssl_labels]


def gated_total_loss(
    l_c: torch.Tensor,
    gate: torch.Tensor,
    task_losses: list[torch.Tensor] | tuple[torch.Tensor, ...],
    ssl_ratio: float,
) -> LossBreakdown:
    """Combine the supervised loss with the gate-weighted task losses.

    ``gate`` is (B, t) row-stochastic; ``task_losses[n]`` is the (B,)
    per-sample loss vector of task n. Each gated term is the batch mean of
    ``gate[:, n] * task_losses[n]``, so the meaning of ``ssl_ratio`` does not
    depend on the batch size.
    """
    if ssl_ratio < 0:
        raise ConfigError(f"ssl_ratio must be >= 0, got {ssl_ratio}")
    t = gate.shape[1]
    if len(task_losses) != t:
        raise ShapeError(f"gate has {t} columns but {len(task_losses)} task losses given")
    B = gate.shape[0]
    for n, losses in enumerate(task_losses):
        if losses.shape != (B,):
            raise ShapeError(f"task loss {n} has shape {tuple(losses.shape)}, expected ({B},)")
    per_task = torch.stack([(gate[:, n] * task_losses[n]).mean() for n in range(t)])
    l_tot = l_c + ssl_ratio * per_task.sum()
    return LossBreakdown(l_c=l_c, per_task_gated=per_task, l_tot=l_tot)
