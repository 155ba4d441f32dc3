"""Gated self-supervised learning for long-tailed image classification.

Quadrant-localized pretext tasks (rotation, flip, channel shuffle) feed
per-task heads on a shared backbone; a learned softmax gate weights each
task's loss before it is added to a class-margin supervised loss.
"""

from .datasets import (
    DatasetSpec,
    ImbalanceProfile,
    LabeledExample,
    exponential_profile,
    load_dataset,
    subsample_indices,
    synthetic_dataset,
)
from .losses import (
    ClassMargins,
    ClassWeights,
    LossBreakdown,
    drw_weights,
    gated_total_loss,
    ldam_loss,
    ldam_margins,
    task_ce,
)
from .model import ForwardOutput, ModelAssembly, assemble, gate_distribution
from .training import (
    EpochMetrics,
    LRSchedule,
    TrainConfig,
    build_batch,
    default_config,
    evaluate,
    lr_at,
    run,
    train_step,
)
from .transforms import (
    LABEL_CARDINALITY,
    TASK_ORDER,
    TaskKind,
    TransformOutcome,
    apply_channel_shuffle,
    apply_composed,
    apply_lorot_e,
    apply_quadrant_flip,
    quadrant_bounds,
    sample_outcome,
)

__version__ = "0.1.0"
