"""Deterministic training loop: transform -> forward -> gated loss -> SGD.

A run writes ``config.json``, ``metrics.jsonl`` (one epoch per line),
``checkpoints/epoch_N.ckpt`` and a final ``report.md`` into its run
directory, and can resume from the latest checkpoint. All randomness flows
through per-epoch generators derived from ``(seed, epoch)``, so an
interrupted run continues on exactly the trajectory of an uninterrupted one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as losses_mod
from .datasets import (
    DatasetSpec,
    ImbalanceProfile,
    exponential_profile,
    load_dataset,
    read_index_file,
    subsample_indices,
)
from .errors import ConfigError, NumericError
from .losses import ClassMargins, ClassWeights, LossBreakdown
from .model import ModelAssembly, assemble, gate_distribution, load_checkpoint, save_checkpoint
from .transforms import TaskKind, apply_composed, sample_outcome


@dataclass(frozen=True)
class LRSchedule:
    """Initial rate plus multiplicative drops: lr(e) = initial * prod(factors at milestones <= e)."""

    initial: float
    milestones: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        epochs = [m for m, _ in self.milestones]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ConfigError(f"milestones must be strictly increasing, got {epochs}")
        if any(not 0.0 < f <= 1.0 for _, f in self.milestones):
            raise ConfigError("milestone factors must lie in (0, 1]")


def lr_at(epoch: int, schedule: LRSchedule) -> float:
    lr = schedule.initial
    for milestone, factor in schedule.milestones:
        if milestone <= epoch:
            lr *= factor
    return lr


@dataclass
class TrainConfig:
    dataset: DatasetSpec
    tasks: tuple[TaskKind, ...]
    imbalance_ratio: float | None = None
    index_file: str | None = None  # reuse a prepared subsample instead of resampling
    ssl_ratio: float = 0.1
    epochs: int = 300
    batch_size: int = 128
    schedule: LRSchedule = field(default_factory=lambda: LRSchedule(0.1))
    momentum: float = 0.9
    weight_decay: float = 2e-4
    drw_epoch: int | None = None
    drw_beta: float = losses_mod.DEFAULT_EFFECTIVE_BETA
    max_margin: float = losses_mod.DEFAULT_MAX_MARGIN
    ldam_scale: float = losses_mod.DEFAULT_LOGIT_SCALE
    seed: int = 0
    backbone: str = "resnet32-cifar"
    gate_detach: bool = False
    standardize: bool = True
    checkpoint_every: int = 1
    eval_batch_size: int = 256
    # Extra learning rate on the per-task heads only (classifier, gate and
    # backbone stay at the base rate). The task heads see gradients scaled by
    # ssl_ratio * gate, which on short desk-scale runs is far too little for
    # a freshly initialized linear head; boosting just those heads leaves the
    # loss (and so every logged value) untouched.
    head_lr_multiplier: float = 1.0

    def __post_init__(self):
        self.tasks = tuple(self.tasks)
        if not self.tasks:
            raise ConfigError("need at least one pretext task")
        if len(set(self.tasks)) != len(self.tasks):
            raise ConfigError(f"duplicate task in {[t.value for t in self.tasks]}")
        if self.ssl_ratio < 0:
            raise ConfigError(f"ssl_ratio must be >= 0, got {self.ssl_ratio}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.head_lr_multiplier <= 0:
            raise ConfigError(f"head_lr_multiplier must be > 0, got {self.head_lr_multiplier}")
        for milestone, _ in self.schedule.milestones:
            if not 0 <= milestone < self.epochs:
                raise ConfigError(
                    f"milestone {milestone} outside [0, {self.epochs})"
                )

    def to_dict(self) -> dict:
        d = {
            "dataset": vars(self.dataset).copy(),
            "tasks": [t.value for t in self.tasks],
            "schedule": {
                "initial": self.schedule.initial,
                "milestones": [list(m) for m in self.schedule.milestones],
            },
        }
        for key in (
            "imbalance_ratio", "index_file", "ssl_ratio", "epochs", "batch_size",
            "momentum", "weight_decay", "drw_epoch", "drw_beta", "max_margin",
            "ldam_scale", "seed", "backbone", "gate_detach", "standardize",
            "checkpoint_every", "eval_batch_size", "head_lr_multiplier",
        ):
            d[key] = getattr(self, key)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["dataset"] = DatasetSpec(**d["dataset"])
        d["tasks"] = tuple(TaskKind(t) for t in d["tasks"])
        sched = d["schedule"]
        d["schedule"] = LRSchedule(
            sched["initial"], tuple((int(m), float(f)) for m, f in sched["milestones"])
        )
        return cls(**d)


def default_config(dataset_name: str, **overrides) -> TrainConfig:
    """Per-dataset defaults: 300-epoch SGD recipes for the real datasets,
    a seconds-scale recipe for the synthetic one."""
    if dataset_name in ("cifar10", "cifar100"):
        base = dict(
            dataset=DatasetSpec(dataset_name, root=overrides.pop("root", None) or "."),
            tasks=(TaskKind.LOROT_E,),
            epochs=300,
            batch_size=128,
            schedule=LRSchedule(0.1, ((160, 0.01), (180, 0.01))),
            drw_epoch=160,
            backbone="resnet32-cifar",
        )
    elif dataset_name == "tiny-imagenet":
        base = dict(
            dataset=DatasetSpec(dataset_name, root=overrides.pop("root", None) or "."),
            tasks=(TaskKind.LOROT_E,),
            epochs=300,
            batch_size=256,
            schedule=LRSchedule(0.1, ((75, 0.1), (150, 0.1), (225, 0.1))),
            drw_epoch=None,
            backbone="resnet18",
        )
    elif dataset_name == "synthetic":
        # Desk-scale recipe: full-batch steps, slow backbone/gate, fast task
        # heads, margin loss without the baseline's 30x logit scale (which
        # presumes a normalized classifier and destabilizes the raw affine
        # head used here).
        base = dict(
            dataset=DatasetSpec("synthetic"),
            tasks=(TaskKind.LOROT_E, TaskKind.QUAD_FLIP, TaskKind.CHANNEL_SHUFFLE),
            epochs=25,
            batch_size=256,
            schedule=LRSchedule(0.01),
            drw_epoch=None,
            backbone="tinycnn",
            ldam_scale=1.0,
            head_lr_multiplier=80.0,
        )
    else:
        raise ConfigError(f"unknown dataset {dataset_name!r}")
    base.update(overrides)
    return TrainConfig(**base)


@dataclass
class EpochMetrics:
    epoch: int
    l_c: float
    per_task_gated: dict[str, float]
    l_tot: float
    ssl_acc: dict[str, float]
    mean_gate: dict[str, float]
    val_acc: float
    lr: float

    def to_json(self) -> str:
        return json.dumps(vars(self), sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "EpochMetrics":
        return cls(**json.loads(line))


def build_batch(examples, tasks, rng: np.random.Generator):
    """Transform each example once per task and stack into tensors.

    Quadrants and parameters are sampled independently per task and per
    example. The class target stays the original supervised label; the
    self-labels come from the sampled outcomes. Returns
    ``(images (B,3,H,W) float32, class_targets (B,), ssl_targets per task)``.
    """
    tasks = tuple(tasks)
    if not tasks:
        raise ConfigError("need at least one pretext task")
    images, class_targets = [], []
    ssl_targets: dict[TaskKind, list[int]] = {task: [] for task in tasks}
    for example in examples:
        outcomes = [sample_outcome(task, rng) for task in tasks]
        transformed, labels = apply_composed(example.image, outcomes)
        images.append(transformed.astype(np.float32, copy=False))
        class_targets.append(example.class_label)
        for task in tasks:
            ssl_targets[task].append(labels[task])
    return (
        torch.from_numpy(np.stack(images)),
        torch.tensor(class_targets, dtype=torch.int64),
        {task: torch.tensor(v, dtype=torch.int64) for task, v in ssl_targets.items()},
    )


@dataclass
class Standardizer:
    """Per-channel affine normalization, stats frozen from the training split."""

    mean: np.ndarray  # (3,)
    std: np.ndarray  # (3,)

    @classmethod
    def fit(cls, images: np.ndarray) -> "Standardizer":
        mean = images.mean(axis=(0, 2, 3))
        std = images.std(axis=(0, 2, 3))
        return cls(mean, np.maximum(std, 1e-6))

    @classmethod
    def fit_streaming(cls, dataset) -> "Standardizer":
        """Single pass over a lazy dataset accumulating per-channel moments."""
        total = np.zeros(3)
        total_sq = np.zeros(3)
        count = 0
        for i in range(len(dataset)):
            img = dataset[i].image.astype(np.float64)
            total += img.sum(axis=(1, 2))
            total_sq += (img**2).sum(axis=(1, 2))
            count += img.shape[1] * img.shape[2]
        mean = total / count
        var = np.maximum(total_sq / count - mean**2, 0.0)
        return cls(mean, np.maximum(np.sqrt(var), 1e-6))

    def __call__(self, batch: torch.Tensor) -> torch.Tensor:
        mean = torch.as_tensor(self.mean, dtype=batch.dtype).view(1, 3, 1, 1)
        std = torch.as_tensor(self.std, dtype=batch.dtype).view(1, 3, 1, 1)
        return (batch - mean) / std


@dataclass
class TrainState:
    """Everything a training step needs beyond the batch itself."""

    config: TrainConfig
    model: ModelAssembly
    optimizer: torch.optim.SGD
    margins: ClassMargins
    class_weights: ClassWeights
    standardizer: Standardizer | None


@dataclass
class StepResult:
    breakdown: LossBreakdown
    gate_mean: np.ndarray  # (t,)
    ssl_correct: dict[TaskKind, int]
    batch_size: int
    drw_active: bool


def train_step(state: TrainState, batch, epoch: int) -> StepResult:
    """One SGD step on one transformed batch.

    Deferred reweighting: class weights enter the supervised loss only from
    ``drw_epoch`` on. Aborts with a diagnostic on non-finite loss.
    """
    images, class_targets, ssl_targets = batch
    config = state.config
    if state.standardizer is not None:
        images = state.standardizer(images)
    state.model.train()
    out = state.model(images)
    gate = gate_distribution(out.gate_logits)
    drw_active = config.drw_epoch is not None and epoch >= config.drw_epoch
    weights = state.class_weights if drw_active else None
    _, l_c = losses_mod.ldam_loss(out.class_logits, class_targets, state.margins, weights)
    task_losses = [losses_mod.task_ce(out.ssl_logits[task], ssl_targets[task]) for task in config.tasks]
    breakdown = losses_mod.gated_total_loss(l_c, gate, task_losses, config.ssl_ratio)
    if not torch.isfinite(breakdown.l_tot):
        raise NumericError(
            f"non-finite total loss at epoch {epoch}: "
            f"l_c={float(breakdown.l_c):g}, gated={breakdown.per_task_gated.tolist()}"
        )
    state.optimizer.zero_grad()
    breakdown.l_tot.backward()
    state.optimizer.step()

    ssl_correct = {
        task: int((out.ssl_logits[task].detach().argmax(dim=1) == ssl_targets[task]).sum())
        for task in config.tasks
    }
    return StepResult(
        breakdown=breakdown,
        gate_mean=gate.detach().mean(dim=0).numpy(),
        ssl_correct=ssl_correct,
        batch_size=images.shape[0],
        drw_active=drw_active,
    )


def evaluate(model: ModelAssembly, dataset, batch_size: int = 256, standardizer=None) -> float:
    """Top-1 accuracy on untransformed images; argmax ties go to the lowest index."""
    model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            examples = [dataset[i] for i in range(start, min(start + batch_size, len(dataset)))]
            images = torch.from_numpy(
                np.stack([e.image.astype(np.float32, copy=False) for e in examples])
            )
            if standardizer is not None:
                images = standardizer(images)
            logits = model(images).class_logits.numpy()
            predictions = np.argmax(logits, axis=1)
            labels = np.array([e.class_label for e in examples])
            correct += int((predictions == labels).sum())
    return correct / len(dataset)


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Independent, reproducible stream per (seed, epoch)."""
    return np.random.default_rng(np.random.SeedSequence([seed, epoch]))


def _prepare_train_split(config: TrainConfig):
    """Load data and realize the long-tailed scenario if one is requested."""
    train, eval_split = load_dataset(config.dataset)
    profile = None
    if config.index_file is not None:
        header, indices = read_index_file(config.index_file)
        profile = ImbalanceProfile(
            len(header["counts"]), tuple(header["counts"]), header["ratio"]
        )
        train = train.subset(indices)
    elif config.imbalance_ratio is not None:
        counts = np.bincount(train.labels, minlength=train.num_classes)
        profile = exponential_profile(
            train.num_classes, int(counts.min()), config.imbalance_ratio
        )
        indices = subsample_indices(train.labels, profile, config.seed)
        train = train.subset(indices)
    return train, eval_split, profile


def setup_state(config: TrainConfig):
    """Build (state, train split, eval split) from a config."""
    train, eval_split, _ = _prepare_train_split(config)
    counts = np.bincount(train.labels, minlength=train.num_classes)
    if np.any(counts == 0):
        raise ConfigError(f"every class needs at least one training sample, got {counts}")
    margins = losses_mod.ldam_margins(counts, config.max_margin, config.ldam_scale)
    class_weights = losses_mod.drw_weights(counts, config.drw_beta)
    standardizer = None
    if config.standardize:
        if hasattr(train, "images"):
            standardizer = Standardizer.fit(train.images)
        else:
            standardizer = Standardizer.fit_streaming(train)
    model = assemble(config.backbone, train.num_classes, config.tasks, config.seed, config.gate_detach)
    optimizer = build_optimizer(model, config)
    state = TrainState(config, model, optimizer, margins, class_weights, standardizer)
    return state, train, eval_split


def build_optimizer(model: ModelAssembly, config: TrainConfig) -> torch.optim.SGD:
    """SGD with momentum and weight decay on all parameters; the per-task
    heads form their own group so ``head_lr_multiplier`` can apply."""
    head_params = [p for n, p in model.named_parameters() if n.startswith("ssl_heads.")]
    base_params = [p for n, p in model.named_parameters() if not n.startswith("ssl_heads.")]
    return torch.optim.SGD(
        [
            {"params": base_params, "lr_scale": 1.0},
            {"params": head_params, "lr_scale": config.head_lr_multiplier},
        ],
        lr=config.schedule.initial,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
    )


def train_one_epoch(state: TrainState, train, epoch: int) -> tuple[dict, float]:
    """Run all batches of one epoch; returns (aggregates, lr used)."""
    config = state.config
    lr = lr_at(epoch, config.schedule)
    for group in state.optimizer.param_groups:
        group["lr"] = lr * group.get("lr_scale", 1.0)
    rng = epoch_rng(config.seed, epoch)
    order = rng.permutation(len(train))
    sums = {
        "l_c": 0.0,
        "l_tot": 0.0,
        "per_task": np.zeros(len(config.tasks)),
        "gate": np.zeros(len(config.tasks)),
        "ssl_correct": {task: 0 for task in config.tasks},
        "samples": 0,
        "batches": 0,
    }
    for start in range(0, len(order), config.batch_size):
        examples = [train[i] for i in order[start : start + config.batch_size]]
        batch = build_batch(examples, config.tasks, rng)
        result = train_step(state, batch, epoch)
        l_c, per_task, l_tot = result.breakdown.to_floats()
        sums["l_c"] += l_c
        sums["l_tot"] += l_tot
        sums["per_task"] += np.asarray(per_task)
        sums["gate"] += result.gate_mean
        for task in config.tasks:
            sums["ssl_correct"][task] += result.ssl_correct[task]
        sums["samples"] += result.batch_size
        sums["batches"] += 1
    return sums, lr


def _metrics_from_sums(config: TrainConfig, epoch: int, sums: dict, val_acc: float, lr: float) -> EpochMetrics:
    nb = sums["batches"]
    return EpochMetrics(
        epoch=epoch,
        l_c=sums["l_c"] / nb,
        per_task_gated={
            task.value: sums["per_task"][i] / nb for i, task in enumerate(config.tasks)
        },
        l_tot=sums["l_tot"] / nb,
        ssl_acc={
            task.value: sums["ssl_correct"][task] / sums["samples"] for task in config.tasks
        },
        mean_gate={
            task.value: sums["gate"][i] / nb for i, task in enumerate(config.tasks)
        },
        val_acc=val_acc,
        lr=lr,
    )


def _latest_checkpoint(ckpt_dir: Path) -> tuple[int, Path] | None:
    candidates = []
    for path in ckpt_dir.glob("epoch_*.ckpt"):
        try:
            candidates.append((int(path.stem.split("_")[1]), path))
        except (IndexError, ValueError):
            continue
    return max(candidates) if candidates else None


def write_report(run_dir: Path, config: TrainConfig, history: list[EpochMetrics]) -> None:
    last = history[-1]
    lines = [
        "# Training run",
        "",
        f"- dataset: {config.dataset.name}"
        + (f" (imbalance ratio {config.imbalance_ratio})" if config.imbalance_ratio else ""),
        f"- tasks: {', '.join(t.value for t in config.tasks)}",
        f"- backbone: {config.backbone}, seed {config.seed}, epochs {len(history)}",
        f"- final top-1 accuracy: {last.val_acc:.4f}",
        f"- final l_tot: {last.l_tot:.4f} (l_c {last.l_c:.4f})",
        f"- final mean gate: "
        + ", ".join(f"{k}={v:.3f}" for k, v in last.mean_gate.items()),
        "",
    ]
    (run_dir / "report.md").write_text("\n".join(lines))


def run(config: TrainConfig, out_dir: str | Path) -> Path:
    """Train per config, writing all artifacts under ``out_dir``.

    If ``out_dir`` already holds checkpoints of the same config, training
    resumes after the latest one and reproduces the uninterrupted trajectory.
    """
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = run_dir / "checkpoints"
    metrics_path = run_dir / "metrics.jsonl"

    state, train, eval_split = setup_state(config)
    (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))

    start_epoch = 0
    history: list[EpochMetrics] = []
    latest = _latest_checkpoint(ckpt_dir) if ckpt_dir.is_dir() else None
    if latest is not None:
        epoch, path = latest
        model, _, optimizer_state, _ = load_checkpoint(path)
        state.model = model
        state.optimizer = build_optimizer(model, config)
        if optimizer_state is not None:
            state.optimizer.load_state_dict(optimizer_state)
        start_epoch = epoch + 1
        if metrics_path.is_file():
            for line in metrics_path.read_text().splitlines():
                if line.strip():
                    m = EpochMetrics.from_json(line)
                    if m.epoch <= epoch:
                        history.append(m)
            metrics_path.write_text("".join(m.to_json() + "\n" for m in history))

    with metrics_path.open("a") as metrics_file:
        for epoch in range(start_epoch, config.epochs):
            sums, lr = train_one_epoch(state, train, epoch)
            val_acc = evaluate(state.model, eval_split, config.eval_batch_size, state.standardizer)
            metrics = _metrics_from_sums(config, epoch, sums, val_acc, lr)
            history.append(metrics)
            metrics_file.write(metrics.to_json() + "\n")
            metrics_file.flush()
            if (epoch + 1) % config.checkpoint_every == 0 or epoch == config.epochs - 1:
                extra = None
                if state.standardizer is not None:
                    extra = {
                        "standardizer_mean": state.standardizer.mean.tolist(),
                        "standardizer_std": state.standardizer.std.tolist(),
                    }
                save_checkpoint(
                    ckpt_dir / f"epoch_{epoch}.ckpt",
                    state.model,
                    epoch,
                    config.seed,
                    state.optimizer.state_dict(),
                    extra,
                )
    write_report(run_dir, config, history)
    return run_dir
