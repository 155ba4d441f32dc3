"""Backbone + heads assembly.

One shared feature extractor feeds four kinds of affine heads: the K-way
classifier, one head per active pretext task (width = that task's label
cardinality), and a single gating head whose softmax output weights the task
losses. All heads read the same pooled feature vector.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError, ShapeError
from .transforms import LABEL_CARDINALITY, TaskKind

FEATURE_DIMS = {"resnet32-cifar": 64, "resnet18": 512, "tinycnn": 32}


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    feature_dim: int


def backbone_spec(name: str) -> BackboneSpec:
    if name not in FEATURE_DIMS:
        raise ConfigError(f"unknown backbone {name!r}; valid: {sorted(FEATURE_DIMS)}")
    return BackboneSpec(name, FEATURE_DIMS[name])


class BasicBlock(nn.Module):
    """Two 3x3 convs with identity (or 1x1 projected) shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


def _make_stage(in_ch: int, out_ch: int, blocks: int, stride: int) -> nn.Sequential:
    layers = [BasicBlock(in_ch, out_ch, stride)]
    layers += [BasicBlock(out_ch, out_ch, 1) for _ in range(blocks - 1)]
    return nn.Sequential(*layers)


class ResNetCifar32(nn.Module):
    """3 stages x 5 basic blocks, widths 16/32/64, global average pool -> 64."""

    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(16),
            nn.ReLU(inplace=True),
        )
        self.stage1 = _make_stage(16, 16, 5, 1)
        self.stage2 = _make_stage(16, 32, 5, 2)
        self.stage3 = _make_stage(32, 64, 5, 2)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        x = self.stage3(self.stage2(self.stage1(self.stem(x))))
        return torch.flatten(self.pool(x), 1)


class ResNet18(nn.Module):
    """Standard 4-stage basic-block variant, global average pool -> 512."""

    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 64, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, stride=2, padding=1),
        )
        self.stage1 = _make_stage(64, 64, 2, 1)
        self.stage2 = _make_stage(64, 128, 2, 2)
        self.stage3 = _make_stage(128, 256, 2, 2)
        self.stage4 = _make_stage(256, 512, 2, 2)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        x = self.stage4(self.stage3(self.stage2(self.stage1(self.stem(x)))))
        return torch.flatten(self.pool(x), 1)


class TinyCnn(nn.Module):
    """Two conv blocks and a 2x2 average pool -> 32 features.

    The final pool keeps a 2x2 spatial grid (aligned with the image
    quadrants) rather than collapsing to 1x1, so quadrant-local pretext
    signals survive into the feature vector. The pooled vector is batch
    normalized: averaging over positions otherwise leaves features orders of
    magnitude smaller than unit scale, which starves the linear heads on
    short runs. Desk-scale tests only.
    """

    def __init__(self):
        super().__init__()
        self.block1 = nn.Sequential(
            nn.Conv2d(3, 16, 3, padding=1, bias=False),
            nn.BatchNorm2d(16),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2),
        )
        self.block2 = nn.Sequential(
            nn.Conv2d(16, 8, 3, padding=1, bias=False),
            nn.BatchNorm2d(8),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.AdaptiveAvgPool2d(2)
        self.feature_norm = nn.BatchNorm1d(32)

    def forward(self, x):
        return self.feature_norm(torch.flatten(self.pool(self.block2(self.block1(x))), 1))


_BACKBONE_BUILDERS = {
    "resnet32-cifar": ResNetCifar32,
    "resnet18": ResNet18,
    "tinycnn": TinyCnn,
}


@dataclass
class ForwardOutput:
    features: torch.Tensor  # (B, D)
    class_logits: torch.Tensor  # (B, K)
    ssl_logits: dict[TaskKind, torch.Tensor]  # task -> (B, C_task)
    gate_logits: torch.Tensor  # (B, t)


class ModelAssembly(nn.Module):
    def __init__(
        self,
        spec: BackboneSpec,
        num_classes: int,
        tasks: tuple[TaskKind, ...],
        gate_detach: bool = False,
    ):
        super().__init__()
        self.spec = spec
        self.num_classes = num_classes
        self.tasks = tasks
        self.gate_detach = gate_detach
        self.backbone = _BACKBONE_BUILDERS[spec.name]()
        self.classifier = nn.Linear(spec.feature_dim, num_classes)
        self.ssl_heads = nn.ModuleDict(
            {task.value: nn.Linear(spec.feature_dim, LABEL_CARDINALITY[task]) for task in tasks}
        )
        self.gate_head = nn.Linear(spec.feature_dim, len(tasks))
        for head in [self.classifier, self.gate_head, *self.ssl_heads.values()]:
            nn.init.zeros_(head.bias)

    def forward(self, batch: torch.Tensor) -> ForwardOutput:
        if batch.ndim != 4 or batch.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) batch, got {tuple(batch.shape)}")
        features = self.backbone(batch)
        gate_input = features.detach() if self.gate_detach else features
        return ForwardOutput(
            features=features,
            class_logits=self.classifier(features),
            ssl_logits={task: self.ssl_heads[task.value](features) for task in self.tasks},
            gate_logits=self.gate_head(gate_input),
        )


def assemble(
    backbone: str | BackboneSpec,
    num_classes: int,
    tasks: tuple[TaskKind, ...] | list[TaskKind],
    seed: int,
    gate_detach: bool = False,
) -> ModelAssembly:
    """Build the full model with seed-deterministic initialization.

    Head weights keep the default fan-in-scaled init; head biases are zeroed.
    """
    spec = backbone_spec(backbone) if isinstance(backbone, str) else backbone
    tasks = tuple(tasks)
    if not tasks:
        raise ConfigError("need at least one pretext task")
    if len(set(tasks)) != len(tasks):
        raise ConfigError(f"duplicate task in {[t.value for t in tasks]}")
    torch.manual_seed(seed)
    return ModelAssembly(spec, num_classes, tasks, gate_detach)


def gate_distribution(gate_logits: torch.Tensor) -> torch.Tensor:
    """Row-wise softmax with max subtraction; rows sum to 1.

    For a single task the result is exactly 1.0 everywhere.
    """
    if not torch.isfinite(gate_logits).all():
        raise NumericError("gate logits contain NaN or Inf")
    shifted = gate_logits - gate_logits.max(dim=1, keepdim=True).values
    exp = torch.exp(shifted)
    return exp / exp.sum(dim=1, keepdim=True)


def save_checkpoint(
    path: str | Path,
    model: ModelAssembly,
    epoch: int,
    seed: int,
    optimizer_state: dict | None = None,
    extra: dict | None = None,
) -> None:
    """One archive: parameter tensors under stable names + a JSON manifest.

    ``extra`` holds JSON-able run context (e.g. normalization stats) needed
    to evaluate the checkpoint standalone.
    """
    manifest = {
        "backbone": model.spec.name,
        "num_classes": model.num_classes,
        "tasks": [t.value for t in model.tasks],
        "gate_detach": model.gate_detach,
        "seed": seed,
        "epoch": epoch,
    }
    payload = {
        "model_state": model.state_dict(),
        "manifest_json": json.dumps(manifest, sort_keys=True),
    }
    if optimizer_state is not None:
        payload["optimizer_state"] = optimizer_state
    if extra is not None:
        payload["extra_json"] = json.dumps(extra, sort_keys=True)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path: str | Path) -> tuple[ModelAssembly, dict, dict | None, dict | None]:
    """Rebuild the assembly from a checkpoint.

    Returns (model, manifest, optimizer state, extra).
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    manifest = json.loads(payload["manifest_json"])
    model = assemble(
        manifest["backbone"],
        manifest["num_classes"],
        [TaskKind(t) for t in manifest["tasks"]],
        manifest["seed"],
        manifest["gate_detach"],
    )
    model.load_state_dict(payload["model_state"])
    extra = json.loads(payload["extra_json"]) if "extra_json" in payload else None
    return model, manifest, payload.get("optimizer_state"), extra
