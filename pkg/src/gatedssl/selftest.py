"""Release-gate verification suite, runnable via ``gatedssl selftest``.

Every check pits a production code path against an independent reference
(closed forms, 50-digit arithmetic, brute enumeration, finite differences)
and is looked up dynamically on its module so fault injection in tests is
visible here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import mpmath
import numpy as np
import torch

from . import losses, model, oracles, transforms
from .datasets import exponential_profile, parse_cifar10_record, parse_cifar100_record
from .datasets import serialize_cifar10_record, serialize_cifar100_record
from .transforms import TaskKind


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str

    def __str__(self) -> str:
        return f"[{'ok' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def _distinct_image(size: int = 8, seed: int = 3) -> np.ndarray:
    rng = np.random.default_rng(seed)
    values = rng.permutation(3 * size * size).astype(np.float64)
    return (values / values.size).reshape(3, size, size)


def check_transform_cardinalities() -> str:
    img = _distinct_image()
    for task, cardinality in transforms.LABEL_CARDINALITY.items():
        pairs = oracles.enumerate_outcomes(task, img)
        labels = sorted(label for _, label in pairs)
        assert labels == list(range(cardinality)), f"{task.value}: labels {labels}"
        # production transforms must reproduce the oracle enumeration
        for out_img, label in pairs:
            if task is TaskKind.LOROT_E:
                produced, lab = transforms.apply_lorot_e(img, label // 4, label % 4)
            elif task is TaskKind.QUAD_FLIP:
                produced, lab = transforms.apply_quadrant_flip(img, 0, bool(label))
            else:
                produced, lab = transforms.apply_channel_shuffle(img, 0, label)
            assert lab == label
            assert np.array_equal(produced, out_img), f"{task.value} label {label} mismatch"
    return "16/2/6 outcomes, production and brute-force enumeration agree"


def check_gate_normalization() -> str:
    rng = np.random.default_rng(0)
    for _ in range(200):
        t = int(rng.integers(1, 5))
        logits = torch.tensor(rng.normal(scale=5.0, size=(int(rng.integers(1, 8)), t)))
        rows = model.gate_distribution(logits).sum(dim=1)
        assert torch.all((rows - 1.0).abs() < 1e-6), "row sums off"
    uniform = model.gate_distribution(torch.zeros(2, 3, dtype=torch.float64))
    assert torch.all(uniform == 1.0 / 3.0), "zero logits not uniform"
    closed = model.gate_distribution(torch.tensor([[float(np.log(2.0)), 0.0]], dtype=torch.float64))
    assert abs(float(closed[0, 0]) - 2.0 / 3.0) < 1e-9
    return "row-stochastic, uniform at zero, matches closed form"


def check_loss_composition() -> str:
    rng = np.random.default_rng(1)
    for _ in range(100):
        B, t = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        gate = model.gate_distribution(torch.tensor(rng.normal(size=(B, t))))
        task_losses = [torch.tensor(rng.uniform(0, 5, size=B)) for _ in range(t)]
        l_c = torch.tensor(rng.uniform(0, 3))
        lam = float(rng.uniform(0, 1))
        bd = losses.gated_total_loss(l_c, gate, task_losses, lam)
        recomputed = float(l_c) + lam * float(bd.per_task_gated.sum())
        assert abs(float(bd.l_tot) - recomputed) < 1e-9
        zero = losses.gated_total_loss(l_c, gate, task_losses, 0.0)
        assert float(zero.l_tot) == float(l_c), "lambda=0 must reduce to l_c"
    return "l_tot == l_c + ratio * sum(gated); ratio 0 reduces exactly"


def check_ldam_margins() -> str:
    margins = losses.ldam_margins([1000, 16], 0.5)
    with mpmath.workdps(40):
        expected = [
            float(mpmath.mpf("0.5") * mpmath.mpf(n) ** mpmath.mpf("-0.25") / mpmath.mpf(16) ** mpmath.mpf("-0.25"))
            for n in (1000, 16)
        ]
    assert np.allclose(margins.deltas, expected, atol=1e-4), f"{margins.deltas} vs {expected}"
    balanced = losses.ldam_margins([500] * 7, 0.5)
    assert np.allclose(balanced.deltas, 0.5, atol=1e-12)
    scaled = losses.ldam_margins([16000, 256], 0.5)
    assert np.allclose(scaled.deltas, margins.deltas, atol=1e-12), "not scale invariant"
    return f"deltas {np.round(margins.deltas, 5).tolist()} match the fourth-root law"


def check_drw_weights() -> str:
    balanced = losses.drw_weights([100] * 5, 0.9999)
    assert np.all(balanced.weights == 1.0), "balanced counts must give unit weights"
    w = losses.drw_weights([5000, 50], 0.9999)
    ratio = w.weights[1] / w.weights[0]
    with mpmath.workdps(40):
        beta = mpmath.mpf("0.9999")
        expected = float((1 - beta**5000) / (1 - beta**50))
    assert abs(ratio - expected) < 0.1, f"ratio {ratio} vs {expected}"
    return f"tail/head weight ratio {ratio:.2f} matches effective-number form"


def check_task_ce_oracle() -> str:
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        B, C = int(rng.integers(1, 9)), int(rng.integers(2, 8))
        logits = rng.normal(scale=3.0, size=(B, C))
        labels = rng.integers(0, C, size=B)
        ours = losses.task_ce(torch.tensor(logits), torch.tensor(labels)).numpy()
        ref = np.array([oracles.ce_oracle(logits[i], int(labels[i])) for i in range(B)])
        worst = max(worst, float(np.abs(ours - ref).max()))
    assert worst < 1e-10, f"worst abs deviation {worst}"
    return f"matches 50-digit cross-entropy within {worst:.1e}"


def _grad_check_reports() -> list[oracles.GradCheckReport]:
    rng = np.random.default_rng(4)
    reports = []

    B, K = 3, 4
    margins = losses.ldam_margins(rng.integers(10, 500, size=K), 0.5)
    targets = torch.tensor(rng.integers(0, K, size=B))
    weights = losses.drw_weights(rng.integers(10, 500, size=K))
    x0 = rng.normal(size=(B, K))

    def ldam_mean(x: np.ndarray) -> float:
        t = torch.tensor(x, dtype=torch.float64)
        return float(losses.ldam_loss(t, targets, margins, weights)[1])

    t = torch.tensor(x0, dtype=torch.float64, requires_grad=True)
    losses.ldam_loss(t, targets, margins, weights)[1].backward()
    reports.append(oracles.fd_gradient(ldam_mean, x0, t.grad.numpy(), name="ldam_loss/class_logits"))

    B, C = 4, 6
    labels = torch.tensor(rng.integers(0, C, size=B))
    x0 = rng.normal(size=(B, C))

    def ce_mean(x: np.ndarray) -> float:
        return float(losses.task_ce(torch.tensor(x, dtype=torch.float64), labels).mean())

    t = torch.tensor(x0, dtype=torch.float64, requires_grad=True)
    losses.task_ce(t, labels).mean().backward()
    reports.append(oracles.fd_gradient(ce_mean, x0, t.grad.numpy(), name="task_ce/ssl_logits"))

    B, tcount = 2, 3
    task_losses = [torch.tensor(rng.uniform(0.5, 3.0, size=B)) for _ in range(tcount)]
    l_c = torch.tensor(1.25, dtype=torch.float64)
    x0 = rng.normal(size=(B, tcount))

    def total(x: np.ndarray) -> float:
        gate = model.gate_distribution(torch.tensor(x, dtype=torch.float64))
        return float(losses.gated_total_loss(l_c, gate, task_losses, 0.1).l_tot)

    t = torch.tensor(x0, dtype=torch.float64, requires_grad=True)
    losses.gated_total_loss(l_c, model.gate_distribution(t), task_losses, 0.1).l_tot.backward()
    reports.append(
        oracles.fd_gradient(total, x0, t.grad.numpy(), name="gated_total_loss/gate_logits")
    )
    return reports


def check_gradients() -> str:
    reports = _grad_check_reports()
    bad = [r for r in reports if not r.passed]
    assert not bad, "; ".join(str(r) for r in bad)
    worst = max(r.max_rel_err for r in reports)
    return f"{len(reports)} blocks vs central differences, worst rel err {worst:.1e}"


def check_cifar_roundtrip() -> str:
    rng = np.random.default_rng(5)
    pixels = rng.integers(0, 256, size=3072, dtype=np.uint8).tobytes()
    record10 = bytes([7]) + pixels
    label, img = parse_cifar10_record(record10)
    assert label == 7 and serialize_cifar10_record(label, img) == record10
    record100 = bytes([3, 42]) + pixels
    coarse, fine, img = parse_cifar100_record(record100)
    assert (coarse, fine) == (3, 42)
    assert serialize_cifar100_record(coarse, fine, img) == record100
    return "crafted records parse and re-serialize bit-exactly"


def check_imbalance_profiles() -> str:
    endpoints = {0.01: 50, 0.02: 100, 0.05: 250}
    for ratio, tail in endpoints.items():
        profile = exponential_profile(10, 5000, ratio)
        assert profile.counts[0] == 5000 and profile.counts[-1] == tail, profile.counts
        assert all(a >= b for a, b in zip(profile.counts, profile.counts[1:]))
    return "head 5000, tails 50/100/250 for ratios 0.01/0.02/0.05"


CHECKS: tuple[tuple[str, Callable[[], str]], ...] = (
    ("enumerate_outcomes", check_transform_cardinalities),
    ("gate_distribution", check_gate_normalization),
    ("gated_total_loss", check_loss_composition),
    ("ldam_margins", check_ldam_margins),
    ("drw_weights", check_drw_weights),
    ("task_ce", check_task_ce_oracle),
    ("gradient_checks", check_gradients),
    ("cifar_roundtrip", check_cifar_roundtrip),
    ("imbalance_profiles", check_imbalance_profiles),
)


def run_selftest() -> list[CheckResult]:
    results = []
    for name, check in CHECKS:
        try:
            results.append(CheckResult(name, True, check()))
        except Exception as exc:  # report, don't abort: remaining checks still run
            results.append(CheckResult(name, False, f"{type(exc).__name__}: {exc}"))
    return results
