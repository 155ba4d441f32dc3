"""Independent reference implementations used by tests and ``selftest``.

Nothing here imports the modules it is meant to check: rotations, flips and
shuffles are redone with explicit index arithmetic, and cross-entropy is
evaluated with 50-digit arithmetic straight from its definition.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import mpmath
import numpy as np

from .transforms import TaskKind


def ce_oracle(logits: Sequence[float], target: int) -> float:
    """-log(softmax(logits)[target]) evaluated at 50 decimal digits.

    Deliberately uses the direct exp/sum formula, no max subtraction and no
    log-sum-exp, so it shares no numerical tricks with the production losses.
    """
    with mpmath.workdps(50):
        exps = [mpmath.e ** mpmath.mpf(float(z)) for z in logits]
        prob = exps[target] / mpmath.fsum(exps)
        return float(-mpmath.log(prob))


@dataclass(frozen=True)
class GradCheckReport:
    name: str
    max_rel_err: float
    tolerance: float
    passed: bool

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return f"[{status}] {self.name}: max rel err {self.max_rel_err:.3e} (tol {self.tolerance:g})"


def fd_gradient(
    loss_fn: Callable[[np.ndarray], float],
    params: np.ndarray,
    analytic: np.ndarray,
    step: float = 1e-4,
    tolerance: float = 1e-4,
    name: str = "loss",
) -> GradCheckReport:
    """Central-difference gradient of ``loss_fn`` at ``params`` vs ``analytic``.

    Works coordinate by coordinate in double precision. The per-coordinate
    relative error uses ``max(1, |fd|, |analytic|)`` as denominator so tiny
    gradient entries are judged absolutely. A non-finite loss evaluation
    yields a failed report instead of raising.
    """
    x = np.asarray(params, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ValueError(f"analytic gradient shape {analytic.shape} != params shape {x.shape}")
    fd = np.zeros_like(x)
    flat = x.reshape(-1)
    fd_flat = fd.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(loss_fn(x))
        flat[i] = orig - step
        f_minus = float(loss_fn(x))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            return GradCheckReport(name, float("inf"), tolerance, False)
        fd_flat[i] = (f_plus - f_minus) / (2.0 * step)
    denom = np.maximum(1.0, np.maximum(np.abs(fd), np.abs(analytic)))
    max_rel = float(np.max(np.abs(fd - analytic) / denom)) if x.size else 0.0
    return GradCheckReport(name, max_rel, tolerance, max_rel < tolerance)


def _grid_bounds(quadrant: int, height: int, width: int) -> tuple[int, int, int, int]:
    # Same floor-split contract as the transforms module, re-derived here.
    mid_r, mid_c = height // 2, width // 2
    rows = (0, mid_r) if quadrant < 2 else (mid_r, height)
    cols = (0, mid_c) if quadrant % 2 == 0 else (mid_c, width)
    return rows[0], rows[1], cols[0], cols[1]


def _rotate_quadrant(img: np.ndarray, quadrant: int, steps: int) -> np.ndarray:
    out = img.copy()
    r0, r1, c0, c1 = _grid_bounds(quadrant, img.shape[1], img.shape[2])
    region = img[:, r0:r1, c0:c1]
    for _ in range(steps % 4):
        n = region.shape[1]
        rotated = np.empty_like(region)
        for i in range(n):
            for j in range(n):
                # one counterclockwise quarter turn
                rotated[:, i, j] = region[:, j, n - 1 - i]
        region = rotated
    out[:, r0:r1, c0:c1] = region
    return out


def _flip_quadrant(img: np.ndarray, quadrant: int) -> np.ndarray:
    out = img.copy()
    r0, r1, c0, c1 = _grid_bounds(quadrant, img.shape[1], img.shape[2])
    w = c1 - c0
    for j in range(w):
        out[:, r0:r1, c0 + j] = img[:, r0:r1, c0 + w - 1 - j]
    return out


def _shuffle_quadrant(img: np.ndarray, quadrant: int, mapping: tuple[int, ...]) -> np.ndarray:
    out = img.copy()
    r0, r1, c0, c1 = _grid_bounds(quadrant, img.shape[1], img.shape[2])
    for c in range(3):
        out[c, r0:r1, c0:c1] = img[mapping[c], r0:r1, c0:c1]
    return out


def enumerate_outcomes(task: TaskKind, image: np.ndarray) -> list[tuple[np.ndarray, int]]:
    """All (transformed image, label) pairs of a task, one per label.

    Rotation enumerates all quadrant x step combinations since the label
    encodes both; flip and shuffle use quadrant 0 as representative because
    their labels do not depend on the quadrant.
    """
    if task is TaskKind.LOROT_E:
        return [
            (_rotate_quadrant(image, q, r), 4 * q + r)
            for q in range(4)
            for r in range(4)
        ]
    if task is TaskKind.QUAD_FLIP:
        return [(image.copy(), 0), (_flip_quadrant(image, 0), 1)]
    if task is TaskKind.CHANNEL_SHUFFLE:
        return [
            (_shuffle_quadrant(image, 0, mapping), index)
            for index, mapping in enumerate(itertools.permutations(range(3)))
        ]
    raise ValueError(f"unknown task {task!r}")
