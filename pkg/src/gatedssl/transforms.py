"""Quadrant-localized self-supervised transforms and their label encodings.

Images are channel-major float arrays of shape ``(3, H, W)`` with values in
``[0, 1]``. Every transform touches exactly one quadrant of the 2x2 grid and
leaves the rest of the image bit-identical, so the self-label is recoverable
by comparing the output against the input.

Label encodings (fixed, see each function):
  * quadrant rotation: ``4 * quadrant + rotation`` -> 16 classes
  * quadrant flip: ``int(flipped)`` -> 2 classes
  * channel shuffle: lexicographic permutation index -> 6 classes
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import CompositionError, ShapeError


class TaskKind(Enum):
    LOROT_E = "lorot_e"
    QUAD_FLIP = "quad_flip"
    CHANNEL_SHUFFLE = "channel_shuffle"


#: Canonical application order for composed transforms. Channel shuffle does
#: not commute with the spatial ops when quadrants differ, so the order is
#: pinned.
TASK_ORDER: tuple[TaskKind, ...] = (
    TaskKind.LOROT_E,
    TaskKind.QUAD_FLIP,
    TaskKind.CHANNEL_SHUFFLE,
)

LABEL_CARDINALITY: dict[TaskKind, int] = {
    TaskKind.LOROT_E: 16,
    TaskKind.QUAD_FLIP: 2,
    TaskKind.CHANNEL_SHUFFLE: 6,
}

#: All permutations of (0, 1, 2) in lexicographic order; index 0 is the
#: identity so "no shuffle" is a valid class.
PERMUTATIONS3: tuple[tuple[int, int, int], ...] = tuple(
    itertools.permutations(range(3))
)


@dataclass(frozen=True)
class TransformOutcome:
    """One sampled transform: which task, where, with which parameters.

    ``params`` is the rotation step for LOROT_E, the flip flag for QUAD_FLIP,
    and the permutation index for CHANNEL_SHUFFLE. ``label`` is always the
    encoded self-label and is a pure function of the parameters.
    """

    task: TaskKind
    quadrant: int
    params: int
    label: int


def validate_image(img: np.ndarray) -> None:
    """Check the (3, H, W), H,W >= 2, values-in-[0,1] contract."""
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"expected (3, H, W) image, got shape {img.shape}")
    if img.shape[1] < 2 or img.shape[2] < 2:
        raise ShapeError(f"image sides must be >= 2, got shape {img.shape}")
    lo, hi = float(img.min()), float(img.max())
    if lo < 0.0 or hi > 1.0:
        raise ValueError(f"pixel values must lie in [0, 1], got range [{lo}, {hi}]")


def quadrant_bounds(quadrant: int, height: int, width: int) -> tuple[int, int, int, int]:
    """Half-open (row_start, row_end, col_start, col_end) of one 2x2 cell.

    Quadrants are row-major: 0=top-left, 1=top-right, 2=bottom-left,
    3=bottom-right. Odd sides split at floor(side / 2), so the four regions
    always partition the image.
    """
    if height < 2 or width < 2:
        raise ShapeError(f"need height, width >= 2 for a 2x2 grid, got {height}x{width}")
    if not 0 <= quadrant <= 3:
        raise ValueError(f"quadrant must be in [0, 3], got {quadrant}")
    mid_row, mid_col = height // 2, width // 2
    row_start, row_end = (0, mid_row) if quadrant in (0, 1) else (mid_row, height)
    col_start, col_end = (0, mid_col) if quadrant in (0, 2) else (mid_col, width)
    return row_start, row_end, col_start, col_end


def apply_lorot_e(
    img: np.ndarray, quadrant: int, rotation: int
) -> tuple[np.ndarray, int]:
    """Rotate one quadrant counterclockwise by ``rotation * 90`` degrees.

    Returns the transformed image and the self-label
    ``4 * quadrant + rotation`` in [0, 15]. Quarter-turn rotations require the
    quadrant region to be square.
    """
    validate_image(img)
    if not 0 <= rotation <= 3:
        raise ValueError(f"rotation step must be in [0, 3], got {rotation}")
    r0, r1, c0, c1 = quadrant_bounds(quadrant, img.shape[1], img.shape[2])
    if rotation in (1, 3) and (r1 - r0) != (c1 - c0):
        raise ShapeError(
            f"quadrant {quadrant} is {r1 - r0}x{c1 - c0}; quarter-turn rotation "
            "needs a square region"
        )
    out = img.copy()
    out[:, r0:r1, c0:c1] = np.rot90(img[:, r0:r1, c0:c1], k=rotation, axes=(1, 2))
    return out, 4 * quadrant + rotation


def apply_quadrant_flip(
    img: np.ndarray, quadrant: int, flipped: bool
) -> tuple[np.ndarray, int]:
    """Mirror one quadrant left-right (reverse its columns) when ``flipped``.

    Returns the transformed image and the self-label ``int(flipped)``.
    """
    validate_image(img)
    r0, r1, c0, c1 = quadrant_bounds(quadrant, img.shape[1], img.shape[2])
    out = img.copy()
    if flipped:
        out[:, r0:r1, c0:c1] = img[:, r0:r1, c0:c1][:, :, ::-1]
    return out, int(flipped)


def apply_channel_shuffle(
    img: np.ndarray, quadrant: int, perm_index: int
) -> tuple[np.ndarray, int]:
    """Permute the RGB channels of one quadrant.

    Output channel ``c`` inside the quadrant takes input channel
    ``PERMUTATIONS3[perm_index][c]``. Returns the transformed image and the
    permutation index as self-label.
    """
    validate_image(img)
    if not 0 <= perm_index <= 5:
        raise ValueError(f"permutation index must be in [0, 5], got {perm_index}")
    r0, r1, c0, c1 = quadrant_bounds(quadrant, img.shape[1], img.shape[2])
    mapping = PERMUTATIONS3[perm_index]
    out = img.copy()
    out[:, r0:r1, c0:c1] = img[list(mapping), r0:r1, c0:c1]
    return out, perm_index


def perm_compose(first_index: int, second_index: int) -> int:
    """Index of the permutation equal to applying ``first`` then ``second``.

    Matches the image-level behaviour: shuffling a quadrant with ``first``
    and then ``second`` equals one shuffle with the composed index.
    """
    first, second = PERMUTATIONS3[first_index], PERMUTATIONS3[second_index]
    composed = tuple(first[second[c]] for c in range(3))
    return PERMUTATIONS3.index(composed)


def perm_inverse(perm_index: int) -> int:
    """Index of the inverse permutation."""
    mapping = PERMUTATIONS3[perm_index]
    inverse = tuple(mapping.index(c) for c in range(3))
    return PERMUTATIONS3.index(inverse)


def sample_outcome(task: TaskKind, rng: np.random.Generator) -> TransformOutcome:
    """Draw a quadrant and task parameters uniformly from the task's space."""
    quadrant = int(rng.integers(4))
    if task is TaskKind.LOROT_E:
        rotation = int(rng.integers(4))
        return TransformOutcome(task, quadrant, rotation, 4 * quadrant + rotation)
    if task is TaskKind.QUAD_FLIP:
        flipped = int(rng.integers(2))
        return TransformOutcome(task, quadrant, flipped, flipped)
    if task is TaskKind.CHANNEL_SHUFFLE:
        perm_index = int(rng.integers(6))
        return TransformOutcome(task, quadrant, perm_index, perm_index)
    raise ValueError(f"unknown task {task!r}")


def apply_outcome(img: np.ndarray, outcome: TransformOutcome) -> tuple[np.ndarray, int]:
    """Apply one sampled outcome; returns (image, label)."""
    if outcome.task is TaskKind.LOROT_E:
        return apply_lorot_e(img, outcome.quadrant, outcome.params)
    if outcome.task is TaskKind.QUAD_FLIP:
        return apply_quadrant_flip(img, outcome.quadrant, bool(outcome.params))
    if outcome.task is TaskKind.CHANNEL_SHUFFLE:
        return apply_channel_shuffle(img, outcome.quadrant, outcome.params)
    raise ValueError(f"unknown task {outcome.task!r}")


def apply_composed(
    img: np.ndarray, outcomes: list[TransformOutcome] | tuple[TransformOutcome, ...]
) -> tuple[np.ndarray, dict[TaskKind, int]]:
    """Apply at most one outcome per task, always in ``TASK_ORDER``.

    Returns the transformed image and a task -> self-label mapping for the
    tasks that were present. An empty outcome list returns the image
    unchanged.
    """
    seen = [o.task for o in outcomes]
    if len(set(seen)) != len(seen):
        raise CompositionError(f"duplicate task in composition: {[t.value for t in seen]}")
    validate_image(img)
    out = img
    labels: dict[TaskKind, int] = {}
    by_task = {o.task: o for o in outcomes}
    for task in TASK_ORDER:
        if task in by_task:
            out, labels[task] = apply_outcome(out, by_task[task])
    return out, labels
