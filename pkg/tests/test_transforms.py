import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gatedssl.errors import CompositionError, ShapeError
from gatedssl.transforms import (
    LABEL_CARDINALITY,
    PERMUTATIONS3,
    TASK_ORDER,
    TaskKind,
    TransformOutcome,
    apply_channel_shuffle,
    apply_composed,
    apply_lorot_e,
    apply_outcome,
    apply_quadrant_flip,
    perm_compose,
    perm_inverse,
    quadrant_bounds,
    sample_outcome,
)


def random_image(size, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.05, 0.95, size=(3, size, size))


class TestQuadrantBounds:
    def test_even_split(self):
        assert quadrant_bounds(0, 32, 32) == (0, 16, 0, 16)
        assert quadrant_bounds(3, 32, 32) == (16, 32, 16, 32)

    def test_odd_floor_split(self):
        assert quadrant_bounds(1, 5, 5) == (0, 2, 2, 5)

    @given(st.integers(2, 64), st.integers(2, 64))
    def test_partition(self, H, W):
        covered = np.zeros((H, W), dtype=int)
        for q in range(4):
            r0, r1, c0, c1 = quadrant_bounds(q, H, W)
            covered[r0:r1, c0:c1] += 1
        assert np.all(covered == 1)

    def test_too_small_raises(self):
        with pytest.raises(ShapeError):
            quadrant_bounds(0, 1, 8)
        with pytest.raises(ShapeError):
            quadrant_bounds(0, 8, 1)

    def test_bad_quadrant_raises(self):
        with pytest.raises(ValueError):
            quadrant_bounds(4, 8, 8)


class TestLorotE:
    def test_identity_rotation(self, distinct_image):
        out, label = apply_lorot_e(distinct_image, 0, 0)
        assert label == 0
        assert np.array_equal(out, distinct_image)

    def test_label_encoding(self, distinct_image):
        out, label = apply_lorot_e(distinct_image, 3, 2)
        assert label == 14
        r0, r1, c0, c1 = quadrant_bounds(3, 8, 8)
        region = distinct_image[:, r0:r1, c0:c1]
        assert np.array_equal(out[:, r0:r1, c0:c1], region[:, ::-1, ::-1])

    def test_rotation_group_order_four(self, distinct_image):
        img = distinct_image
        for _ in range(4):
            img, _ = apply_lorot_e(img, 2, 1)
        assert np.array_equal(img, distinct_image)

    def test_inverse_rotation(self, distinct_image):
        for r in range(4):
            once, _ = apply_lorot_e(distinct_image, 1, r)
            back, _ = apply_lorot_e(once, 1, (4 - r) % 4)
            assert np.array_equal(back, distinct_image)

    def test_outside_quadrant_untouched(self, distinct_image):
        for q in range(4):
            out, _ = apply_lorot_e(distinct_image, q, 3)
            mask = np.ones((8, 8), dtype=bool)
            r0, r1, c0, c1 = quadrant_bounds(q, 8, 8)
            mask[r0:r1, c0:c1] = False
            assert np.array_equal(out[:, mask], distinct_image[:, mask])

    def test_nonsquare_quadrant_quarter_turn_raises(self):
        img = np.full((3, 4, 6), 0.5)
        with pytest.raises(ShapeError):
            apply_lorot_e(img, 0, 1)
        # half turns are fine on rectangles
        out, label = apply_lorot_e(img, 0, 2)
        assert label == 2

    def test_out_of_range_pixels_rejected(self):
        with pytest.raises(ValueError):
            apply_lorot_e(np.full((3, 8, 8), 1.5), 0, 0)


class TestQuadrantFlip:
    def test_noop(self, distinct_image):
        out, label = apply_quadrant_flip(distinct_image, 2, False)
        assert label == 0
        assert np.array_equal(out, distinct_image)

    def test_column_reversal(self, distinct_image):
        out, label = apply_quadrant_flip(distinct_image, 1, True)
        assert label == 1
        r0, r1, c0, c1 = quadrant_bounds(1, 8, 8)
        assert np.array_equal(out[:, r0:r1, c0:c1], distinct_image[:, r0:r1, c0:c1][:, :, ::-1])

    def test_involution(self, distinct_image):
        once, _ = apply_quadrant_flip(distinct_image, 3, True)
        twice, _ = apply_quadrant_flip(once, 3, True)
        assert np.array_equal(twice, distinct_image)


class TestChannelShuffle:
    def test_identity(self, distinct_image):
        out, label = apply_channel_shuffle(distinct_image, 0, 0)
        assert label == 0
        assert np.array_equal(out, distinct_image)

    def test_full_reversal_swaps_r_and_b(self, distinct_image):
        # index 5 is the lexicographically last permutation (2, 1, 0)
        assert PERMUTATIONS3[5] == (2, 1, 0)
        out, label = apply_channel_shuffle(distinct_image, 0, 5)
        assert label == 5
        r0, r1, c0, c1 = quadrant_bounds(0, 8, 8)
        assert np.array_equal(out[0, r0:r1, c0:c1], distinct_image[2, r0:r1, c0:c1])
        assert np.array_equal(out[1, r0:r1, c0:c1], distinct_image[1, r0:r1, c0:c1])
        assert np.array_equal(out[2, r0:r1, c0:c1], distinct_image[0, r0:r1, c0:c1])

    @given(st.integers(0, 5))
    @settings(max_examples=6)
    def test_inverse_restores(self, index):
        img = random_image(8, seed=index)
        once, _ = apply_channel_shuffle(img, 2, index)
        back, _ = apply_channel_shuffle(once, 2, perm_inverse(index))
        assert np.array_equal(back, img)

    @given(st.integers(0, 5), st.integers(0, 5))
    @settings(max_examples=36)
    def test_composition_matches_index_arithmetic(self, first, second):
        img = random_image(8, seed=13)
        step1, _ = apply_channel_shuffle(img, 1, first)
        step2, _ = apply_channel_shuffle(step1, 1, second)
        combined, _ = apply_channel_shuffle(img, 1, perm_compose(first, second))
        assert np.array_equal(step2, combined)

    def test_lexicographic_table(self):
        assert PERMUTATIONS3 == ((0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0))


class TestSampling:
    def test_deterministic_given_seed(self):
        a = [sample_outcome(TaskKind.LOROT_E, np.random.default_rng(5)) for _ in range(20)]
        b = [sample_outcome(TaskKind.LOROT_E, np.random.default_rng(5)) for _ in range(20)]
        assert a == b

    @pytest.mark.parametrize(
        "task,tolerance",
        [(TaskKind.LOROT_E, 0.01), (TaskKind.QUAD_FLIP, 0.01), (TaskKind.CHANNEL_SHUFFLE, 0.01)],
    )
    def test_label_frequencies_uniform(self, task, tolerance):
        rng = np.random.default_rng(123)
        n = 100_000
        counts = np.zeros(LABEL_CARDINALITY[task])
        for _ in range(n):
            counts[sample_outcome(task, rng).label] += 1
        freq = counts / n
        assert np.all(np.abs(freq - 1.0 / LABEL_CARDINALITY[task]) < tolerance)

    def test_quadrant_uniform(self):
        rng = np.random.default_rng(9)
        quads = np.zeros(4)
        for _ in range(40_000):
            quads[sample_outcome(TaskKind.QUAD_FLIP, rng).quadrant] += 1
        assert np.all(np.abs(quads / 40_000 - 0.25) < 0.01)

    def test_label_consistent_with_params(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            for task in TaskKind:
                o = sample_outcome(task, rng)
                if task is TaskKind.LOROT_E:
                    assert o.label == 4 * o.quadrant + o.params
                else:
                    assert o.label == o.params


class TestComposition:
    def test_empty_is_identity(self, distinct_image):
        out, labels = apply_composed(distinct_image, [])
        assert labels == {}
        assert np.array_equal(out, distinct_image)

    def test_all_identity_params(self, distinct_image):
        outcomes = [
            TransformOutcome(TaskKind.LOROT_E, 0, 0, 0),
            TransformOutcome(TaskKind.QUAD_FLIP, 1, 0, 0),
            TransformOutcome(TaskKind.CHANNEL_SHUFFLE, 2, 0, 0),
        ]
        out, labels = apply_composed(distinct_image, outcomes)
        assert labels == {t: 0 for t in TASK_ORDER}
        assert np.array_equal(out, distinct_image)

    def test_duplicate_task_rejected(self, distinct_image):
        outcomes = [
            TransformOutcome(TaskKind.QUAD_FLIP, 0, 1, 1),
            TransformOutcome(TaskKind.QUAD_FLIP, 1, 1, 1),
        ]
        with pytest.raises(CompositionError):
            apply_composed(distinct_image, outcomes)

    def test_fixed_order_regardless_of_input_order(self, distinct_image):
        rng = np.random.default_rng(0)
        outcomes = [sample_outcome(t, rng) for t in TaskKind]
        forward, labels_fwd = apply_composed(distinct_image, outcomes)
        reversed_in, labels_rev = apply_composed(distinct_image, outcomes[::-1])
        assert np.array_equal(forward, reversed_in)
        assert labels_fwd == labels_rev

    def test_spatial_ops_preserve_pixel_multiset(self, distinct_image):
        outcomes = [
            TransformOutcome(TaskKind.LOROT_E, 2, 3, 11),
            TransformOutcome(TaskKind.QUAD_FLIP, 0, 1, 1),
            TransformOutcome(TaskKind.CHANNEL_SHUFFLE, 1, 0, 0),
        ]
        out, _ = apply_composed(distinct_image, outcomes)
        assert np.array_equal(np.sort(out.ravel()), np.sort(distinct_image.ravel()))

    def test_apply_outcome_dispatch(self, distinct_image):
        rng = np.random.default_rng(44)
        for task in TaskKind:
            o = sample_outcome(task, rng)
            img, label = apply_outcome(distinct_image, o)
            assert label == o.label
            assert img.shape == distinct_image.shape


class TestLabelDecodability:
    """With all-distinct pixels every non-identity transform is visible; the
    only unavoidable collisions are the four identity rotations, which all
    equal the input image."""

    def test_flip_outputs_distinct(self, distinct_image):
        a, _ = apply_quadrant_flip(distinct_image, 0, False)
        b, _ = apply_quadrant_flip(distinct_image, 0, True)
        assert not np.array_equal(a, b)

    def test_shuffle_outputs_pairwise_distinct(self, distinct_image):
        outs = [apply_channel_shuffle(distinct_image, 0, p)[0] for p in range(6)]
        for i in range(6):
            for j in range(i + 1, 6):
                assert not np.array_equal(outs[i], outs[j])

    def test_lorot_identity_collision_structure(self, distinct_image):
        outs = {4 * q + r: apply_lorot_e(distinct_image, q, r)[0] for q in range(4) for r in range(4)}
        identity_labels = {0, 4, 8, 12}
        for label in identity_labels:
            assert np.array_equal(outs[label], distinct_image)
        non_identity = [label for label in outs if label not in identity_labels]
        for i, la in enumerate(non_identity):
            assert not np.array_equal(outs[la], distinct_image)
            for lb in non_identity[i + 1 :]:
                assert not np.array_equal(outs[la], outs[lb])
        # 12 distinct non-identity images + the original = 13 distinct total
        unique = {outs[label].tobytes() for label in outs}
        assert len(unique) == 13
