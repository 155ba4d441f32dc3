import math

import numpy as np
import pytest
import torch

from gatedssl.oracles import GradCheckReport, ce_oracle, enumerate_outcomes, fd_gradient
from gatedssl.transforms import (
    LABEL_CARDINALITY,
    TaskKind,
    apply_channel_shuffle,
    apply_lorot_e,
    apply_quadrant_flip,
)


class TestCeOracle:
    def test_uniform_logits(self):
        assert ce_oracle([0.0] * 6, 3) == pytest.approx(math.log(6), abs=1e-12)
        assert ce_oracle([0.0] * 16, 0) == pytest.approx(math.log(16), abs=1e-12)

    def test_confident_correct_goes_to_zero(self):
        assert ce_oracle([50.0, 0.0, 0.0], 0) < 1e-20

    def test_matches_torch_cross_entropy(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            C = int(rng.integers(2, 10))
            logits = rng.normal(scale=4.0, size=C)
            target = int(rng.integers(C))
            expected = float(
                torch.nn.functional.cross_entropy(
                    torch.tensor(logits).unsqueeze(0), torch.tensor([target])
                )
            )
            assert ce_oracle(logits, target) == pytest.approx(expected, abs=1e-10)


class TestFdGradient:
    def test_quadratic_calibration(self):
        A = np.diag([1.0, 2.0, 3.0])

        def f(x):
            return 0.5 * float(x @ A @ x)

        x0 = np.array([0.3, -1.2, 0.7])
        report = fd_gradient(f, x0, A @ x0, name="quadratic")
        assert report.passed
        assert report.max_rel_err < 1e-8

    def test_detects_wrong_gradient(self):
        def f(x):
            return float((x**2).sum())

        x0 = np.array([1.0, 2.0])
        report = fd_gradient(f, x0, np.array([1.0, 1.0]))
        assert not report.passed

    def test_nonfinite_loss_reports_failure(self):
        def f(x):
            return float("nan")

        report = fd_gradient(f, np.array([1.0]), np.array([0.0]))
        assert not report.passed
        assert math.isinf(report.max_rel_err)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            fd_gradient(lambda x: 0.0, np.zeros(3), np.zeros(2))

    def test_report_string(self):
        r = GradCheckReport("x", 1e-9, 1e-4, True)
        assert "ok" in str(r) and "x" in str(r)


class TestEnumerateOutcomes:
    @pytest.mark.parametrize("task", list(TaskKind))
    def test_counts_and_label_coverage(self, task, distinct_image):
        pairs = enumerate_outcomes(task, distinct_image)
        assert len(pairs) == LABEL_CARDINALITY[task]
        assert sorted(label for _, label in pairs) == list(range(LABEL_CARDINALITY[task]))

    def test_agrees_with_production_transforms(self, distinct_image):
        for img, label in enumerate_outcomes(TaskKind.LOROT_E, distinct_image):
            produced, _ = apply_lorot_e(distinct_image, label // 4, label % 4)
            assert np.array_equal(img, produced)
        for img, label in enumerate_outcomes(TaskKind.QUAD_FLIP, distinct_image):
            produced, _ = apply_quadrant_flip(distinct_image, 0, bool(label))
            assert np.array_equal(img, produced)
        for img, label in enumerate_outcomes(TaskKind.CHANNEL_SHUFFLE, distinct_image):
            produced, _ = apply_channel_shuffle(distinct_image, 0, label)
            assert np.array_equal(img, produced)

    def test_input_not_mutated(self, distinct_image):
        before = distinct_image.copy()
        enumerate_outcomes(TaskKind.LOROT_E, distinct_image)
        assert np.array_equal(before, distinct_image)
