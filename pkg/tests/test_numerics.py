import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cdaudit.numerics import (Adam, NumericError, ParamBlock, SingleClassError,
                              accuracy, bce_loss, copy_blocks, finite_diff_check,
                              make_rng, rank_auc, sigmoid)
from oracles import brute_force_auc


class TestBce:
    def test_half_prediction(self):
        loss, _ = bce_loss(0.5, 1)
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_near_perfect(self):
        loss, _ = bce_loss(1.0 - 1e-7, 1)
        assert 0 < loss < 2e-7

    def test_wrong_confident(self):
        # independent evaluation of -ln(0.2)
        loss, grad = bce_loss(0.8, 0)
        assert loss == pytest.approx(-math.log(0.2), abs=1e-12)
        assert grad == pytest.approx((0.8 - 0.0) / (0.8 * 0.2), abs=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(NumericError):
            bce_loss(float("nan"), 1)

    @given(st.floats(min_value=0.0, max_value=1.0), st.integers(0, 1))
    def test_clamped_bce_finite_on_full_interval(self, pred, label):
        loss, grad = bce_loss(pred, label)
        assert math.isfinite(loss) and math.isfinite(grad)

    def test_vectorized(self):
        loss, grad = bce_loss([0.5, 0.8], [1, 0])
        assert loss.shape == (2,)
        assert loss[1] == pytest.approx(-math.log(0.2))


class TestAdam:
    def test_zero_gradient_is_identity(self):
        blk = ParamBlock("w", np.array([1.0, -2.0, 3.0]))
        blocks = {"w": blk}
        adam = Adam(blocks, lr=0.1)
        before = blk.values.copy()
        adam.step(blocks)
        assert np.array_equal(blk.values, before)

    def test_first_step_unit_gradient(self):
        blk = ParamBlock("w", np.array([0.0]))
        blocks = {"w": blk}
        adam = Adam(blocks, lr=0.1)
        blk.grad[...] = 1.0
        adam.step(blocks)
        # bias-corrected m_hat / sqrt(v_hat) conspires to exactly 1
        assert blk.values[0] == pytest.approx(-0.1, abs=1e-8)
        assert np.all(blk.grad == 0.0)

    def test_bit_identical_runs(self):
        def run():
            rng = make_rng(3, 1)
            blk = ParamBlock("w", rng.standard_normal(5))
            blocks = {"w": blk}
            adam = Adam(blocks, lr=0.01)
            for _ in range(50):
                blk.grad[...] = np.sin(blk.values)
                adam.step(blocks)
            return blk.values

        assert np.array_equal(run(), run())


class TestRankAuc:
    def test_perfect_ranking(self):
        assert rank_auc([0.9, 0.8], [1, 0]) == 1.0

    def test_all_ties(self):
        assert rank_auc([0.3, 0.3, 0.3, 0.3], [1, 0, 1, 0]) == 0.5

    def test_hand_case(self):
        scores = [0.2, 0.7, 0.6, 0.4]
        labels = [0, 1, 0, 1]
        expected = brute_force_auc(scores, labels)
        assert expected == 0.75  # 3 wins, 1 loss of the 4 pairs
        assert rank_auc(scores, labels) == pytest.approx(expected, abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(SingleClassError):
            rank_auc([0.1, 0.2], [1, 1])

    def test_matches_brute_force_with_ties(self):
        rng = make_rng(99)
        for _ in range(60):
            n = int(rng.integers(4, 60))
            scores = rng.integers(0, 8, size=n) / 7.0  # heavy ties
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            assert rank_auc(scores, labels) == pytest.approx(
                brute_force_auc(scores, labels), abs=1e-12)


class TestAccuracy:
    def test_strict_threshold(self):
        # a score exactly at 0.5 is decided non-member
        assert accuracy([0.5], [0]) == 1.0
        assert accuracy([0.5], [1]) == 0.0


class TestFiniteDiff:
    def test_quadratic_exact(self):
        blk = ParamBlock("t", np.array([3.0]))
        blocks = {"t": blk}

        def fn():
            t = blocks["t"].values
            return 0.5 * float(t @ t), {"t": t.copy()}

        assert finite_diff_check(fn, blocks) < 1e-9

    def test_detects_corrupted_gradient(self):
        blk = ParamBlock("t", np.array([0.5]))
        blocks = {"t": blk}

        def fn():
            t = blocks["t"].values
            return 0.5 * float(t @ t), {"t": 2.0 * t}  # doubled on purpose

        assert finite_diff_check(fn, blocks) == pytest.approx(0.5, abs=1e-6)

    def test_non_finite_loss_rejected(self):
        blocks = {"t": ParamBlock("t", np.array([1.0]))}
        with pytest.raises(NumericError):
            finite_diff_check(lambda: (float("inf"), {"t": np.array([0.0])}), blocks)


class TestRng:
    def test_same_key_same_stream(self):
        assert np.array_equal(make_rng(7, 3).random(10), make_rng(7, 3).random(10))

    def test_distinct_streams_differ(self):
        assert not np.array_equal(make_rng(7, 3).random(10), make_rng(7, 4).random(10))


def test_sigmoid_stable_extremes():
    out = sigmoid(np.array([-800.0, 0.0, 800.0]))
    assert out[0] == 0.0 and out[1] == 0.5 and out[2] == 1.0


def test_copy_blocks_independent():
    blocks = {"w": ParamBlock("w", np.ones(3))}
    cp = copy_blocks(blocks)
    cp["w"].values[0] = 5.0
    assert blocks["w"].values[0] == 1.0
