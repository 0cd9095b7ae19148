"""Losses and overlap metrics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from patcher.gradcheck import grad_check
from patcher.losses import DataError, EvalResult, bce_loss, binarize, combined_loss, dsc, iou, iou_loss
from patcher.tensor import Tensor


def test_bce_zero_logits_is_ln2():
    assert bce_loss(Tensor(np.zeros((2, 1, 4, 4))), np.ones((2, 1, 4, 4))).item() == pytest.approx(math.log(2), abs=1e-6)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), p=st.floats(0.05, 0.95))
def test_iou_dsc_identity(seed, p):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(12, 12)) < p, rng.uniform(size=(12, 12)) < p
    d = dsc(a, b)
    assert iou(a, b) == pytest.approx(d / (2 - d), abs=1e-9)


def test_metrics_hand_example():
    a = np.array([1, 1, 0, 0], bool)
    b = np.array([1, 0, 1, 0], bool)
    assert dsc(a, b) == pytest.approx(0.5)
    assert iou(a, b) == pytest.approx(1 / 3)


def test_both_empty_scores_one():
    z = np.zeros((4, 4), bool)
    assert dsc(z, z) == 1.0 and iou(z, z) == 1.0
    assert dsc(z, ~z) == 0.0 and iou(z, ~z) == 0.0


def test_binarize_threshold_at_half_probability():
    assert binarize(np.array([-1e-3, 0.0, 1e-3])).tolist() == [False, False, True]


def test_iou_loss_bounds_and_gradient():
    rng = np.random.default_rng(0)
    t = (rng.uniform(size=(1, 1, 5, 5)) > 0.5).astype(np.float32)
    good = iou_loss(Tensor(np.where(t > 0, 20.0, -20.0)), t).item()
    bad = iou_loss(Tensor(np.where(t > 0, -20.0, 20.0)), t).item()
    assert good < 1e-3 and bad > 0.9
    z = Tensor(rng.normal(size=t.shape))
    assert grad_check(lambda z: iou_loss(z, t), z) < 1e-6


def test_combined_loss_is_sum():
    rng = np.random.default_rng(1)
    z = Tensor(rng.normal(size=(1, 1, 3, 3)))
    t = (rng.uniform(size=(1, 1, 3, 3)) > 0.5).astype(np.float32)
    both = combined_loss(z, t, "bce+iou").item()
    assert both == pytest.approx(bce_loss(z, t).item() + iou_loss(z, t).item())
    with pytest.raises(ValueError):
        combined_loss(z, t, "dice")


def test_target_validation():
    z = Tensor(np.zeros((1, 1, 2, 2)))
    with pytest.raises(DataError, match="shape"):
        bce_loss(z, np.zeros((1, 1, 2, 3)))
    with pytest.raises(DataError, match="0 and 1"):
        bce_loss(z, np.full((1, 1, 2, 2), 0.5))


def test_eval_result_csv_round_trip(tmp_path):
    res = EvalResult()
    res.add("b", np.array([1, 1, 0]), np.array([1, 0, 0]))
    res.add("a", np.zeros(3), np.zeros(3))
    path = tmp_path / "eval.csv"
    res.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "id,dsc,iou"
    assert lines[-1].startswith("mean,")
    back = EvalResult.from_csv(path)
    assert [r[0] for r in back.per_image] == ["b", "a"]
    assert_allclose(back.dsc, res.dsc, atol=1e-6)
    assert_allclose(back.iou, (0.5 + 1.0) / 2, atol=1e-6)
