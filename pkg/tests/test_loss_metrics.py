import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from afcf3d.errors import ConfigurationError
from afcf3d.gradcheck import grad_check
from afcf3d.losses import bce_loss, dice_loss, hybrid_loss, loss_components
from afcf3d.metrics import ConfusionCounts, binarize, confusion, metrics
from afcf3d.tensor import Tensor

from oracles import bce_direct, confusion_loops, dice_direct

F64 = np.float64


# ---------------------------------------------------------------------------
# losses


def test_bce_uniform_half_is_ln2():
    p = np.full((2, 8, 8), 0.5)
    t = (np.arange(128).reshape(2, 8, 8) % 3 == 0).astype(F64)
    assert abs(bce_loss(p, t).item() - math.log(2)) <= 1e-12


def test_bce_hand_case():
    p, t = np.array([0.9, 0.2]), np.array([1.0, 0.0])
    want = -(math.log(0.9) + math.log(0.8)) / 2
    assert bce_loss(p, t).item() == pytest.approx(want, abs=1e-12)
    assert want == pytest.approx(0.164252, abs=1e-6)


def test_bce_clamps_saturated_predictions():
    p, t = np.array([0.0, 1.0]), np.array([1.0, 0.0])
    v = bce_loss(p, t).item()
    assert math.isfinite(v)
    assert v == pytest.approx(-math.log(1e-7), rel=1e-6)


def test_losses_match_direct_sums(rng):
    for _ in range(20):
        p = rng.random((2, 5, 7))
        t = (rng.random((2, 5, 7)) > 0.6).astype(F64)
        assert bce_loss(p, t).item() == pytest.approx(bce_direct(p, t), abs=1e-12)
        assert dice_loss(p, t).item() == pytest.approx(dice_direct(p, t), abs=1e-12)


def test_dice_extremes():
    t = np.zeros((1, 4, 4))
    t[0, :2] = 1
    disjoint = 1.0 - t
    assert dice_loss(disjoint, t).item() == pytest.approx(1.0, abs=1e-6)
    assert dice_loss(t.copy(), t).item() == pytest.approx(0.0, abs=1e-12)
    empty = np.zeros((1, 4, 4))
    assert dice_loss(empty, empty).item() == 0.0


def test_dice_range_over_random_inputs(rng):
    for _ in range(1000):
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        p = rng.random(shape)
        t = (rng.random(shape) > rng.random()).astype(F64)
        d = dice_loss(p, t).item()
        assert 0.0 <= d <= 1.0


def test_hybrid_is_exact_sum(rng):
    p = rng.random((3, 6, 6))
    t = (rng.random((3, 6, 6)) > 0.5).astype(F64)
    total, b, d = loss_components(p, t)
    assert hybrid_loss(p, t).item() == total.item() == b.item() + d.item()


def test_hybrid_decreases_towards_target(rng):
    t = (rng.random((2, 8, 8)) > 0.5).astype(F64)
    noise = rng.random((2, 8, 8))
    values = [hybrid_loss(a * t + (1 - a) * noise, t).item() for a in np.linspace(0, 0.99, 12)]
    assert all(x > y for x, y in zip(values, values[1:]))


def test_loss_shape_mismatch():
    with pytest.raises(ConfigurationError):
        bce_loss(np.full((2, 4, 4), 0.5), np.zeros((2, 4, 5)))
    with pytest.raises(ConfigurationError):
        dice_loss(np.full((2, 4, 4), 0.5), np.zeros((4, 4)))


@pytest.mark.parametrize("loss", [bce_loss, dice_loss, hybrid_loss])
def test_loss_gradients(loss, rng):
    p = Tensor(rng.uniform(0.05, 0.95, (2, 5, 5)), requires_grad=True)
    t = (rng.random((2, 5, 5)) > 0.5).astype(F64)
    grad_check(lambda p: loss(p, t), [p], tolerance=1e-6, samples=50, rng=0)


def test_loss_keeps_float32():
    p = np.full((1, 4, 4), 0.3, np.float32)
    assert hybrid_loss(p, np.zeros((1, 4, 4))).dtype == np.float32


# ---------------------------------------------------------------------------
# confusion and metrics


def test_confusion_hand_case():
    pred = np.array([[1, 1, 0, 0]])
    truth = np.array([[1, 0, 1, 0]])
    assert confusion(pred, truth) == ConfusionCounts(1, 1, 1, 1)


def test_confusion_matches_loop_oracle(rng):
    for _ in range(100):
        shape = tuple(int(v) for v in rng.integers(1, 12, size=2))
        pred = rng.random(shape) > rng.random()
        truth = rng.random(shape) > rng.random()
        c = confusion(pred, truth)
        assert (c.tp, c.fp, c.fn, c.tn) == confusion_loops(pred, truth)


def test_confusion_rejects_bad_input():
    with pytest.raises(ConfigurationError):
        confusion(np.array([0.5, 1.0]), np.array([0, 1]))
    with pytest.raises(ConfigurationError):
        confusion(np.array([0, 1]), np.array([0, 1, 1]))
    with pytest.raises(ConfigurationError):
        ConfusionCounts(-1, 0, 0, 0)


def test_binarize_tie_goes_to_changed():
    assert binarize(np.array([0.4999999, 0.5, 0.75])).tolist() == [False, True, True]
    assert binarize(np.array([0.6]), threshold=0.7).tolist() == [False]


def test_counts_add_up():
    a, b = ConfusionCounts(1, 2, 3, 4), ConfusionCounts(5, 6, 7, 8)
    assert a + b == ConfusionCounts(6, 8, 10, 12)
    assert (a + b).total == 36


def test_metric_values_hand_case():
    m = metrics(ConfusionCounts(tp=6, fp=2, fn=4, tn=88))
    assert m.precision == pytest.approx(0.75)
    assert m.recall == pytest.approx(0.6)
    assert m.f1 == pytest.approx(2 * 0.75 * 0.6 / 1.35)
    assert m.iou == pytest.approx(6 / 12)


def test_iou_f1_identity_exhaustive():
    n = 0
    for total in range(1, 21):
        for tp in range(1, total + 1):
            for fp in range(0, total - tp + 1):
                for fn in range(0, total - tp - fp + 1):
                    m = metrics(ConfusionCounts(tp, fp, fn, total - tp - fp - fn))
                    assert m.iou == pytest.approx(m.f1 / (2 - m.f1), abs=1e-12)
                    n += 1
    assert n > 1000


def test_reported_benchmark_pair_is_consistent():
    f1, iou = 0.9358, 0.8793
    assert abs(f1 / (2 - f1) - iou) < 5e-4


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
@settings(max_examples=200, deadline=None)
def test_metrics_bounded(tp, fp, fn, tn):
    m = metrics(ConfusionCounts(tp, fp, fn, tn))
    for v in (m.precision, m.recall, m.f1, m.iou):
        assert 0.0 <= v <= 1.0
    if tp + fp + fn:
        assert m.iou <= m.f1 + 1e-12


def test_degenerate_denominators():
    empty = metrics(ConfusionCounts(0, 0, 0, 16))
    assert (empty.precision, empty.recall, empty.f1, empty.iou) == (0.0, 0.0, 0.0, 1.0)
    missed = metrics(ConfusionCounts(0, 0, 5, 11))
    assert (missed.precision, missed.recall, missed.f1, missed.iou) == (0.0, 0.0, 0.0, 0.0)
    spurious = metrics(ConfusionCounts(0, 3, 0, 13))
    assert (spurious.precision, spurious.f1, spurious.iou) == (0.0, 0.0, 0.0)


def test_report_formats():
    m = metrics(ConfusionCounts(tp=6, fp=2, fn=4, tn=88))
    d = json.loads(m.to_json())
    assert d == {"precision": 75.0, "recall": 60.0, "f1": 66.67, "iou": 50.0, "tp": 6, "fp": 2, "fn": 4, "tn": 88}
    lines = m.to_text().splitlines()
    assert lines[0] == "precision=75.00"
    assert "f1=66.67" in lines and "tn=88" in lines
