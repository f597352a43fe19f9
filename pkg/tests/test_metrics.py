# tests/test_metrics.py

import math

import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from fiberseg.errors import ShapeMismatch, SingleClassGold
from fiberseg.metrics import (
    CATEGORY_FN, CATEGORY_FP, CATEGORY_TN, CATEGORY_TP, ConfusionCounts, EvaluateConfig, Summary,
    category_map, confusion, dice, evaluate_stack, matthews, roc_auc, threshold,
)
from fiberseg.volume_io import Volume


class CollectingWriter:
    def __init__(self):
        self.slices = []

    def write(self, data):
        self.slices.append(data)


# ========== Счётчики и коэффициенты ==========

def test_confusion_and_dice():
    pred = np.array([1, 1, 1, 0, 0, 0])
    gold = np.array([1, 1, 0, 1, 0, 0])
    c = confusion(pred, gold)
    assert c == ConfusionCounts(tp=2, fp=1, tn=2, fn=1)
    assert c.total == 6
    assert dice(c) == pytest.approx(2 / 3)


def test_matthews_values():
    gold = np.array([1, 1, 0, 0, 1, 0])
    assert matthews(confusion(gold, gold)) == pytest.approx(1.0)
    assert matthews(confusion(1 - gold, gold)) == pytest.approx(-1.0)
    # пустое предсказание: множитель (TP + FP) равен нулю
    assert matthews(confusion(np.zeros(6), gold)) == 0.0

    c = ConfusionCounts(tp=5, fp=2, tn=10, fn=3)
    expected = (5 * 10 - 2 * 3) / math.sqrt(7 * 8 * 12 * 13)
    assert matthews(c) == pytest.approx(expected)


def test_both_empty_slice():
    c = confusion(np.zeros((4, 4)), np.zeros((4, 4)))
    assert c.both_empty
    assert dice(c) == 1.0
    assert matthews(c) == 0.0


def test_confusion_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        confusion(np.zeros((2, 2)), np.zeros((2, 3)))


def test_threshold_is_strict():
    np.testing.assert_array_equal(threshold(np.array([0.4, 0.5, 0.6])), [False, False, True])


def test_category_map_codes():
    pred = np.array([1, 1, 0, 0])
    gold = np.array([1, 0, 1, 0])
    np.testing.assert_array_equal(category_map(pred, gold),
                                  [CATEGORY_TP, CATEGORY_FP, CATEGORY_FN, CATEGORY_TN])


# ========== Сводка ==========

def test_summary_sample_std():
    s = Summary.of([1.0, 0.5])
    assert s.mean == pytest.approx(0.75)
    assert s.std == pytest.approx(0.3536, abs=1e-4)
    assert s.n == 2
    assert Summary.of([1.0, 0.5], ddof=0).std == pytest.approx(0.25)


def test_summary_edge_cases():
    assert Summary.of([0.8]).std == 0.0
    assert Summary.of([0.8, None]).n == 1
    empty = Summary.of([])
    assert empty.n == 0 and math.isnan(empty.mean)
    assert str(Summary(0.9876, 0.0123, 3)) == "98.76 ± 1.23 %"


# ========== ROC ==========

def test_roc_perfect_separation():
    scores = np.array([0.1, 0.2, 0.8, 0.9])
    gold = np.array([0, 0, 1, 1])
    fpr, tpr, area = roc_auc(scores, gold)
    assert area == pytest.approx(1.0)
    assert fpr[0] == 0 and tpr[-1] == 1


def test_roc_matches_reference(rng):
    gold = rng.random(500) > 0.6
    scores = np.clip(gold * 0.3 + rng.random(500) * 0.7, 0, 1)
    _, _, area = roc_auc(scores, gold)
    assert area == pytest.approx(roc_auc_score(gold, scores))


def test_roc_single_class():
    with pytest.raises(SingleClassGold):
        roc_auc(np.array([0.1, 0.9]), np.array([1, 1]))
    with pytest.raises(SingleClassGold):
        roc_auc(np.array([0.1, 0.9]), np.array([0, 0]))


# ========== Оценка стека ==========

def make_stacks():
    gold = np.zeros((3, 8, 8), dtype=np.uint8)
    gold[0, 2:6, 2:6] = 1
    gold[1, 0:4, 0:8] = 1
    pred = np.zeros((3, 8, 8), dtype=np.float32)
    pred[0, 2:6, 2:6] = 0.9
    pred[1, 0:2, 0:8] = 0.8
    pred[1, 4:6, 0:8] = 0.7
    return Volume(pred), Volume(gold)


def test_evaluate_stack(logger):
    pred, gold = make_stacks()
    report = evaluate_stack(pred, gold, EvaluateConfig(), logger=logger)

    assert [s.z for s in report.slices] == [0, 1, 2]
    assert report.slices[0].dice == pytest.approx(1.0)
    assert report.slices[1].dice == pytest.approx(0.5)
    assert report.empty_slices == [2]
    assert report.dice_nonempty.mean == pytest.approx(0.75)
    assert report.dice_nonempty.std == pytest.approx(0.3536, abs=1e-4)
    assert report.dice.n == 3
    assert report.totals.tp == 16 + 16
    # у срезов 1 и 2 коэффициент Мэтьюса 0, при равенстве - по номеру среза
    assert [s.z for s in report.worst(2)] == [1, 2]

    # AUC только для срезов с обоими классами
    assert report.slices[2].auc is None
    assert report.auc.n == 2


def test_evaluate_stack_frames(logger):
    pred, gold = make_stacks()
    report = evaluate_stack(pred, gold, EvaluateConfig(), logger=logger)
    frame = report.to_frame()
    assert list(frame.columns) == ['slice', 'dice', 'matthews', 'both_empty', 'tp', 'fp', 'tn', 'fn', 'auc']
    assert len(frame) == 3
    assert set(report.roc_frame()['slice']) == {0, 1}

    summary = report.summary(worst=2)
    assert summary['slices'] == 3
    assert summary['empty_slices'] == [2]
    assert len(summary['worst_slices']) == 2


def test_evaluate_stack_parallel_matches_serial(logger):
    pred, gold = make_stacks()
    serial = evaluate_stack(pred, gold, EvaluateConfig(), workers=1, logger=logger)
    parallel = evaluate_stack(pred, gold, EvaluateConfig(), workers=2, logger=logger)
    assert [s.counts for s in serial.slices] == [s.counts for s in parallel.slices]
    assert serial.dice == parallel.dice


def test_evaluate_stack_pooled_roc(logger, rng):
    gold = (rng.random((2, 10, 10)) > 0.5).astype(np.uint8)
    levels = rng.integers(0, 10, size=gold.shape)
    scores = ((levels + 5 * gold) % 10 / 10 + 0.05).astype(np.float32)
    report = evaluate_stack(Volume(scores), Volume(gold), EvaluateConfig(roc='pooled', roc_bins=10),
                            logger=logger)
    expected = roc_auc_score(gold.ravel(), scores.ravel())
    assert report.pooled_roc[2] == pytest.approx(expected)
    assert report.auc.mean == pytest.approx(expected)
    assert 'pooled_auc' in report.summary()
    assert set(report.roc_frame()['slice']) == {-1}


def test_evaluate_stack_without_roc(logger):
    pred, gold = make_stacks()
    report = evaluate_stack(pred, gold, EvaluateConfig(roc='none'), logger=logger)
    assert report.auc is None
    assert report.roc_frame().empty


def test_binary_predictions_and_category_maps(logger):
    pred, gold = make_stacks()
    masks = Volume((pred.data > 0.5).astype(np.uint8))
    writer = CollectingWriter()
    report = evaluate_stack(masks, gold, EvaluateConfig(), logger=logger, category_writer=writer)
    assert report.slices[1].dice == pytest.approx(0.5)
    assert len(writer.slices) == 3
    assert np.count_nonzero(writer.slices[1] == CATEGORY_FP) == 16
    assert np.count_nonzero(writer.slices[1] == CATEGORY_FN) == 16


def test_evaluate_stack_shape_mismatch(logger):
    with pytest.raises(ShapeMismatch):
        evaluate_stack(Volume(np.zeros((2, 4, 4))), Volume(np.zeros((3, 4, 4))), logger=logger)


def test_config_validation():
    with pytest.raises(ValueError):
        EvaluateConfig(roc='sometimes')
    with pytest.raises(ValueError):
        EvaluateConfig(threshold=1.5)
    with pytest.raises(ValueError):
        EvaluateConfig(ddof=2)
