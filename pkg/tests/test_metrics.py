import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tssg.metrics import (
    CSV_HEADER,
    ConfusionCounts,
    MetricReport,
    MetricRow,
    binary_row,
    confusion_counts,
    dice,
    evaluate_dataset,
    fmeasure,
    mae,
    multiclass_metrics,
    parse_csv,
    precision,
    sensitivity,
    specificity,
)


def loop_counts(pred, gt):
    tp = fp = tn = fn = 0
    for p, g in zip(np.asarray(pred).ravel().tolist(), np.asarray(gt).ravel().tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn


def loop_metrics(pred, gt):
    tp, fp, tn, fn = loop_counts(pred, gt)
    d = 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)
    s = tp / (tp + fn) if tp + fn else 0.0
    sp = tn / (tn + fp) if tn + fp else 0.0
    pr = tp / (tp + fp) if tp + fp else 0.0
    f = 2 * s * pr / (s + pr) if s + pr else 0.0
    err = 0.0
    for p, g in zip(np.asarray(pred, dtype=float).ravel().tolist(), np.asarray(gt, dtype=float).ravel().tolist()):
        err += abs(p - g)
    return d, s, sp, pr, f, err / np.asarray(pred).size


def random_pairs(n, size=16, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        p = rng.uniform(0.05, 0.95)
        yield rng.random((size, size)) < p, rng.random((size, size)) < rng.uniform(0.05, 0.95)


def test_counts_all_foreground():
    c = confusion_counts(np.ones((4, 4)), np.ones((4, 4)))
    assert (c.tp, c.fp, c.tn, c.fn) == (16, 0, 0, 0)


def test_counts_false_positives():
    c = confusion_counts(np.ones((4, 4)), np.zeros((4, 4)))
    assert c.fp == 16 and c.total == 16


def test_counts_reject_shape_mismatch():
    with pytest.raises(ValueError):
        confusion_counts(np.ones((4, 4)), np.ones((4, 5)))


def test_counts_match_loop_oracle():
    for pred, gt in random_pairs(100):
        c = confusion_counts(pred, gt)
        assert (c.tp, c.fp, c.tn, c.fn) == loop_counts(pred, gt)


def test_metrics_match_loop_oracle():
    for pred, gt in random_pairs(100, seed=1):
        row = binary_row("x", pred, gt)
        for got, want in zip(row.values(), loop_metrics(pred, gt)):
            assert abs(got - want) <= 1e-12


def test_dice_examples():
    a = np.zeros(16, bool)
    b = np.zeros(16, bool)
    a[:8] = True
    b[4:12] = True
    assert dice(a, b) == 0.5
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(np.zeros(5), np.zeros(5)) == 1.0


def test_ratio_examples():
    assert sensitivity(ConfusionCounts(tp=3, fp=0, tn=5, fn=1)) == 0.75
    perfect = confusion_counts(np.eye(3), np.eye(3))
    assert sensitivity(perfect) == specificity(perfect) == precision(perfect) == 1.0


def test_zero_denominator_flags():
    row = binary_row("empty", np.zeros((3, 3)), np.zeros((3, 3)))
    assert row.precision == 0.0 and row.sensitivity == 0.0
    assert row.dice == 1.0
    assert {"precision", "sensitivity", "dice", "fmeasure"} <= row.flags
    assert "specificity" not in row.flags


def test_fmeasure_examples():
    assert fmeasure(1.0, 1.0) == 1.0
    assert fmeasure(0.75, 0.864) == pytest.approx(0.80297, abs=1e-5)
    assert fmeasure(0.0, 0.7) == 0.0
    assert fmeasure(0.0, 0.0) == 0.0


def test_mae_examples():
    gt = np.random.default_rng(0).random((8, 8)) < 0.5
    assert mae(gt.astype(float), gt) == 0.0
    assert mae(np.full((8, 8), 0.5), gt) == 0.5
    prob = np.random.default_rng(1).random((8, 8))
    want = sum(abs(p - g) for p, g in zip(prob.ravel().tolist(), gt.astype(float).ravel().tolist())) / 64
    assert abs(mae(prob, gt) - want) <= 1e-12
    with pytest.raises(ValueError):
        mae(np.zeros((2, 2)), np.zeros((2, 3)))


def test_dice_equals_f1_on_nondegenerate_counts():
    for pred, gt in random_pairs(100, seed=2):
        c = confusion_counts(pred, gt)
        if c.tp + c.fn and c.tp + c.fp:
            assert abs(dice(pred, gt) - fmeasure(sensitivity(c), precision(c))) <= 1e-12


def test_dice_symmetric_precision_not():
    a = np.array([1, 1, 1, 0], bool)
    b = np.array([1, 0, 0, 0], bool)
    assert dice(a, b) == dice(b, a)
    assert precision(confusion_counts(a, b)) == pytest.approx(1 / 3)
    assert precision(confusion_counts(b, a)) == 1.0


@settings(max_examples=1000, deadline=None)
@given(arrays(bool, (6, 6)), arrays(bool, (6, 6)))
def test_every_metric_in_unit_interval(pred, gt):
    for v in binary_row("x", pred, gt).values():
        assert 0.0 <= v <= 1.0


def test_multiclass_perfect():
    m = np.array([[0, 1], [2, 2]])
    res = multiclass_metrics(m, m, 3)
    assert res.macro.dice == 1.0 and res.macro.mae == 0.0


def test_multiclass_absent_class_is_flagged():
    m = np.array([[0, 1], [1, 0]])
    res = multiclass_metrics(m, m, 3)
    assert res.per_class[2].dice == 1.0
    assert "dice" in res.per_class[2].flags


def test_multiclass_hand_counts():
    pred = np.array([[0, 1, 1, 2], [0, 1, 2, 2], [0, 0, 2, 1], [0, 0, 0, 0]])
    gt = np.array([[0, 1, 1, 1], [0, 1, 2, 2], [0, 2, 2, 0], [0, 0, 0, 0]])
    res = multiclass_metrics(pred, gt, 3)
    # class 1: pred {(0,1),(0,2),(1,1),(2,3)}, gt {(0,1),(0,2),(0,3),(1,1)} -> tp 3, fp 1, fn 1, tn 11
    c1 = res.per_class[1]
    assert c1.dice == 6 / 8 and c1.sensitivity == 3 / 4 and c1.precision == 3 / 4 and c1.specificity == 11 / 12
    # class 2: pred {(0,3),(1,2),(1,3),(2,2)}, gt {(1,2),(1,3),(2,1),(2,2)} -> tp 3, fp 1, fn 1, tn 11
    c2 = res.per_class[2]
    assert c2.dice == 6 / 8 and c2.specificity == 11 / 12
    assert res.macro.dice == 0.75
    assert c1.mae == 2 / 16


def test_multiclass_rejects_bad_labels():
    with pytest.raises(ValueError):
        multiclass_metrics(np.array([[3]]), np.array([[0]]), 3)


def test_dataset_mean_single_pair():
    pred, gt = next(random_pairs(1))
    rep = evaluate_dataset([("a", pred, gt)])
    assert rep.mean.values() == rep.rows[0].values()


def test_dataset_mean_of_two_rows():
    r1 = MetricRow("a", 1.0, 0.5, 1.0, 0.5, 0.5, 0.0)
    r2 = MetricRow("b", 0.5, 0.25, 0.75, 0.0, 0.25, 0.5)
    rep = MetricReport.from_rows([r1, r2])
    assert rep.mean.values() == (0.75, 0.375, 0.875, 0.25, 0.375, 0.25)


def test_dataset_rejects_empty():
    with pytest.raises(ValueError):
        evaluate_dataset([])


def test_dataset_uses_probability_for_mae():
    gt = np.array([[1, 0]])
    prob = np.array([[0.75, 0.25]])
    rep = evaluate_dataset([("a", prob > 0.5, gt, prob)])
    assert rep.rows[0].mae == 0.25
    assert evaluate_dataset([("a", prob > 0.5, gt)]).rows[0].mae == 0.0


def test_csv_format_and_round_trip():
    rows = [MetricRow("img_a", 0.1234567, 1.0, 0.0, 0.5, 1 / 3, 0.25), MetricRow("img_b", 1, 1, 1, 1, 1, 0)]
    text = MetricReport.from_rows(rows).to_csv()
    lines = text.splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert lines[1] == "img_a,0.123457,1.000000,0.000000,0.500000,0.333333,0.250000"
    assert lines[-1].startswith("MEAN,")
    back = parse_csv(text)
    assert back.to_csv() == text
    assert back.rows[0].dice == 0.123457


def test_csv_parse_rejects_bad_header():
    with pytest.raises(ValueError):
        parse_csv("image,dice\nMEAN,1\n")
