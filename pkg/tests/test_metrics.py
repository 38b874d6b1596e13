import numpy as np
import pytest

from meun.metrics import (
    MetricsReport,
    confusion_counts,
    e_measure,
    evaluate_pair,
    f_beta,
    mae,
    mean_f_measure,
    quantize,
    s_measure,
    s_measure_parts,
)
from oracles import confusion_loops, mae_loops, mean_f_loops, quantize_pixel


def random_pairs(n=50, size=16, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        pred = rng.uniform(size=(size, size))
        # include exact level boundaries and saturated values
        pred[rng.uniform(size=pred.shape) < 0.1] = rng.integers(0, 256) / 255.0
        gt = rng.uniform(size=(size, size)) < rng.uniform(0.1, 0.9)
        yield pred, gt


def blob(h=16, w=16):
    gt = np.zeros((h, w), dtype=bool)
    gt[3:10, 4:12] = True
    return gt


def test_quantize_matches_pixel_rule():
    vals = np.array([0.0, 0.5 / 255, 1.49 / 255, 127.5 / 255, 1.0])
    assert quantize(vals).tolist() == [quantize_pixel(v) for v in vals]


def test_confusion_counts_match_loops():
    for pred, gt in random_pairs(10):
        for t in (1, 17, 128, 255):
            assert confusion_counts(pred, gt, t) == confusion_loops(pred, gt, t)


def test_confusion_identity():
    gt = blob()
    for t in (1, 100, 255):
        tp, fp, fn, tn = confusion_counts(gt.astype(float), gt, t)
        assert fp == fn == 0 and tp == gt.sum()


def test_confusion_threshold_one():
    pred = np.array([[0.0, 0.5 / 255], [0.49 / 255, 1.0]])
    gt = np.zeros((2, 2), dtype=bool)
    assert confusion_counts(pred, gt, 1)[1] == 2


def test_mf_and_mae_match_oracles():
    for pred, gt in random_pairs(50):
        assert abs(mean_f_measure(pred, gt) - mean_f_loops(pred, gt)) <= 1e-12
        assert abs(mae(pred, gt) - mae_loops(pred, gt)) <= 1e-12


def test_f_beta_example():
    assert f_beta(0.8, 0.5) == pytest.approx(0.52 / 0.74, abs=1e-15)
    assert 0.52 / 0.74 == pytest.approx(0.70270, abs=1e-5)


def test_mf_uniform_prediction_half_foreground():
    gt = np.zeros((8, 8), dtype=bool)
    gt[:4] = True
    pred = np.ones((8, 8))
    assert mean_f_measure(pred, gt) == pytest.approx(mean_f_loops(pred, gt), abs=1e-12)
    assert mean_f_measure(pred, gt) == pytest.approx(0.65 / 1.15, abs=1e-12)


def test_mf_empty_gt_is_zero():
    assert mean_f_measure(np.random.default_rng(0).uniform(size=(5, 5)), np.zeros((5, 5))) == 0.0


def test_mae_examples():
    gt = blob()
    assert mae(gt.astype(float), gt) == 0.0
    assert mae(np.full((4, 4), 0.5), np.zeros((4, 4))) == 0.5
    assert mae(1.0 - gt, gt) == 1.0


def test_perfect_prediction_scores():
    gt = blob()
    scores = evaluate_pair(gt.astype(float), gt)
    expected = {"mF": 1.0, "MAE": 0.0, "Sm": 1.0, "Em": 1.0}
    assert scores == pytest.approx(expected, abs=1e-12)


def test_s_measure_degenerate_cases():
    assert s_measure(np.full((6, 6), 0.5), np.ones((6, 6))) == 0.5
    assert s_measure(np.full((6, 6), 0.25), np.zeros((6, 6))) == 0.75


def test_s_measure_alpha_weighting():
    for pred, gt in random_pairs(10, seed=1):
        so, sr = s_measure_parts(pred, gt)
        assert abs(s_measure(pred, gt) - 0.5 * so - 0.5 * sr) <= 1e-12


def test_s_measure_range():
    for pred, gt in random_pairs(20, seed=2):
        assert 0.0 <= s_measure(pred, gt) <= 1.0


def test_e_measure_cases():
    gt = np.zeros((8, 8), dtype=bool)
    gt[:, :4] = True
    assert e_measure(gt.astype(float), gt) == 1.0
    assert e_measure(1.0 - gt, gt) == 0.0
    assert e_measure(np.zeros((8, 8)), np.zeros((8, 8), dtype=bool)) == 1.0


def test_transpose_invariance():
    for pred, gt in random_pairs(10, seed=3):
        a, b = evaluate_pair(pred, gt), evaluate_pair(pred.T, gt.T)
        for k in ("mF", "MAE", "Em"):
            assert a[k] == pytest.approx(b[k], abs=1e-12)


def test_mae_complement():
    for pred, gt in random_pairs(10, seed=4):
        assert mae(1 - pred, ~gt) == pytest.approx(mae(pred, gt), abs=1e-12)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        mae(np.zeros((3, 3)), np.zeros((3, 4)))


def test_report_rows_and_aggregate():
    report = MetricsReport()
    pairs = list(random_pairs(3, seed=5))
    for i, (pred, gt) in enumerate(pairs):
        report.add(f"im{i}", pred, gt)
    report.add("empty", np.zeros((16, 16)), np.zeros((16, 16), dtype=bool))
    rows = report.to_csv().strip().splitlines()
    assert len(rows) == 1 + report.count + 1
    assert rows[-1].startswith("mean,")
    assert report.aggregate["MAE"] == pytest.approx(np.mean([r["MAE"] for r in report.rows]))
    assert report.empty_gt == ["empty"]
    assert "empty ground truth" in report.to_text()
