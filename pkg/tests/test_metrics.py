import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adfp.eval import (
    ABLATION_COLUMNS,
    TABLE3_COLUMNS,
    DetectionSplit,
    MetricError,
    ablation_csv,
    average_precision,
    binary_report,
    confusion_matrix,
    counts_report,
    format_epsilon,
    roc_auc,
    table3_csv,
    transfer_matrix,
)


# -- brute-force references ----------------------------------------------------------

def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p, q in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def brute_ap(scores, labels):
    # mean over positives of precision at the threshold equal to that positive's score
    out = []
    for s, y in zip(scores, labels):
        if y != 1:
            continue
        above = [(t, z) for t, z in zip(scores, labels) if t >= s]
        out.append(sum(z for _, z in above) / len(above))
    return sum(out) / len(out)


def brute_counts(scores, labels, thr):
    tp = fp = tn = fn = 0
    for s, y in zip(scores, labels):
        if s >= thr:
            tp, fp = tp + (y == 1), fp + (y == 0)
        else:
            fn, tn = fn + (y == 1), tn + (y == 0)
    return tp, fp, tn, fn


def random_draw(rng):
    n = int(rng.integers(2, 40))
    labels = rng.integers(0, 2, n)
    labels[0], labels[1] = 0, 1
    # coarse grid so ties are common
    scores = rng.integers(0, 8, n) / 7.0 if rng.random() < 0.5 else rng.random(n)
    return scores, labels


def test_thousand_random_draws_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        scores, labels = random_draw(rng)
        s, y = scores.tolist(), labels.tolist()
        assert abs(roc_auc(scores, labels) - brute_auc(s, y)) <= 1e-9
        assert abs(average_precision(scores, labels) - brute_ap(s, y)) <= 1e-9
        rep = binary_report(scores, labels)
        tp, fp, tn, fn = brute_counts(s, y, 0.5)
        assert (rep.TP, rep.FP, rep.TN, rep.FN) == (tp, fp, tn, fn)
        assert abs(rep.ACC - (tp + tn) / len(s)) <= 1e-9
        assert abs(rep.TPR + rep.FNR - 1) <= 1e-9
        if tn + fp:
            assert abs(rep.TNR + rep.FPR - 1) <= 1e-9
        if rep.Prec + rep.Rec:
            assert abs(rep.F1 - 2 * rep.Prec * rep.Rec / (rep.Prec + rep.Rec)) <= 1e-9
        assert rep.A_std == rep.TNR and rep.A_rob == rep.TPR
        assert all(0.0 <= v <= 1.0 for v in rep.metrics().values())


# -- documented examples -----------------------------------------------------------

def test_auc_examples():
    assert roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert roc_auc([0.1, 0.2, 0.3, 0.4], [0, 1, 0, 1]) == pytest.approx(brute_auc([0.1, 0.2, 0.3, 0.4], [0, 1, 0, 1]))
    assert roc_auc([0.1, 0.2, 0.3, 0.4], [0, 1, 0, 1]) == 0.75
    assert roc_auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_ap_examples():
    assert average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0
    assert average_precision([0.2, 0.9], [1, 0]) == 0.5


def test_ap_random_scores_track_prevalence():
    rng = np.random.default_rng(1)
    vals, prevalences = [], []
    for _ in range(1000):
        # AP of random scores is biased upward by O(log n / n); 400 keeps that well inside 0.05
        labels = (rng.random(400) < 0.3).astype(int)
        labels[:2] = [0, 1]
        vals.append(average_precision(rng.random(400), labels))
        prevalences.append(labels.mean())
    assert np.mean(vals) >= np.mean(prevalences) - 0.05
    assert abs(np.mean(vals) - np.mean(prevalences)) <= 0.05


def test_hand_report():
    rep = counts_report(TP=95, FN=5, TN=90, FP=10)
    assert rep.ACC == 0.925
    assert rep.TPR == 0.95 and rep.TNR == 0.90
    assert rep.Prec == pytest.approx(95 / 105)
    assert round(rep.Prec, 4) == 0.9048
    assert round(rep.F1, 4) == 0.9268


def test_hand_report_from_scores():
    scores = np.r_[np.full(95, 0.9), np.full(5, 0.1), np.full(90, 0.2), np.full(10, 0.7)]
    labels = np.r_[np.ones(100, int), np.zeros(100, int)]
    rep = binary_report(scores, labels)
    assert (rep.TP, rep.FN, rep.TN, rep.FP) == (95, 5, 90, 10)
    assert rep.ACC == 0.925


def test_perfect_classifier():
    rep = binary_report([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0])
    for name in ("ACC", "TPR", "TNR", "Prec", "Rec", "F1", "AUC", "AP"):
        assert getattr(rep, name) == 1.0
    assert rep.FPR == 0.0 and rep.FNR == 0.0


def test_empty_denominators_read_zero():
    rep = binary_report([0.1, 0.2], [0, 1])
    assert rep.TP == 0 and rep.Prec == 0.0 and rep.F1 == 0.0


@pytest.mark.parametrize("fn", [roc_auc, average_precision, binary_report])
def test_one_class_rejected(fn):
    with pytest.raises(MetricError):
        fn([0.1, 0.4], [1, 1])
    with pytest.raises(MetricError):
        fn([0.1, 0.4], [0, 2])
    with pytest.raises(MetricError):
        fn([0.1], [0, 1])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-50, 50), min_size=4, max_size=30), st.integers(0, 2**32 - 1))
def test_auc_invariant_under_monotone_transform(scores, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, len(scores))
    labels[:2] = [0, 1]
    s = np.asarray(scores) / 10.0
    base = roc_auc(s, labels)
    assert roc_auc(np.exp(s), labels) == pytest.approx(base, abs=1e-12)
    assert roc_auc(3 * s + 1, labels) == pytest.approx(base, abs=1e-12)
    assert roc_auc(-s, labels) == pytest.approx(1 - base, abs=1e-12)


# -- confusion matrices ------------------------------------------------------------

def test_confusion_examples():
    labels = np.array([0, 1, 2, 2, 1])
    assert np.array_equal(confusion_matrix(labels, labels, 3), np.diag([1, 2, 2]))
    cm = confusion_matrix(np.zeros(5, int), labels, 3)
    assert np.count_nonzero(cm.sum(axis=0)) == 1 and cm[:, 0].sum() == 5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_confusion_row_sums_are_class_counts(seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, 30)
    pred = rng.integers(0, 4, 30)
    cm = confusion_matrix(pred, labels, 4)
    assert np.array_equal(cm.sum(axis=1), np.bincount(labels, minlength=4))
    assert np.array_equal(confusion_matrix(rng.permutation(pred), labels, 4).sum(axis=1), cm.sum(axis=1))


def test_confusion_out_of_range():
    with pytest.raises(MetricError, match="outside"):
        confusion_matrix([0, 3], [0, 1], 3)
    with pytest.raises(MetricError):
        confusion_matrix([0, -1], [0, 1], 3)


# -- transfer matrix ---------------------------------------------------------------

class _Set:
    def __init__(self, images):
        self.images = np.asarray(images, dtype=float)

    def __len__(self):
        return len(self.images)


def _split(name, level):
    return DetectionSplit(name, _Set([0.0, 0.1]), _Set([level, level]), _Set([0.0, 0.1]), _Set([level, level]))


def test_transfer_matrix_threshold_detector():
    # a "detector" is the midpoint between benign and adversarial training levels
    train = lambda b, a: (b.images.mean() + a.images.mean()) / 2
    score = lambda det, images: (images > det).astype(float)
    splits = [_split("weak", 0.4), _split("strong", 0.9)]
    tm = transfer_matrix(splits, splits, train, score)
    assert tm.rows == ["weak", "strong"] and tm.cols == ["weak", "strong"]
    assert tm.accuracy.tolist() == [[1.0, 1.0], [0.5, 1.0]]
    assert tm.tpr.tolist() == [[1.0, 1.0], [0.0, 1.0]]
    assert ((tm.accuracy >= 0) & (tm.accuracy <= 1)).all()


def test_transfer_matrix_reuses_supplied_detectors():
    calls = []

    def train(b, a):
        calls.append(1)
        return 0.5

    score = lambda det, images: (images > det).astype(float)
    splits = [_split("a", 0.9), _split("b", 0.9)]
    transfer_matrix(splits, splits, train, score, detectors={"a": 0.5})
    assert len(calls) == 1


def test_transfer_matrix_duplicate_names():
    with pytest.raises(MetricError, match="duplicate"):
        transfer_matrix([_split("a", 1), _split("a", 1)], [], None, None)


# -- writers -----------------------------------------------------------------------

def test_epsilon_format():
    assert format_epsilon(8 / 255) == "8/255"
    assert format_epsilon(1 / 255) == "1/255"
    assert format_epsilon(0.05) == "0.05"
    assert format_epsilon(None) == "-"


def test_table3_columns_and_values():
    rep = counts_report(95, 10, 90, 5, AUC=0.97, AP=0.96)
    text = table3_csv([("fgsm", 8 / 255, rep)])
    header, row = text.strip().split("\n")
    assert header.split(",") == list(TABLE3_COLUMNS)
    assert header == "Attack,epsilon,AUC,ACC,AP,A_std,A_rob,TNR,FNR,TPR,FPR,Prec,Rec,F1"
    cells = row.split(",")
    assert cells[:5] == ["fgsm", "8/255", "0.970000", "0.925000", "0.960000"]


def test_ablation_columns(tmp_path):
    rep = counts_report(95, 10, 90, 5, AUC=0.97, AP=0.96)
    path = tmp_path / "abl.csv"
    text = ablation_csv([("pgd", 2, 8 / 255, rep)], path)
    assert path.read_text() == text
    assert text.split("\n")[0] == ",".join(ABLATION_COLUMNS)
    assert text.split("\n")[1].startswith("pgd,2,8/255,0.925000,0.960000")
