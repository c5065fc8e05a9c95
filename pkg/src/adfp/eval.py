"""Detection metrics, identification confusion matrices, transfer matrices and report writers."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

TABLE3_COLUMNS = ("Attack", "epsilon", "AUC", "ACC", "AP", "A_std", "A_rob", "TNR", "FNR", "TPR", "FPR",
                  "Prec", "Rec", "F1")
ABLATION_COLUMNS = ("Attack", "Steps", "epsilon", "ACC", "AP", "TNR", "FNR", "TPR", "FPR")


class MetricError(ValueError):
    pass


def _binary(scores, labels):
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise MetricError(f"{len(scores)} scores but {len(labels)} labels")
    if not np.isin(labels, (0, 1)).all():
        raise MetricError("labels must be 0 (benign) or 1 (adversarial)")
    labels = labels.astype(np.int64)
    if labels.min(initial=1) == labels.max(initial=0) or len(labels) < 2:
        raise MetricError("need at least one benign and one adversarial sample")
    return scores, labels


def roc_auc(scores, labels) -> float:
    """Probability a random positive outscores a random negative, ties counting one half."""
    scores, labels = _binary(scores, labels)
    ranks = rankdata(scores)  # average ranks resolve ties as halves
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    """Sum over score thresholds of precision times recall increment; tied scores form one threshold."""
    scores, labels = _binary(scores, labels)
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last_of_group = np.r_[s[1:] != s[:-1], True]
    tp = np.cumsum(y)[last_of_group]
    seen = (np.flatnonzero(last_of_group) + 1)
    recall_gain = np.diff(np.r_[0, tp]) / tp[-1]
    return float((recall_gain * tp / seen).sum())


def _ratio(num, den) -> float:
    return float(num / den) if den else 0.0


@dataclasses.dataclass(frozen=True)
class DetectionReport:
    """Point metrics at a fixed threshold plus threshold-free AUC and AP; empty ratios read 0."""

    TP: int
    FP: int
    TN: int
    FN: int
    AUC: float
    AP: float
    threshold: float = 0.5

    @property
    def total(self) -> int:
        return self.TP + self.FP + self.TN + self.FN

    @property
    def ACC(self) -> float:
        return _ratio(self.TP + self.TN, self.total)

    @property
    def TPR(self) -> float:
        return _ratio(self.TP, self.TP + self.FN)

    @property
    def FNR(self) -> float:
        return _ratio(self.FN, self.TP + self.FN)

    @property
    def TNR(self) -> float:
        return _ratio(self.TN, self.TN + self.FP)

    @property
    def FPR(self) -> float:
        return _ratio(self.FP, self.TN + self.FP)

    @property
    def Prec(self) -> float:
        return _ratio(self.TP, self.TP + self.FP)

    @property
    def Rec(self) -> float:
        return self.TPR

    @property
    def F1(self) -> float:
        p, r = self.Prec, self.Rec
        return _ratio(2 * p * r, p + r)

    @property
    def A_std(self) -> float:
        """Accuracy on benign samples only."""
        return self.TNR

    @property
    def A_rob(self) -> float:
        """Accuracy on adversarial samples only."""
        return self.TPR

    def metrics(self) -> dict:
        names = ("AUC", "ACC", "AP", "A_std", "A_rob", "TNR", "FNR", "TPR", "FPR", "Prec", "Rec", "F1")
        return {k: getattr(self, k) for k in names}

    def to_dict(self) -> dict:
        return {"TP": self.TP, "FP": self.FP, "TN": self.TN, "FN": self.FN, "threshold": self.threshold,
                **self.metrics()}


def counts_report(TP: int, FP: int, TN: int, FN: int, AUC: float = float("nan"), AP: float = float("nan")):
    return DetectionReport(int(TP), int(FP), int(TN), int(FN), AUC, AP)


def binary_report(scores, labels, threshold: float = 0.5) -> DetectionReport:
    scores, labels = _binary(scores, labels)
    pred = scores >= threshold
    pos = labels == 1
    return DetectionReport(
        TP=int((pred & pos).sum()), FP=int((pred & ~pos).sum()),
        TN=int((~pred & ~pos).sum()), FN=int((~pred & pos).sum()),
        AUC=roc_auc(scores, labels), AP=average_precision(scores, labels), threshold=threshold)


def confusion_matrix(predictions, labels, k: int) -> np.ndarray:
    """Counts with rows indexed by true class and columns by predicted class."""
    predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if predictions.shape != labels.shape:
        raise MetricError(f"{len(predictions)} predictions but {len(labels)} labels")
    for name, arr in (("prediction", predictions), ("label", labels)):
        bad = np.flatnonzero((arr < 0) | (arr >= k))
        if bad.size:
            raise MetricError(f"{name} {arr[bad[0]]} at position {bad[0]} outside [0, {k})")
    out = np.zeros((k, k), dtype=np.int64)
    np.add.at(out, (labels, predictions), 1)
    return out


# -- transferability ----------------------------------------------------------------

@dataclasses.dataclass
class DetectionSplit:
    """Transformed benign and adversarial images for one attack, already split for training and testing."""

    name: str
    benign_train: object
    adv_train: object
    benign_test: object
    adv_test: object


@dataclasses.dataclass
class TransferMatrix:
    rows: list
    cols: list
    accuracy: np.ndarray
    tpr: np.ndarray

    def to_dict(self) -> dict:
        return {"rows": list(self.rows), "cols": list(self.cols),
                "accuracy": self.accuracy.tolist(), "tpr": self.tpr.tolist()}


def detection_test_report(detector, split: DetectionSplit, score_fn) -> DetectionReport:
    scores = np.concatenate([score_fn(detector, split.benign_test.images), score_fn(detector, split.adv_test.images)])
    labels = np.r_[np.zeros(len(split.benign_test), np.int64), np.ones(len(split.adv_test), np.int64)]
    return binary_report(scores, labels)


def transfer_matrix(train_splits, eval_splits, train_fn, score_fn, detectors: dict | None = None) -> TransferMatrix:
    """Row ``i`` trains one detector on ``train_splits[i]`` and scores every column's held-out data.

    ``detectors`` may supply already-trained detectors by row name.
    """
    names = [s.name for s in train_splits]
    cols = [s.name for s in eval_splits]
    for label, seq in (("training", names), ("evaluation", cols)):
        if len(set(seq)) != len(seq):
            raise MetricError(f"duplicate {label} set names: {seq}")
    detectors = dict(detectors or {})
    acc = np.zeros((len(names), len(cols)))
    tpr = np.zeros_like(acc)
    for i, split in enumerate(train_splits):
        det = detectors.get(split.name)
        if det is None:
            det = train_fn(split.benign_train, split.adv_train)
        for j, col in enumerate(eval_splits):
            rep = detection_test_report(det, col, score_fn)
            acc[i, j], tpr[i, j] = rep.ACC, rep.TPR
    return TransferMatrix(names, cols, acc, tpr)


# -- report writers ----------------------------------------------------------------

def format_epsilon(eps) -> str:
    """``k/255`` when the budget is a whole number of grey levels, else a short decimal."""
    if eps is None:
        return "-"
    k = Fraction(float(eps)).limit_denominator(255 * 16) * 255
    if k.denominator == 1:
        return f"{k.numerator}/255"
    return f"{float(eps):.4g}"


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if v != v else f"{v:.6f}"
    return str(v)


def _write_csv(path, header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def _metrics_or_nan(rep):
    if rep is None:
        return dict.fromkeys(TABLE3_COLUMNS[2:], float("nan"))
    return rep.metrics()


def table3_csv(entries, path=None) -> str:
    """``entries``: iterable of (attack, epsilon, DetectionReport or None); None fills the row with nan."""
    rows = []
    for attack, eps, rep in entries:
        m = _metrics_or_nan(rep)
        rows.append([attack, format_epsilon(eps)] + [m[c] for c in TABLE3_COLUMNS[2:]])
    return _write_csv(path, TABLE3_COLUMNS, rows)


def ablation_csv(entries, path=None) -> str:
    """``entries``: iterable of (attack, steps, epsilon, DetectionReport or None)."""
    rows = []
    for attack, steps, eps, rep in entries:
        m = _metrics_or_nan(rep)
        rows.append([attack, steps, format_epsilon(eps)] + [m[c] for c in ABLATION_COLUMNS[3:]])
    return _write_csv(path, ABLATION_COLUMNS, rows)


def transfer_csv(matrix: TransferMatrix, path=None) -> str:
    rows = [[r] + list(matrix.accuracy[i]) for i, r in enumerate(matrix.rows)]
    return _write_csv(path, ["train \\ eval"] + list(matrix.cols), [[c if isinstance(c, str) else float(c) for c in row]
                                                                     for row in rows])


def confusion_csv(matrix: np.ndarray, names, path=None) -> str:
    rows = [[names[i]] + [int(v) for v in matrix[i]] for i in range(len(names))]
    return _write_csv(path, ["true \\ predicted"] + list(names), rows)


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")
