"""Confusion matrices, precision/recall/F1 with macro averages, ROC curves and AUC."""

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


def confusion(labels, predictions, K):
    """K x K counts; entry [i, j] is the number of samples of true class i predicted as j."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    predictions = np.asarray(predictions, dtype=np.int64).reshape(-1)
    if labels.shape != predictions.shape:
        raise ValueError(f"{labels.size} labels but {predictions.size} predictions")
    for name, v in (("label", labels), ("prediction", predictions)):
        bad = (v < 0) | (v >= K)
        if bad.any():
            raise ValueError(f"{name} {v[bad][0]} outside [0, {K})")
    return np.bincount(labels * K + predictions, minlength=K * K).reshape(K, K)


def accuracy(cm):
    cm = np.asarray(cm)
    total = cm.sum()
    return float(np.trace(cm) / total) if total else float("nan")


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float
    precision_degenerate: bool = False
    recall_degenerate: bool = False

    @property
    def degenerate(self):
        return self.precision_degenerate or self.recall_degenerate


def _ratio(num, den):
    return (num / den, False) if den else (0.0, True)


def prf_from_counts(tp, fp, fn):
    """Precision, recall and their harmonic mean; an empty denominator yields 0 and a flag."""
    p, p_flag = _ratio(tp, tp + fp)
    r, r_flag = _ratio(tp, tp + fn)
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return PRF(float(p), float(r), float(f1), p_flag, r_flag)


def precision_recall_f1(cm):
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    return [prf_from_counts(int(a), int(b), int(c)) for a, b, c in zip(tp, fp, fn)]


def macro_metrics(triples):
    """(macro_P, macro_R, macro_F1); macro_F1 is the harmonic mean of the two macro means."""
    triples = list(triples)
    if not triples:
        raise ValueError("macro average needs at least one class")
    mp = math.fsum(t.precision for t in triples) / len(triples)
    mr = math.fsum(t.recall for t in triples) / len(triples)
    mf = 2 * mp * mr / (mp + mr) if mp + mr else 0.0
    return mp, mr, mf


@dataclass
class ROC:
    points: list          # [(threshold, fpr, tpr)], from (inf, 0, 0) to (min score, 1, 1)
    auc: float
    defined: bool = True


def roc_auc(scores, labels, cls):
    """One-vs-rest ROC for class ``cls``.

    ``scores`` is either [N, K] probabilities or the [N] column for ``cls``.
    Every distinct score is a threshold (predict positive when score >= t).
    AUC is the trapezoid area under the empirical step curve.  A class with no
    positive or no negative samples gets ``auc = nan`` and ``defined = False``.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim == 2:
        s = s[:, cls]
    pos = np.asarray(labels).reshape(-1) == cls
    P, N = int(pos.sum()), int((~pos).sum())
    if P == 0 or N == 0:
        return ROC([(math.inf, 0.0, 0.0)], float("nan"), False)
    order = np.argsort(-s, kind="stable")
    s_sorted, pos_sorted = s[order], pos[order]
    tp = np.cumsum(pos_sorted)
    fp = np.cumsum(~pos_sorted)
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s_sorted) - 1]
    points = [(math.inf, 0.0, 0.0)]
    points += [(float(s_sorted[i]), fp[i] / N, tp[i] / P) for i in last]
    auc = 0.0
    for (_, x0, y0), (_, x1, y1) in zip(points, points[1:]):
        auc += (x1 - x0) * (y0 + y1) / 2
    return ROC(points, float(auc))


@dataclass
class MetricsReport:
    class_names: list
    confusion: np.ndarray
    accuracy: float
    per_class: list
    macro_precision: float
    macro_recall: float
    macro_f1: float
    roc: list = field(default_factory=list)

    @property
    def single_ground_truth(self):
        return int((self.confusion.sum(axis=1) > 0).sum()) == 1

    def to_dict(self):
        rows = []
        for i, name in enumerate(self.class_names):
            t, r = self.per_class[i], self.roc[i] if self.roc else None
            rows.append({
                "class": name, "support": int(self.confusion[i].sum()),
                "precision": t.precision, "recall": t.recall, "f1": t.f1,
                "precision_degenerate": t.precision_degenerate, "recall_degenerate": t.recall_degenerate,
                "auc": None if r is None or not r.defined else r.auc,
                "auc_defined": bool(r and r.defined),
            })
        return {"accuracy": self.accuracy, "macro_precision": self.macro_precision,
                "macro_recall": self.macro_recall, "macro_f1": self.macro_f1,
                "num_samples": int(self.confusion.sum()), "single_ground_truth": self.single_ground_truth,
                "confusion_matrix": self.confusion.tolist(), "confusion_convention": "rows=true, cols=predicted",
                "per_class": rows}

    def write(self, out_dir):
        """metrics.json, per_class.csv, confusion.csv and roc/<class>.csv."""
        out = Path(out_dir)
        (out / "roc").mkdir(parents=True, exist_ok=True)
        d = self.to_dict()
        (out / "metrics.json").write_text(json.dumps(d, indent=2, sort_keys=True) + "\n")
        # precision is meaningless when only one class has ground truth
        show_p = not self.single_ground_truth
        with open(out / "per_class.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["class"] + (["precision"] if show_p else []) + ["recall", "f1", "auc", "support"])
            for row in d["per_class"]:
                w.writerow([row["class"]] + ([_fmt(row["precision"])] if show_p else [])
                           + [_fmt(row["recall"]), _fmt(row["f1"]), _fmt(row["auc"]), row["support"]])
            w.writerow(["macro"] + ([_fmt(self.macro_precision)] if show_p else [])
                       + [_fmt(self.macro_recall), _fmt(self.macro_f1), "", d["num_samples"]])
        with open(out / "confusion.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["true\\pred"] + list(self.class_names))
            for name, row in zip(self.class_names, self.confusion):
                w.writerow([name] + [int(v) for v in row])
        for name, r in zip(self.class_names, self.roc):
            with open(out / "roc" / f"{name}.csv", "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["threshold", "fpr", "tpr"])
                for t, x, y in r.points:
                    w.writerow([t, repr(float(x)), repr(float(y))])
        return out

    def format(self):
        lines = [f"accuracy {self.accuracy:.4f}  macro P {self.macro_precision:.4f}  "
                 f"macro R {self.macro_recall:.4f}  macro F1 {self.macro_f1:.4f}"]
        for name, t in zip(self.class_names, self.per_class):
            lines.append(f"  {name:<12} P {t.precision:.4f}  R {t.recall:.4f}  F1 {t.f1:.4f}")
        return "\n".join(lines)


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def report_from_scores(scores, labels, class_names):
    scores = np.asarray(scores, dtype=np.float64)
    K = len(class_names)
    if scores.shape[1] != K:
        raise ValueError(f"scores have {scores.shape[1]} classes, expected {K}")
    cm = confusion(labels, scores.argmax(axis=1), K)
    triples = precision_recall_f1(cm)
    mp, mr, mf = macro_metrics(triples)
    roc = [roc_auc(scores, labels, j) for j in range(K)]
    return MetricsReport(list(class_names), cm, accuracy(cm), triples, mp, mr, mf, roc)


def evaluate(model, dataset, batch_size=64):
    """Run ``model`` in inference mode over ``dataset`` and build a MetricsReport."""
    K = model.cfg.num_classes
    if len(dataset.class_names) != K:
        raise ValueError(f"class-count mismatch: checkpoint has {K} classes, data has {len(dataset.class_names)}")
    probs = model.predict_proba(dataset.images, batch_size)
    return report_from_scores(probs, dataset.labels, dataset.class_names)
