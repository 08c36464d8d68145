"""Classification metrics: ACC, PRE, SPE, F1, REC.

Class 1 is the positive class for binary problems; with more classes the
per-class one-vs-rest scores are macro-averaged. Undefined ratios (0/0) are
reported as 0.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError


def _ratio(num, den):
    return float(num) / float(den) if den else 0.0


def _binary(pred, labels, positive):
    p = pred == positive
    t = labels == positive
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    tn = int(np.sum(~p & ~t))
    pre = _ratio(tp, tp + fp)
    rec = _ratio(tp, tp + fn)
    spe = _ratio(tn, tn + fp)
    f1 = _ratio(2 * pre * rec, pre + rec)
    return pre, spe, f1, rec


def compute_metrics(predictions, labels, num_classes=None):
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.shape != lab.shape:
        raise ContractError(f"{pred.size} predictions for {lab.size} labels")
    if pred.size == 0:
        raise ContractError("no predictions to score")
    m = num_classes or int(max(pred.max(), lab.max(), 1)) + 1
    acc = float(np.mean(pred == lab))
    if m <= 2:
        pre, spe, f1, rec = _binary(pred, lab, 1)
    else:
        pre, spe, f1, rec = np.mean([_binary(pred, lab, c) for c in range(m)], axis=0)
    return {"acc": acc, "pre": float(pre), "spe": float(spe), "f1": float(f1), "rec": float(rec)}
