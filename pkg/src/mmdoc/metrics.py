"""Evaluation metrics: token accuracy and exact-match entity F1.

An entity is a maximal run of identical non-"other" labels; a predicted
entity counts only on exact span-and-class match. With no predicted
entities precision is reported as 0 (not undefined), and F1 is 0 whenever
precision + recall is 0.
"""

from __future__ import annotations

import numpy as np


def entity_spans(labels, other: int = 0):
    """Maximal runs of identical labels > other-threshold; labels < 0 and
    the `other` class break runs. Returns (start, end_exclusive, label)."""
    spans = []
    start = None
    current = None
    for i, lab in enumerate(list(labels) + [other]):
        if lab == current and start is not None:
            continue
        if start is not None:
            spans.append((start, i, current))
            start, current = None, None
        if lab != other and lab >= 0:
            start, current = i, lab
    return spans


def filter_spans(spans, classes):
    if classes is None:
        return list(spans)
    keep = set(classes)
    return [s for s in spans if s[2] in keep]


def sequence_labeling_metrics(gold_seqs, pred_seqs, classes=None, other: int = 0) -> dict:
    """Micro precision/recall/F1 over exact entity matches, plus token
    accuracy on labeled positions. classes, when given, restricts the
    entity metrics to those label ids."""
    matched = n_pred = n_gold = 0
    correct_tokens = total_tokens = 0
    for gold, pred in zip(gold_seqs, pred_seqs):
        gold = np.asarray(gold)
        pred = np.asarray(pred)
        labeled = gold >= 0
        correct_tokens += int((gold[labeled] == pred[labeled]).sum())
        total_tokens += int(labeled.sum())
        g = set(filter_spans(entity_spans(gold, other), classes))
        p = set(filter_spans(entity_spans(np.where(labeled, pred, -1), other), classes))
        matched += len(g & p)
        n_gold += len(g)
        n_pred += len(p)
    precision = matched / n_pred if n_pred else 0.0
    recall = matched / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    token_accuracy = correct_tokens / total_tokens if total_tokens else 0.0
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "accuracy": token_accuracy,
        "token_accuracy": token_accuracy,
        "n_docs": len(list(gold_seqs)),
        "matched": matched,
        "n_pred": n_pred,
        "n_gold": n_gold,
    }


def classification_accuracy(gold, pred) -> dict:
    """Accuracy plus macro-averaged precision/recall/F1 over the classes
    present in the gold labels."""
    gold = np.asarray(gold)
    pred = np.asarray(pred)
    precs, recs, f1s = [], [], []
    for c in np.unique(gold):
        tp = int(((pred == c) & (gold == c)).sum())
        p = tp / int((pred == c).sum()) if (pred == c).any() else 0.0
        r = tp / int((gold == c).sum())
        precs.append(p)
        recs.append(r)
        f1s.append(2 * p * r / (p + r) if p + r else 0.0)
    return {
        "accuracy": float((gold == pred).mean()) if gold.size else 0.0,
        "precision": float(np.mean(precs)) if precs else 0.0,
        "recall": float(np.mean(recs)) if recs else 0.0,
        "f1": float(np.mean(f1s)) if f1s else 0.0,
        "n_docs": int(gold.size),
    }
