"""Micro-averaged precision/recall/F1 for single-label classification."""

from __future__ import annotations

from typing import NamedTuple

from ..errors import DataError

INVALID_LABEL = "<invalid>"


class ClassificationScores(NamedTuple):
    precision: float
    recall: float
    f1_micro: float
    n_invalid: int


def normalize_label(text: str, label_set) -> str:
    """Exact label after trimming and case-folding, or ``INVALID_LABEL``."""
    folded = {lab.strip().casefold(): lab for lab in label_set}
    return folded.get(text.strip().casefold(), INVALID_LABEL)


def classification_metrics(predictions, references, label_set) -> ClassificationScores:
    """Pooled TP/FP/FN over samples.

    Each sample yields exactly one predicted label (unparseable output counts as
    a prediction of the reserved invalid label), so FP == FN and
    precision == recall == F1 == accuracy.
    """
    predictions, references = list(predictions), list(references)
    if not references or len(predictions) != len(references):
        raise DataError("need equally many (non-zero) predictions and references")
    labels = list(label_set)
    for ref in references:
        if normalize_label(ref, labels) == INVALID_LABEL:
            raise DataError(f"reference {ref!r} not in label set")
    tp = fp = fn = n_invalid = 0
    for pred, ref in zip(predictions, references):
        p = normalize_label(pred, labels)
        r = normalize_label(ref, labels)
        n_invalid += p == INVALID_LABEL
        if p == r:
            tp += 1
        else:
            fp += 1
            fn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return ClassificationScores(precision, recall, f1, n_invalid)
