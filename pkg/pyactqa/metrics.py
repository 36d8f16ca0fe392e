"""
Module for ranking metrics: average precision, mAP and multiple-choice accuracy.

AP is the step-wise area under the precision-recall curve, sum over ranks k of (R_k - R_{k-1}) * P_k, with no
interpolation. Tied scores keep their original order.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from pyactqa.exceptions import ShapeException, ValidationException

logger = logging.getLogger("metrics")


def average_precision(scores: Sequence[float], labels: Sequence[int]) -> Optional[float]:
    """
    :param scores: One score per item, higher ranks first
    :param labels: 0/1 relevance per item

    :return: AP in [0, 1], or None when there is no positive
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ShapeException(f"scores {scores.shape} and labels {labels.shape} must be matching vectors",
                             (scores.shape, labels.shape))

    positives = int(np.count_nonzero(labels))
    if positives == 0:
        return None

    ranked = labels[np.argsort(-scores, kind="stable")] != 0
    hits = np.cumsum(ranked)
    ranks = np.flatnonzero(ranked) + 1

    # each positive adds 1/positives of recall at precision hits/rank
    return math.fsum(int(hits[rank - 1]) / int(rank) for rank in ranks) / positives


@dataclass
class EvalReport:
    class_names: List[str]
    ap: List[Optional[float]]
    positives: List[int]
    mean_ap: float
    skipped: int = 0
    num_images: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2), encoding="utf-8")


def mean_ap(scores: np.ndarray, labels: np.ndarray, class_names: Sequence[str] = None) -> EvalReport:
    """
    Mean of the defined per-class APs, times 100

    :param scores: N x C scores (raw, no threshold)
    :param labels: N x C 0/1 labels

    :raises ValidationException: if no class has a positive
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise ShapeException(f"scores {scores.shape} and labels {labels.shape} must be matching N x C",
                             (scores.shape, labels.shape))

    class_names = list(class_names) if class_names is not None else [str(c) for c in range(scores.shape[1])]
    aps = [average_precision(scores[:, c], labels[:, c]) for c in range(scores.shape[1])]
    defined = [ap for ap in aps if ap is not None]
    skipped = len(aps) - len(defined)

    if not defined:
        raise ValidationException("No class has a positive example; mAP is undefined", class_names)
    if skipped:
        logger.warning("%d class(es) without positives excluded from mAP", skipped)

    return EvalReport(class_names, aps, np.count_nonzero(labels, axis=0).tolist(),
                      100.0 * math.fsum(defined) / len(defined), skipped, scores.shape[0])


def choice_accuracy(answers: Sequence[Tuple[int, int]]) -> float:
    """
    :param answers: (predicted index, correct index) pairs

    :return: percentage correct
    """
    if not answers:
        raise ValidationException("Accuracy of an empty answer list is undefined", answers)

    return 100.0 * sum(1 for predicted, correct in answers if predicted == correct) / len(answers)
