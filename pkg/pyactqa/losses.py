"""
Module for multiple-instance score aggregation and the training losses.

An image is a bag of person instances. Its score for a class is the best score any person gets for it, and the
gradient of the image loss flows back to that person only.
"""
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from pyactqa.exceptions import ConfigurationException, ShapeException, ValidationException
from pyactqa.layers import Roi, stable_sigmoid
from pyactqa.tensor import Tensor, argmax_axis

PROB_EPS = 1e-12


@dataclass
class InstanceScores:
    """
    Pre-sigmoid logits, one row per person instance
    """
    scores: Tensor
    boxes: List[Roi]

    @property
    def num_instances(self) -> int:
        return self.scores.shape[0]


@dataclass(frozen=True)
class LossWeights:
    """
    Multipliers on the positive and negative terms of the binary cross-entropy, scalars or per-class vectors
    """
    w_p: object = 10.0
    w_n: object = 1.0

    def __post_init__(self):
        if np.any(np.asarray(self.w_p, dtype=np.float64) <= 0) or np.any(np.asarray(self.w_n, dtype=np.float64) <= 0):
            raise ConfigurationException(f"Loss weights must be positive, got w_p={self.w_p} w_n={self.w_n}", self)

    def resolve(self, num_classes: int) -> Tuple[np.ndarray, np.ndarray]:
        """
        :return: (w_p, w_n) broadcast to :param num_classes: entries
        """
        try:
            w_p = np.broadcast_to(np.asarray(self.w_p, dtype=np.float64), (num_classes,))
            w_n = np.broadcast_to(np.asarray(self.w_n, dtype=np.float64), (num_classes,))
        except ValueError as error:
            raise ConfigurationException(f"Loss weights do not cover {num_classes} classes", self) from error

        return w_p, w_n


PLAIN_WEIGHTS = LossWeights(1.0, 1.0)


def mil_max_aggregate(inst: InstanceScores) -> Tuple[Tensor, np.ndarray]:
    """
    Image score per class = max over instances

    :param inst: N x C instance logits, N >= 1

    :return: (image scores C, winning instance per class)
    """
    if inst.scores.ndim != 2 or inst.scores.shape[0] == 0:
        raise ShapeException(f"MIL aggregation needs at least one instance, got scores {inst.scores.shape}",
                             inst.scores.shape)

    winners = argmax_axis(inst.scores, 0)

    return inst.scores[winners, np.arange(inst.scores.shape[1])], winners


def mil_max_backward(grad: Tensor, winners: np.ndarray, num_instances: int) -> Tensor:
    """
    Route each class gradient to the instance that won that class

    :return: N x C gradient over instance logits, zero everywhere except the winners
    """
    d_scores = np.zeros((num_instances, grad.shape[0]))
    d_scores[winners, np.arange(grad.shape[0])] = grad

    return d_scores


def _check_binary(labels: np.ndarray, size: int):
    if labels.shape != (size,):
        raise ShapeException(f"labels {labels.shape} do not match {size} predictions", (labels.shape, size))
    if not np.all((labels == 0) | (labels == 1)):
        raise ValidationException(f"labels must be 0 or 1, got {labels}", labels)


def weighted_bce(image_probs: Tensor, labels: Sequence[float], w: LossWeights = PLAIN_WEIGHTS) -> Tuple[float, Tensor]:
    """
    Weighted binary cross-entropy on probabilities:
    loss = -sum_i w_p[i] y[i] log(p[i]) + w_n[i] (1 - y[i]) log(1 - p[i])

    :return: (loss, gradient w.r.t. the probabilities)
    """
    labels = np.asarray(labels, dtype=np.float64)
    _check_binary(labels, image_probs.shape[0])
    w_p, w_n = w.resolve(labels.shape[0])

    probs = np.clip(image_probs, PROB_EPS, 1.0 - PROB_EPS)
    loss = -np.sum(w_p * labels * np.log(probs) + w_n * (1.0 - labels) * np.log1p(-probs))
    grad = -w_p * labels / probs + w_n * (1.0 - labels) / (1.0 - probs)

    return float(loss), grad


def weighted_bce_with_logits(logits: Tensor, labels: Sequence[float],
                             w: LossWeights = PLAIN_WEIGHTS) -> Tuple[float, Tensor]:
    """
    weighted_bce(sigmoid(logits)) evaluated in logit space, where log(sigmoid(z)) = -softplus(-z)

    :return: (loss, gradient w.r.t. the logits)
    """
    labels = np.asarray(labels, dtype=np.float64)
    _check_binary(labels, logits.shape[0])
    w_p, w_n = w.resolve(labels.shape[0])

    loss = np.sum(w_p * labels * np.logaddexp(0.0, -logits) + w_n * (1.0 - labels) * np.logaddexp(0.0, logits))
    probs = stable_sigmoid(logits)
    grad = w_p * labels * (probs - 1.0) + w_n * (1.0 - labels) * probs

    return float(loss), grad


def softmax_ce(logits: Tensor, label: int) -> Tuple[float, Tensor]:
    """
    Single-label softmax cross-entropy

    :return: (-log softmax(logits)[label], softmax - one_hot)
    """
    if logits.ndim != 1 or logits.shape[0] < 2:
        raise ShapeException(f"softmax_ce needs at least 2 classes, got {logits.shape}", logits.shape)
    if not 0 <= int(label) < logits.shape[0]:
        raise ValidationException(f"label {label} out of range for {logits.shape[0]} classes", label)

    shifted = logits - np.max(logits)
    log_norm = np.log(np.sum(np.exp(shifted)))
    probs = np.exp(shifted - log_norm)

    grad = probs.copy()
    grad[int(label)] -= 1.0

    return float(log_norm - shifted[int(label)]), grad


def single_label(labels: Sequence[float], owner=None) -> int:
    """
    The index of the only positive entry of a label vector, for softmax supervision
    """
    labels = np.asarray(labels)
    positives = np.flatnonzero(labels == 1)
    if positives.size != 1:
        raise ValidationException(f"softmax supervision needs exactly one positive label, got {positives.size}",
                                  owner)

    return int(positives[0])
