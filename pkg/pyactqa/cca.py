"""
Module for regularized, normalized canonical correlation analysis (nCCA): the joint image/text space.

Projections are scaled per dimension by correlation ** power and L2-normalized, so matching a view against another is
a dot product.
"""
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from pyactqa.exceptions import NumericalException, SerializerException, ShapeException, ValidationException
from pyactqa.loaders import load_checkpoint, save_checkpoint
from pyactqa.tensor import Tensor, argmax_axis, check_finite, freeze, matmul

logger = logging.getLogger("cca")

EIGEN_FLOOR = 1e-12
DEFAULT_POWER = 4.0
DEFAULT_DIM = 300
VIEWS = ("image", "text")


@dataclass(frozen=True)
class CcaModel:
    w_x: Tensor
    w_y: Tensor
    correlations: Tensor
    mean_x: Tensor
    mean_y: Tensor
    reg: float
    power: float = DEFAULT_POWER

    @property
    def dim(self) -> int:
        return self.correlations.shape[0]

    def view(self, view: str):
        if view == "image":
            return self.w_x, self.mean_x
        if view == "text":
            return self.w_y, self.mean_y
        raise ValidationException(f"Unknown view {view}, expected one of {VIEWS}", view)


def inverse_sqrt(matrix: np.ndarray, name: str, strict: bool) -> np.ndarray:
    """
    Symmetric inverse square root through an eigendecomposition, with eigenvalues floored at EIGEN_FLOOR

    :param strict: Raise instead of flooring when the matrix is (numerically) singular
    """
    values, vectors = np.linalg.eigh(matrix)
    if strict and values.min() <= EIGEN_FLOOR * max(1.0, values.max()):
        raise NumericalException(f"{name} covariance is rank-deficient; use a positive regularization", name)

    values = np.maximum(values, EIGEN_FLOOR)
    return (vectors / np.sqrt(values)) @ vectors.T


def fit_cca(x: np.ndarray, y: np.ndarray, reg: float, d_emb: int = DEFAULT_DIM,
            power: float = DEFAULT_POWER) -> CcaModel:
    """
    Fit paired projections maximizing correlation between two views

    :param x: n x d_x
    :param y: n x d_y
    :param reg: Added to the diagonal of both auto-covariances
    :param d_emb: Number of canonical pairs to keep
    :param power: Eigenvalue power used when projecting

    :return: model with columns ordered by descending canonical correlation
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ShapeException(f"Views must be paired n x d matrices, got {x.shape} and {y.shape}", (x.shape, y.shape))

    n = x.shape[0]
    if n < 2:
        raise ValidationException(f"CCA needs at least 2 pairs, got {n}", n)
    if not 1 <= d_emb <= min(x.shape[1], y.shape[1], n):
        raise ValidationException(f"d_emb={d_emb} must lie in [1, min(d_x, d_y, n)="
                                  f"{min(x.shape[1], y.shape[1], n)}]", d_emb)
    if reg < 0:
        raise ValidationException(f"Regularization must be >= 0, got {reg}", reg)

    mean_x, mean_y = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - mean_x, y - mean_y

    sxx = matmul(xc.T, xc) / (n - 1) + reg * np.eye(x.shape[1])
    syy = matmul(yc.T, yc) / (n - 1) + reg * np.eye(y.shape[1])
    sxy = matmul(xc.T, yc) / (n - 1)

    isqrt_x = inverse_sqrt(sxx, "image", strict=reg == 0)
    isqrt_y = inverse_sqrt(syy, "text", strict=reg == 0)

    try:
        u, s, vt = np.linalg.svd(isqrt_x @ sxy @ isqrt_y, full_matrices=False)
    except np.linalg.LinAlgError as error:
        raise NumericalException(f"SVD failed: {error}", (x.shape, y.shape)) from error

    correlations = np.clip(s[:d_emb], 0.0, 1.0)
    model = CcaModel(freeze(isqrt_x @ u[:, :d_emb]), freeze(isqrt_y @ vt[:d_emb].T), freeze(correlations),
                     freeze(mean_x), freeze(mean_y), float(reg), float(power))

    check_finite(model.w_x, "image projection")
    check_finite(model.w_y, "text projection")

    logger.info("Fitted CCA on %d pairs (reg=%g, d=%d), top correlation %.4f", n, reg, d_emb, correlations[0])
    return model


def project(model: CcaModel, v: np.ndarray, view: str) -> Tensor:
    """
    Map one vector (or a batch, one per row) of :param view: into the joint space. Zero results stay zero.
    """
    weights, mean = model.view(view)
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != mean.shape[0]:
        raise ShapeException(f"{view} vectors have {mean.shape[0]} dims, got {v.shape[-1]}", (v.shape, mean.shape))

    embedded = ((v - mean) @ weights) * model.correlations ** model.power
    norms = np.linalg.norm(embedded, axis=-1, keepdims=True)

    return freeze(np.divide(embedded, norms, out=np.zeros_like(embedded), where=norms > 0))


def rank_embedded(image_emb: np.ndarray, choice_embs: np.ndarray) -> int:
    """
    Index of the choice with the highest cosine similarity to the image; ties go to the lowest index
    """
    choice_embs = np.atleast_2d(np.asarray(choice_embs, dtype=np.float64))
    if choice_embs.shape[0] == 0:
        raise ValidationException("Need at least one choice", choice_embs.shape)

    norms = np.linalg.norm(choice_embs, axis=1) * np.linalg.norm(image_emb)
    cosine = np.divide(choice_embs @ image_emb, norms, out=np.zeros(choice_embs.shape[0]), where=norms > 0)

    return int(argmax_axis(cosine, 0))


def rank_choices(model: CcaModel, image_vec: np.ndarray, choice_vecs: Sequence[np.ndarray]) -> int:
    """
    Pick the choice whose text embedding lies closest (by cosine) to the image embedding
    """
    if len(choice_vecs) == 0:
        raise ValidationException("Need at least one choice", choice_vecs)

    return rank_embedded(project(model, image_vec, "image"), project(model, np.stack(choice_vecs), "text"))


def cca_entries(model: CcaModel) -> dict:
    return {"W_x": model.w_x, "W_y": model.w_y, "mean_x": model.mean_x, "mean_y": model.mean_y,
            "correlations": model.correlations, "reg": np.array([model.reg]), "power": np.array([model.power])}


def cca_from_entries(entries: dict) -> CcaModel:
    try:
        return CcaModel(freeze(entries["W_x"]), freeze(entries["W_y"]), freeze(entries["correlations"]),
                        freeze(entries["mean_x"]), freeze(entries["mean_y"]), float(entries["reg"][0]),
                        float(entries["power"][0]))
    except KeyError as error:
        raise SerializerException(f"CCA checkpoint is missing {error}", sorted(entries)) from error


def save_cca(model: CcaModel, path):
    save_checkpoint(path, cca_entries(model))


def load_cca(path) -> CcaModel:
    return cca_from_entries(load_checkpoint(path))
