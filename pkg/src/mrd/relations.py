"""Intra- and cross-modal relation matrices.

Three forms are supported:

* ``euclidean``: squared distances divided by their mean over counted pairs,
* ``similarity``: row-softmax of temperature-scaled dot products,
* ``partial-order``: 0-based rank of each column sample by distance to the row anchor.

All reductions are arranged so that permuting the samples permutes the output
bit-for-bit: dot products go through ``einsum`` (no BLAS blocking), softmax
denominators are summed over sorted rows and the distance mean uses ``math.fsum``.

The ``*_backward`` helpers return gradients with respect to the raw input rows and
are what the distillation losses chain through.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .embedding_space import EmbeddingBatch
from .errors import DimMismatch, InvalidBatch, NonPositiveTau

DEGENERATE_MU = 1e-12


class RelationForm(str, enum.Enum):
    EUCLIDEAN = "euclidean"
    SIMILARITY = "similarity"
    PARTIAL_ORDER = "partial-order"


@dataclass(frozen=True, eq=False)
class RelationMatrix:
    form: RelationForm
    values: np.ndarray
    intra: bool
    tau: float | None = None
    mu: float | None = None
    degenerate: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _rows(x) -> np.ndarray:
    if isinstance(x, EmbeddingBatch):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidBatch(f"expected a 2-D matrix, got shape {x.shape}")
    return x


def _operands(a, b):
    intra = b is None or b is a
    A = _rows(a)
    B = A if intra else _rows(b)
    if A.shape[1] != B.shape[1]:
        raise DimMismatch(f"feature dims differ: {A.shape[1]} vs {B.shape[1]}")
    return A, B, intra


def pairwise_dot(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.einsum("id,jd->ij", A, B)


def pairwise_sqdist(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    diff = A[:, None, :] - B[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def sorted_row_sum(x: np.ndarray) -> np.ndarray:
    """Row sums that do not depend on the column order of ``x``."""
    return np.ascontiguousarray(np.sort(x, axis=1)).sum(axis=1)


def _counted_mask(n1: int, n2: int, intra: bool) -> np.ndarray:
    mask = np.ones((n1, n2), dtype=bool)
    if intra:
        np.fill_diagonal(mask, False)
    return mask


# --- euclidean ---------------------------------------------------------------

def relation_euclidean(a, b=None) -> RelationMatrix:
    """Squared distances normalized by their mean over counted pairs.

    Self-pairs are left out of the mean when ``b`` is omitted (or is ``a``).
    A batch whose mean distance is below ``1e-12`` yields an all-zero matrix
    with ``degenerate=True``.
    """
    A, B, intra = _operands(a, b)
    dist = pairwise_sqdist(A, B)
    mask = _counted_mask(A.shape[0], B.shape[0], intra)
    count = int(mask.sum())
    if count == 0:
        raise InvalidBatch("euclidean relation needs at least one counted pair")
    mu = math.fsum(dist[mask].tolist()) / count
    if mu < DEGENERATE_MU:
        return RelationMatrix(RelationForm.EUCLIDEAN, np.zeros_like(dist), intra, mu=mu, degenerate=True)
    return RelationMatrix(RelationForm.EUCLIDEAN, dist / mu, intra, mu=mu)


def euclidean_backward(grad: np.ndarray, rel: RelationMatrix, a, b=None):
    """Gradient of ``sum(grad * rel.values)`` w.r.t. the rows of ``a`` and ``b``.

    For an intra relation the two gradients are already summed and returned as
    ``(da, None)``.
    """
    A, B, intra = _operands(a, b)
    if rel.degenerate:
        return np.zeros_like(A), (None if intra else np.zeros_like(B))
    mu = rel.mu
    mask = _counted_mask(A.shape[0], B.shape[0], intra)
    count = int(mask.sum())
    dist = rel.values * mu
    # d(dist/mu): direct term plus the dependence of mu on every counted distance
    inner = float(np.sum(grad * dist))
    H = grad / mu - mask * (inner / (mu * mu * count))
    if intra:
        Hs = H + H.T
        da = 2.0 * (Hs.sum(axis=1)[:, None] * A - Hs @ A)
        return da, None
    da = 2.0 * (H.sum(axis=1)[:, None] * A - H @ B)
    db = 2.0 * (H.sum(axis=0)[:, None] * B - H.T @ A)
    return da, db


# --- normalized similarity ---------------------------------------------------

def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / sorted_row_sum(e)[:, None]


def relation_similarity(a, b=None, tau: float = 0.07, mask_diagonal: bool = False) -> RelationMatrix:
    """Row-softmax of ``a_i . b_j / tau``.

    For an intra relation the self term stays in the softmax unless
    ``mask_diagonal`` is set.
    """
    if not tau > 0:
        raise NonPositiveTau(f"tau must be positive, got {tau}")
    A, B, intra = _operands(a, b)
    logits = pairwise_dot(A, B) / tau
    if intra and mask_diagonal:
        if A.shape[0] < 2:
            raise InvalidBatch("masked intra similarity needs at least two samples")
        np.fill_diagonal(logits, -np.inf)
    return RelationMatrix(RelationForm.SIMILARITY, _softmax_rows(logits), intra, tau=float(tau))


def similarity_backward(grad: np.ndarray, rel: RelationMatrix, a, b=None):
    """Gradient of ``sum(grad * rel.values)`` w.r.t. rows of ``a``, ``b`` and ``tau``.

    Returns ``(da, db, dtau)``; ``db`` is None for intra relations.
    """
    A, B, intra = _operands(a, b)
    S = rel.values
    tau = rel.tau
    dlogits = S * (grad - np.sum(grad * S, axis=1, keepdims=True))
    dots = pairwise_dot(A, B)
    dtau = -float(np.sum(dlogits * dots)) / (tau * tau)
    if intra:
        return (dlogits + dlogits.T) @ A / tau, None, dtau
    return dlogits @ B / tau, dlogits.T @ A / tau, dtau


# --- partial order -----------------------------------------------------------

def relation_partial_order(a, b=None) -> RelationMatrix:
    """Rank of every column sample by ascending distance to the row anchor.

    Ties go to the lower column index. Inputs need not be normalized.
    """
    A, B, intra = _operands(a, b)
    dist = pairwise_sqdist(A, B)
    order = np.argsort(dist, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(order.shape[0])[:, None]
    ranks[rows, order] = np.arange(order.shape[1])[None, :]
    return RelationMatrix(RelationForm.PARTIAL_ORDER, ranks.astype(np.float64), intra)


def relation(form, a, b=None, tau: float = 0.07, mask_diagonal: bool = False) -> RelationMatrix:
    form = RelationForm(form)
    if form is RelationForm.EUCLIDEAN:
        return relation_euclidean(a, b)
    if form is RelationForm.SIMILARITY:
        return relation_similarity(a, b, tau=tau, mask_diagonal=mask_diagonal)
    return relation_partial_order(a, b)
