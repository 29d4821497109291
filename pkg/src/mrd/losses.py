"""Alignment and relation-distillation objectives with hand-derived gradients.

Gradients are taken with respect to the raw point-embedding rows, the alignment
temperature and the dynamic-weight logits only. Image and text embeddings are
frozen teachers and never receive gradient.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .embedding_space import EmbeddingBatch
from .errors import BatchMismatch, FormMismatch, NonFiniteLogit, NonPositiveTau, ShapeMismatch
from .relations import (
    RelationForm,
    RelationMatrix,
    euclidean_backward,
    relation_euclidean,
    relation_partial_order,
    relation_similarity,
    similarity_backward,
)

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class WeightLogits:
    alpha_logits: tuple[float, float] = (0.0, 0.0)
    beta_logits: tuple[float, float] = (0.0, 0.0)
    gamma_logits: tuple[float, float] = (0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha_logits, self.beta_logits, self.gamma_logits], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "WeightLogits":
        arr = np.asarray(arr, dtype=np.float64).reshape(3, 2)
        return cls(*(tuple(float(x) for x in row) for row in arr))


@dataclass(frozen=True)
class LossParams:
    tau_align: float = 0.07
    tau_rel: float = 0.07
    lam: float = 3.0
    eta: float = 0.05
    form: RelationForm = RelationForm.SIMILARITY
    ir_enabled: bool = True
    cr_enabled: bool = True
    dd_enabled: bool = True
    mask_diagonal: bool = False
    share_tau: bool = False  # relation softmax reuses tau_align (and feeds its gradient)

    def __post_init__(self):
        object.__setattr__(self, "form", RelationForm(self.form))
        if not self.tau_align > 0 or not self.tau_rel > 0:
            raise NonPositiveTau("temperatures must be positive")
        if self.lam < 0 or self.eta < 0:
            raise ValueError("lambda and eta must be >= 0")

    @property
    def relation_tau(self) -> float:
        return self.tau_align if self.share_tau else self.tau_rel

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["form"] = self.form.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossParams":
        return cls(**d)


@dataclass
class LossReport:
    align: float
    intra: float
    cross_p2t: float
    cross_p2i: float
    total: float
    alpha: float
    beta: float
    gamma: float
    grad_norm_point_emb: float = 0.0


@dataclass
class LossGrads:
    point: np.ndarray
    tau_align: float
    logits: np.ndarray = field(default_factory=lambda: np.zeros((3, 2)))


def _matrix(x) -> np.ndarray:
    if isinstance(x, EmbeddingBatch):
        x = x.data
    return np.asarray(x, dtype=np.float64)


def _triplet(p, i, t):
    P, I, T = _matrix(p), _matrix(i), _matrix(t)
    if not (P.shape == I.shape == T.shape) or P.ndim != 2 or P.shape[0] < 1:
        raise BatchMismatch(f"batches must share shape N x D, got {P.shape}, {I.shape}, {T.shape}")
    return P, I, T


# --- alignment ---------------------------------------------------------------

def _info_nce(P: np.ndarray, X: np.ndarray, tau: float):
    """Symmetric InfoNCE over ``P X^T / tau``: value, dL/dP, dL/dtau."""
    n = P.shape[0]
    dots = P @ X.T
    logits = dots / tau
    row = logits - logits.max(axis=1, keepdims=True)
    row_lse = np.log(np.exp(row).sum(axis=1))
    col = logits - logits.max(axis=0, keepdims=True)
    col_lse = np.log(np.exp(col).sum(axis=0))
    diag = np.arange(n)
    ce_row = row_lse - row[diag, diag]
    ce_col = col_lse - col[diag, diag]
    value = 0.5 * (ce_row.mean() + ce_col.mean())

    soft_row = np.exp(row - row_lse[:, None])
    soft_col = np.exp(col - col_lse[None, :])
    eye = np.eye(n)
    g_logits = 0.5 * ((soft_row - eye) + (soft_col - eye)) / n
    dP = g_logits @ X / tau
    dtau = -float(np.sum(g_logits * dots)) / (tau * tau)
    return float(value), dP, dtau


def alignment_loss(p, i, t, tau_align: float):
    """Tri-modal contrastive loss ``(L_P2T + L_P2I) / 2``.

    Returns ``(value, grad_p, grad_tau)``.
    """
    if not tau_align > 0:
        raise NonPositiveTau(f"tau_align must be positive, got {tau_align}")
    P, I, T = _triplet(p, i, t)
    v_t, g_t, tau_t = _info_nce(P, T, tau_align)
    v_i, g_i, tau_i = _info_nce(P, I, tau_align)
    return 0.5 * (v_t + v_i), 0.5 * (g_t + g_i), 0.5 * (tau_t + tau_i)


# --- distillation losses -------------------------------------------------------

def _relation_values(x, form: RelationForm) -> np.ndarray:
    if isinstance(x, RelationMatrix):
        if x.form is not form:
            raise FormMismatch(f"expected a {form.value} relation, got {x.form.value}")
        return x.values
    return np.asarray(x, dtype=np.float64)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeMismatch(f"relation shapes differ: {a.shape} vs {b.shape}")


def distill_mse(student, teacher, with_grad: bool = False):
    """Mean squared difference between two euclidean relation matrices."""
    s = _relation_values(student, RelationForm.EUCLIDEAN)
    t = _relation_values(teacher, RelationForm.EUCLIDEAN)
    _same_shape(s, t)
    diff = s - t
    value = float(np.sum(diff * diff)) / diff.size
    if not with_grad:
        return value
    return value, 2.0 * diff / diff.size


def _jeffrey(s: np.ndarray, t: np.ndarray):
    ls = np.log(np.maximum(s, LOG_FLOOR))
    lt = np.log(np.maximum(t, LOG_FLOOR))
    n = s.shape[0]
    diff = s - t
    value = float(np.sum(diff * (ls - lt))) / n
    # d/ds log(max(s, floor)) vanishes below the floor
    inv_s = np.where(s > LOG_FLOOR, 1.0 / np.maximum(s, LOG_FLOOR), 0.0)
    inv_t = np.where(t > LOG_FLOOR, 1.0 / np.maximum(t, LOG_FLOOR), 0.0)
    gs = ((ls - lt) + diff * inv_s) / n
    gt = ((lt - ls) - diff * inv_t) / n
    return value, gs, gt


def distill_jeffrey(student, teacher, with_grad: bool = False):
    """Row-averaged symmetric KL divergence between two similarity relations."""
    s = _relation_values(student, RelationForm.SIMILARITY)
    t = _relation_values(teacher, RelationForm.SIMILARITY)
    _same_shape(s, t)
    value, gs, _ = _jeffrey(s, t)
    if not with_grad:
        return value
    return value, gs


def distill_rank_margin(student, teacher_ranks, eta: float = 0.05, with_grad: bool = False):
    """Hinge on student distances for every pair ordered by the teacher's ranks.

    For anchor ``a`` and columns ``j, k`` with ``rank(a, j) < rank(a, k)`` the
    term is ``max(0, s[a, j] - s[a, k] + eta)``; the result is the mean over all
    such pairs.
    """
    s = _relation_values(student, RelationForm.EUCLIDEAN)
    r = _relation_values(teacher_ranks, RelationForm.PARTIAL_ORDER)
    _same_shape(s, r)
    if eta < 0:
        raise ValueError("eta must be >= 0")
    n1, n2 = s.shape
    count = n1 * n2 * (n2 - 1) // 2
    if count == 0:
        return (0.0, np.zeros_like(s)) if with_grad else 0.0
    order = np.argsort(r, axis=1, kind="stable")
    s_sorted = np.take_along_axis(s, order, axis=1)
    upper = np.triu(np.ones((n2, n2), dtype=bool), k=1)
    margins = s_sorted[:, :, None] - s_sorted[:, None, :] + eta
    active = (margins > 0) & upper[None, :, :]
    value = float(np.sum(margins[active])) / count
    if not with_grad:
        return value
    g_sorted = (active.sum(axis=2) - active.sum(axis=1)) / count
    grad = np.empty_like(s)
    np.put_along_axis(grad, order, g_sorted, axis=1)
    return value, grad


def min_hinge_gap(student, teacher_ranks, eta: float) -> float:
    """Smallest ``|s[a, j] - s[a, k] + eta|`` over teacher-ordered pairs."""
    s = _relation_values(student, RelationForm.EUCLIDEAN)
    r = _relation_values(teacher_ranks, RelationForm.PARTIAL_ORDER)
    n2 = s.shape[1]
    if n2 < 2:
        return math.inf
    order = np.argsort(r, axis=1, kind="stable")
    s_sorted = np.take_along_axis(s, order, axis=1)
    upper = np.triu(np.ones((n2, n2), dtype=bool), k=1)
    margins = s_sorted[:, :, None] - s_sorted[:, None, :] + eta
    return float(np.min(np.abs(margins[:, upper])))


# --- dynamic weights -----------------------------------------------------------

def _pair_weight(pair) -> float:
    w = np.asarray(pair, dtype=np.float64)
    if w.shape != (2,) or not np.all(np.isfinite(w)):
        raise NonFiniteLogit(f"weight logits must be two finite numbers, got {pair}")
    e = np.exp(w - w.max())
    return float(e[0] / (e[0] + e[1]))


def dynamic_weights(logits: WeightLogits) -> tuple[float, float, float]:
    """First softmax component of each logit pair: ``(alpha, beta, gamma)``."""
    return (
        _pair_weight(logits.alpha_logits),
        _pair_weight(logits.beta_logits),
        _pair_weight(logits.gamma_logits),
    )


# --- relation objective --------------------------------------------------------

@dataclass
class RelationLosses:
    intra: float
    cross_p2t: float
    cross_p2i: float
    alpha: float
    beta: float
    gamma: float
    grad_point: np.ndarray
    grad_logits: np.ndarray
    grad_tau: float = 0.0


class _Student:
    """A relation that involves the point embeddings, plus its backward pass."""

    def __init__(self, form: RelationForm, P, other, tau: float, mask_diagonal: bool = False):
        self.form, self.P, self.other = form, P, other
        if form is RelationForm.SIMILARITY:
            self.rel = relation_similarity(P, other, tau=tau, mask_diagonal=mask_diagonal and other is None)
        else:
            self.rel = relation_euclidean(P, other)

    def backward(self, grad: np.ndarray):
        """Returns ``(dP, dtau)``."""
        if self.form is RelationForm.SIMILARITY:
            dP, _, dtau = similarity_backward(grad, self.rel, self.P, self.other)
            return dP, dtau
        dP, _ = euclidean_backward(grad, self.rel, self.P, self.other)
        return dP, 0.0


def mrd_relation_losses(p, i, t, logits: WeightLogits, params: LossParams) -> RelationLosses:
    """Weighted intra- and cross-modal relation distillation terms and their gradients."""
    P, I, T = _triplet(p, i, t)
    form = params.form
    tau = params.relation_tau
    grad_point = np.zeros_like(P)
    grad_logits = np.zeros((3, 2))
    grad_tau = 0.0

    if params.dd_enabled:
        alpha, beta, gamma = dynamic_weights(logits)
    else:
        alpha = beta = gamma = 0.5

    if form is RelationForm.SIMILARITY:
        def teacher(a, b=None):
            return relation_similarity(a, b, tau=tau, mask_diagonal=params.mask_diagonal and b is None)

        def divergence(s_rel, t_rel):
            return _jeffrey(s_rel.values, t_rel.values)
    elif form is RelationForm.EUCLIDEAN:
        def teacher(a, b=None):
            return relation_euclidean(a, b)

        def divergence(s_rel, t_rel):
            v, g = distill_mse(s_rel, t_rel, with_grad=True)
            return v, g, None
    else:
        def teacher(a, b=None):
            return relation_partial_order(a, b)

        def divergence(s_rel, t_rel):
            v, g = distill_rank_margin(s_rel, t_rel, params.eta, with_grad=True)
            return v, g, None

    def student(other):
        return _Student(form, P, other, tau, params.mask_diagonal)

    share = params.share_tau and form is RelationForm.SIMILARITY

    def mixed(stu: _Student, teachers, weight: float, row: int):
        """``weight * L(stu, t1) + (1 - weight) * L(stu, t2)`` with all gradients."""
        nonlocal grad_point, grad_tau
        (t1, t1_args), (t2, t2_args) = teachers
        v1, g1, gt1 = divergence(stu.rel, t1)
        v2, g2, gt2 = divergence(stu.rel, t2)
        value = weight * v1 + (1.0 - weight) * v2
        dP, dtau = stu.backward(weight * g1 + (1.0 - weight) * g2)
        grad_point += dP
        if share:
            grad_tau += dtau
            for t_rel, args, gt, w in ((t1, t1_args, gt1, weight), (t2, t2_args, gt2, 1.0 - weight)):
                _, _, tdtau = similarity_backward(w * gt, t_rel, *args)
                grad_tau += tdtau
        if params.dd_enabled:
            dw = (v1 - v2) * weight * (1.0 - weight)
            grad_logits[row] += (dw, -dw)
        return value

    intra = cross_p2t = cross_p2i = 0.0
    if params.ir_enabled:
        intra = mixed(student(None), ((teacher(I), (I, None)), (teacher(T), (T, None))), alpha, 0)
    if params.cr_enabled:
        phi_it = teacher(I, T)
        phi_ti = teacher(T, I)
        cross_teachers = ((phi_it, (I, T)), (phi_ti, (T, I)))
        cross_p2t = mixed(student(T), cross_teachers, beta, 1)
        cross_p2i = mixed(student(I), cross_teachers, gamma, 2)

    return RelationLosses(
        intra=intra,
        cross_p2t=cross_p2t,
        cross_p2i=cross_p2i,
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        grad_point=grad_point,
        grad_logits=grad_logits,
        grad_tau=grad_tau,
    )


def total_loss(p, i, t, logits: WeightLogits, params: LossParams) -> tuple[LossReport, LossGrads]:
    """Alignment plus ``lam`` times the relation terms.

    With ``lam == 0`` or both relation toggles off the relation terms are not
    evaluated, are reported as 0, and the logits get no gradient.
    """
    align, g_align, dtau_align = alignment_loss(p, i, t, params.tau_align)
    relations_on = params.lam != 0 and (params.ir_enabled or params.cr_enabled)
    if params.dd_enabled:
        alpha, beta, gamma = dynamic_weights(logits)
    else:
        alpha = beta = gamma = 0.5

    if relations_on:
        rel = mrd_relation_losses(p, i, t, logits, params)
        relation_sum = rel.intra + rel.cross_p2t + rel.cross_p2i
        total = align + params.lam * relation_sum
        grad_point = g_align + params.lam * rel.grad_point
        grad_logits = params.lam * rel.grad_logits
        grad_tau = dtau_align + params.lam * rel.grad_tau
        intra, cross_p2t, cross_p2i = rel.intra, rel.cross_p2t, rel.cross_p2i
    else:
        total = align
        grad_point = g_align
        grad_logits = np.zeros((3, 2))
        grad_tau = dtau_align
        intra = cross_p2t = cross_p2i = 0.0

    report = LossReport(
        align=align,
        intra=intra,
        cross_p2t=cross_p2t,
        cross_p2i=cross_p2i,
        total=total,
        alpha=alpha,
        beta=beta,
        gamma=gamma,
        grad_norm_point_emb=float(np.linalg.norm(grad_point)),
    )
    return report, LossGrads(point=grad_point, tau_align=grad_tau, logits=grad_logits)
