"""Zero-shot classification, cross-modal retrieval and similarity-matrix MAE."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding_space import EmbeddingBatch
from .errors import BatchMismatch, KTooLarge, MRDIOError, NonFiniteMetric, ShapeMismatch
from .relations import relation_similarity


@dataclass(frozen=True)
class TopKAccuracy:
    ks: tuple[int, ...]
    values: tuple[float, ...]

    def __getitem__(self, k: int) -> float:
        return self.values[self.ks.index(k)]

    def to_dict(self) -> dict:
        return {f"top{k}": v for k, v in zip(self.ks, self.values)}


@dataclass(frozen=True)
class MaeTable:
    p2p_i2i: float
    p2p_t2t: float
    p2t_i2t: float
    p2i_t2i: float

    def to_dict(self) -> dict:
        return {
            "p2p_i2i": self.p2p_i2i,
            "p2p_t2t": self.p2p_t2t,
            "p2t_i2t": self.p2t_i2t,
            "p2i_t2i": self.p2i_t2i,
        }


def _matrix(x) -> np.ndarray:
    if isinstance(x, EmbeddingBatch):
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D matrix, got {x.shape}")
    return x


def _check_ks(ks, limit: int) -> tuple[int, ...]:
    ks = tuple(int(k) for k in ks)
    if not ks or any(k < 1 for k in ks) or list(ks) != sorted(ks):
        raise ValueError(f"ks must be positive and ascending, got {ks}")
    if ks[-1] > limit:
        raise KTooLarge(f"k={ks[-1]} exceeds the {limit} available candidates")
    return ks


def rank_descending(scores: np.ndarray) -> np.ndarray:
    """Per-row candidate order by descending score, ties to the lower index."""
    return np.argsort(-scores, axis=1, kind="stable")


def zero_shot_classify(point_emb, class_text_emb, labels, ks=(1, 3, 5)) -> TopKAccuracy:
    """Top-k accuracy of nearest-prototype classification by cosine similarity."""
    P = _matrix(point_emb)
    C = _matrix(class_text_emb)
    labels = np.asarray(labels, dtype=np.int64)
    if P.shape[1] != C.shape[1] or labels.shape != (P.shape[0],):
        raise ShapeMismatch("point embeddings, prototypes and labels disagree in shape")
    ks = _check_ks(ks, C.shape[0])
    order = rank_descending(P @ C.T)
    hits_at = np.argmax(order == labels[:, None], axis=1)  # position of the true class
    values = tuple(float(np.mean(hits_at < k)) for k in ks)
    return TopKAccuracy(ks, values)


def retrieval_eval(query_emb, gallery_emb, labels, ks=(1, 5, 10)) -> tuple[TopKAccuracy, TopKAccuracy]:
    """Instance- and category-level top-k retrieval over an index-aligned gallery.

    The matching gallery item is the target, so it is not excluded.
    """
    Q = _matrix(query_emb)
    G = _matrix(gallery_emb)
    labels = np.asarray(labels, dtype=np.int64)
    if Q.shape != G.shape or labels.shape != (Q.shape[0],):
        raise ShapeMismatch("query, gallery and labels must be index-aligned")
    ks = _check_ks(ks, G.shape[0])
    n = Q.shape[0]
    order = rank_descending(Q @ G.T)
    instance_pos = np.argmax(order == np.arange(n)[:, None], axis=1)
    same_label = labels[order] == labels[:, None]
    category_pos = np.argmax(same_label, axis=1)  # the target itself guarantees a match
    instance = TopKAccuracy(ks, tuple(float(np.mean(instance_pos < k)) for k in ks))
    category = TopKAccuracy(ks, tuple(float(np.mean(category_pos < k)) for k in ks))
    return instance, category


def similarity_mae(p, i, t, normalized: bool = False, tau: float = 0.07) -> MaeTable:
    """Mean absolute differences between student and teacher similarity matrices.

    Raw cosine matrices are compared by default; ``normalized`` switches to
    row-softmax matrices at temperature ``tau``. All N^2 entries are included.
    """
    P, I, T = _matrix(p), _matrix(i), _matrix(t)
    if not (P.shape == I.shape == T.shape):
        raise BatchMismatch(f"batches differ in shape: {P.shape}, {I.shape}, {T.shape}")

    if normalized:
        def sim(a, b):
            return relation_similarity(a, b, tau=tau).values
    else:
        def sim(a, b):
            return a @ b.T

    def mae(x, y):
        return float(np.mean(np.abs(x - y)))

    i2t = sim(I, T)
    t2i = sim(T, I)
    return MaeTable(
        p2p_i2i=mae(sim(P, P), sim(I, I)),
        p2p_t2t=mae(sim(P, P), sim(T, T)),
        p2t_i2t=mae(sim(P, T), i2t),
        p2i_t2i=mae(sim(P, I), t2i),
    )


def _check_finite(obj, where="report"):
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{where}.{k}")
    elif isinstance(obj, (list, tuple)):
        for n, v in enumerate(obj):
            _check_finite(v, f"{where}[{n}]")
    elif isinstance(obj, float) and not math.isfinite(obj):
        raise NonFiniteMetric(f"{where} is {obj}")


def export_report(results: dict, path) -> None:
    """Write a JSON evaluation report, refusing NaN or infinite metrics."""
    _check_finite(results)
    text = json.dumps(results, indent=2, sort_keys=True, allow_nan=False) + "\n"
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise MRDIOError(f"cannot write report to {path}: {exc}") from exc


def load_report(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise MRDIOError(f"cannot read report {path}: {exc}") from exc


def build_report(config: dict, point_emb, dataset, ks=(1, 3, 5), retrieval_ks=(1, 3, 5),
                 weights=None) -> dict:
    """Assemble the full report for embeddings of ``dataset``'s clouds."""
    P = _matrix(point_emb)
    I = dataset.image_emb.as_float64()
    T = dataset.text_emb.as_float64()
    zs = zero_shot_classify(P, dataset.class_text_emb.as_float64(), dataset.labels, ks)
    instance, category = retrieval_eval(P, T, dataset.labels, retrieval_ks)
    report = {
        "config": config,
        "zero_shot": zs.to_dict(),
        "retrieval": {"instance": instance.to_dict(), "category": category.to_dict()},
        "mae": similarity_mae(P, I, T).to_dict(),
    }
    if weights is not None:
        alpha, beta, gamma = weights
        report["weights_final"] = {"alpha": alpha, "beta": beta, "gamma": gamma}
    return report
