"""Central finite-difference checks for every hand-derived loss gradient."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .embedding_space import normalize_rows
from .losses import (
    LossParams,
    WeightLogits,
    alignment_loss,
    distill_jeffrey,
    distill_mse,
    distill_rank_margin,
    min_hinge_gap,
    total_loss,
)
from .relations import (
    RelationForm,
    euclidean_backward,
    relation_euclidean,
    relation_partial_order,
    relation_similarity,
    similarity_backward,
)

LOSS_KINDS = ("alignment", "mse", "jeffrey", "rank_margin", "total")

# hinge arguments must sit this many steps away from their kink
HINGE_SAFETY = 50.0


@dataclass(frozen=True)
class GradCheckInputs:
    p: np.ndarray
    i: np.ndarray
    t: np.ndarray
    logits: WeightLogits
    params: LossParams


@dataclass
class GradCheckResult:
    kind: str
    max_rel_error: float
    per_param: dict

    def passed(self, threshold: float = 1e-4) -> bool:
        return self.max_rel_error < threshold


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        f_plus = f(x)
        flat[k] = orig - step
        f_minus = f(x)
        flat[k] = orig
        g[k] = (f_plus - f_minus) / (2.0 * step)
    return grad


def random_inputs(n: int, d: int, seed: int = 0, form="similarity", **param_kw) -> GradCheckInputs:
    """Seeded unit-norm triplet batches with random (non-zero) weight logits."""
    rng = np.random.default_rng(seed)
    p = normalize_rows(rng.standard_normal((n, d)))
    i = normalize_rows(rng.standard_normal((n, d)))
    t = normalize_rows(rng.standard_normal((n, d)))
    logits = WeightLogits.from_array(rng.normal(scale=0.5, size=(3, 2)))
    kw = {"tau_align": 0.1, "tau_rel": 0.5, "lam": 3.0, "eta": 0.05, "form": form}
    kw.update(param_kw)
    return GradCheckInputs(p, i, t, logits, LossParams(**kw))


def hinge_safe(inputs: GradCheckInputs, step: float) -> bool:
    """True when no rank-margin hinge lies within reach of a finite-difference step."""
    P, I, T = inputs.p, inputs.i, inputs.t
    eta = inputs.params.eta
    pairs = [
        (relation_euclidean(P), relation_partial_order(I)),
        (relation_euclidean(P), relation_partial_order(T)),
    ]
    for other in (T, I):
        stu = relation_euclidean(P, other)
        pairs.append((stu, relation_partial_order(I, T)))
        pairs.append((stu, relation_partial_order(T, I)))
    return all(min_hinge_gap(s, r, eta) > HINGE_SAFETY * step for s, r in pairs)


def hinge_safe_inputs(n: int, d: int, seed: int = 0, step: float = 1e-5, **param_kw) -> GradCheckInputs:
    """Like :func:`random_inputs` with the partial-order form, resampled until hinge-safe."""
    for attempt in range(1000):
        inputs = random_inputs(n, d, seed=seed * 1000 + attempt, form="partial-order", **param_kw)
        if hinge_safe(inputs, step):
            return inputs
    raise RuntimeError("no hinge-safe point found")


def _analytic_and_functions(kind: str, inputs: GradCheckInputs):
    """Returns ``{name: (analytic_grad, value_fn, x0)}`` for one loss kind."""
    P, I, T = inputs.p, inputs.i, inputs.t
    params = inputs.params
    out = {}
    if kind == "alignment":
        _, gp, gtau = alignment_loss(P, I, T, params.tau_align)
        out["p"] = (gp, lambda x: alignment_loss(x, I, T, params.tau_align)[0], P)
        out["tau_align"] = (
            np.array([gtau]),
            lambda x: alignment_loss(P, I, T, float(x[0]))[0],
            np.array([params.tau_align]),
        )
    elif kind == "mse":
        teacher = relation_euclidean(I)

        def f(x):
            return distill_mse(relation_euclidean(x), teacher)

        stu = relation_euclidean(P)
        _, g = distill_mse(stu, teacher, with_grad=True)
        out["p"] = (euclidean_backward(g, stu, P)[0], f, P)
    elif kind == "jeffrey":
        tau = params.tau_rel
        teacher = relation_similarity(I, tau=tau)

        def f(x):
            return distill_jeffrey(relation_similarity(x, tau=tau), teacher)

        stu = relation_similarity(P, tau=tau)
        _, g = distill_jeffrey(stu, teacher, with_grad=True)
        out["p"] = (similarity_backward(g, stu, P)[0], f, P)
    elif kind == "rank_margin":
        teacher = relation_partial_order(I)

        def f(x):
            return distill_rank_margin(relation_euclidean(x), teacher, params.eta)

        stu = relation_euclidean(P)
        _, g = distill_rank_margin(stu, teacher, params.eta, with_grad=True)
        out["p"] = (euclidean_backward(g, stu, P)[0], f, P)
    elif kind == "total":
        logits = inputs.logits
        _, grads = total_loss(P, I, T, logits, params)
        out["p"] = (grads.point, lambda x: total_loss(x, I, T, logits, params)[0].total, P)
        out["tau_align"] = (
            np.array([grads.tau_align]),
            lambda x: total_loss(P, I, T, logits, dataclasses.replace(params, tau_align=float(x[0])))[0].total,
            np.array([params.tau_align]),
        )
        if params.dd_enabled:
            out["logits"] = (
                grads.logits,
                lambda x: total_loss(P, I, T, WeightLogits.from_array(x), params)[0].total,
                logits.as_array(),
            )
    else:
        raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")
    return out


def grad_check(kind: str, inputs: GradCheckInputs, step: float = 1e-5,
               corrupt: Callable[[str, np.ndarray], np.ndarray] | None = None) -> GradCheckResult:
    """Compare analytic gradients against central differences.

    ``corrupt(name, grad)`` may rewrite an analytic gradient before comparison;
    it exists so the detector itself can be tested.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    per_param = {}
    for name, (analytic, fn, x0) in _analytic_and_functions(kind, inputs).items():
        analytic = np.array(analytic, dtype=np.float64)
        if corrupt is not None:
            analytic = corrupt(name, analytic)
        numeric = numeric_gradient(fn, x0, step)
        per_param[name] = float(np.max(relative_error(analytic, numeric)))
    return GradCheckResult(kind, max(per_param.values()), per_param)


def grad_suite(form, n: int = 6, d: int = 12, seed: int = 0, step: float = 1e-5) -> list[GradCheckResult]:
    """Every loss kind that applies to ``form``, on seeded inputs."""
    form = RelationForm(form)
    if form is RelationForm.PARTIAL_ORDER:
        inputs = hinge_safe_inputs(n, d, seed=seed, step=step)
        kinds = ("alignment", "rank_margin", "total")
    else:
        inputs = random_inputs(n, d, seed=seed, form=form)
        kinds = ("alignment", "mse", "total") if form is RelationForm.EUCLIDEAN else ("alignment", "jeffrey", "total")
    return [grad_check(k, inputs, step) for k in kinds]
