import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mrd.embedding_space import normalize_rows
from mrd.errors import BatchMismatch, FormMismatch, NonFiniteLogit, ShapeMismatch
from mrd.gradcheck import grad_check, grad_suite, hinge_safe_inputs, random_inputs
from mrd.losses import (
    LossParams,
    WeightLogits,
    alignment_loss,
    distill_jeffrey,
    distill_mse,
    distill_rank_margin,
    dynamic_weights,
    mrd_relation_losses,
    total_loss,
)
from mrd.relations import (
    RelationForm,
    RelationMatrix,
    relation_euclidean,
    relation_partial_order,
    relation_similarity,
)


def unit_rows(rng, n, d):
    return normalize_rows(rng.standard_normal((n, d)))


def triplet(seed, n, d):
    rng = np.random.default_rng(seed)
    return unit_rows(rng, n, d), unit_rows(rng, n, d), unit_rows(rng, n, d)


def kl_oracle(a, b):
    return sum(x * math.log(x / y) for x, y in zip(a, b))


def jeffrey_oracle(s, t):
    rows = [kl_oracle(sr, tr) + kl_oracle(tr, sr) for sr, tr in zip(s.tolist(), t.tolist())]
    return math.fsum(rows) / len(rows)


def mse_oracle(s, t):
    return math.fsum(((s - t) ** 2).ravel().tolist()) / s.size


def rank_oracle(s, r, eta):
    total, count = 0.0, 0
    n1, n2 = s.shape
    for a in range(n1):
        for j in range(n2):
            for k in range(n2):
                if r[a, j] < r[a, k]:
                    total += max(0.0, s[a, j] - s[a, k] + eta)
                    count += 1
    return total / count


# --- alignment -----------------------------------------------------------------

def test_alignment_single_sample_is_zero():
    x = np.array([[0.6, 0.8]])
    value, grad, _ = alignment_loss(x, x, x, 0.07)
    assert value == 0.0
    assert np.all(grad == 0)


def test_alignment_orthogonal_pair_oracle():
    X = np.eye(2)
    value, _, _ = alignment_loss(X, X, X, 1.0)
    assert value == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert value == pytest.approx(0.313262, abs=1e-5)


def test_alignment_permutation_invariant():
    P, I, T = triplet(0, 7, 5)
    perm = np.random.default_rng(1).permutation(7)
    a = alignment_loss(P, I, T, 0.1)[0]
    b = alignment_loss(P[perm], I[perm], T[perm], 0.1)[0]
    assert abs(a - b) <= 1e-12


def test_alignment_batch_mismatch():
    P, I, T = triplet(0, 4, 3)
    with pytest.raises(BatchMismatch):
        alignment_loss(P, I[:3], T, 0.1)


# --- distillation losses -------------------------------------------------------

def test_mse_examples():
    a = np.array([[0.0, 1.0], [1.0, 0.0]])
    z = np.zeros((2, 2))
    assert distill_mse(a, a) == 0.0
    assert distill_mse(a, z) == pytest.approx(0.5, abs=1e-15)
    assert distill_mse(z, a) == distill_mse(a, z)


def test_mse_matches_oracle():
    rng = np.random.default_rng(3)
    s, t = rng.random((5, 5)), rng.random((5, 5))
    assert distill_mse(s, t) == pytest.approx(mse_oracle(s, t), abs=1e-14)


def test_jeffrey_examples():
    s = np.array([[0.9, 0.1]])
    t = np.array([[0.5, 0.5]])
    assert distill_jeffrey(s, s) == pytest.approx(0.0, abs=1e-10)
    assert distill_jeffrey(s, t) == pytest.approx(0.878890, abs=1e-4)
    assert distill_jeffrey(s, t) == pytest.approx(jeffrey_oracle(s, t), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(2, 8), st.integers(0, 2**32 - 1))
def test_jeffrey_value_symmetric(n, m, seed):
    rng = np.random.default_rng(seed)
    a = rng.dirichlet(np.ones(m), size=n)
    b = rng.dirichlet(np.ones(m), size=n)
    assert abs(distill_jeffrey(a, b) - distill_jeffrey(b, a)) <= 1e-12


def test_rank_margin_examples():
    s = np.array([[0.5, 0.2]])
    r = np.array([[0.0, 1.0]])
    assert distill_rank_margin(s, r, eta=0.1) == pytest.approx(0.4, abs=1e-15)
    assert distill_rank_margin(np.array([[0.1, 0.5, 0.9]]), np.array([[0.0, 1.0, 2.0]]), eta=0.1) == 0.0


def test_rank_margin_zero_margin_on_teacher_distances():
    rng = np.random.default_rng(4)
    X = unit_rows(rng, 6, 4)
    student = relation_euclidean(X)
    teacher = relation_partial_order(X)
    assert distill_rank_margin(student, teacher, eta=0.0) == 0.0


def test_rank_margin_matches_oracle():
    rng = np.random.default_rng(5)
    s = rng.random((4, 6))
    r = np.argsort(np.argsort(rng.random((4, 6)), axis=1), axis=1).astype(float)
    assert distill_rank_margin(s, r, eta=0.05) == pytest.approx(rank_oracle(s, r, 0.05), abs=1e-14)


def test_form_and_shape_errors():
    X = np.eye(3)
    euc = relation_euclidean(X)
    sim = relation_similarity(X, tau=0.5)
    with pytest.raises(FormMismatch):
        distill_mse(sim, euc)
    with pytest.raises(FormMismatch):
        distill_jeffrey(euc, sim)
    with pytest.raises(FormMismatch):
        distill_rank_margin(euc, euc)
    with pytest.raises(ShapeMismatch):
        distill_mse(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ShapeMismatch):
        distill_jeffrey(np.full((2, 2), 0.5), np.full((3, 2), 0.5))
    with pytest.raises(ShapeMismatch):
        distill_rank_margin(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 7), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_distillation_losses_finite_nonnegative(n, d, seed):
    P, I, _ = triplet(seed, n, d)
    for value in (
        distill_mse(relation_euclidean(P), relation_euclidean(I)),
        distill_jeffrey(relation_similarity(P, tau=0.07), relation_similarity(I, tau=0.07)),
        distill_rank_margin(relation_euclidean(P), relation_partial_order(I), eta=0.05),
    ):
        assert math.isfinite(value) and value >= 0


# --- dynamic weights -----------------------------------------------------------

def test_dynamic_weights_examples():
    assert dynamic_weights(WeightLogits()) == (0.5, 0.5, 0.5)
    alpha, _, _ = dynamic_weights(WeightLogits(alpha_logits=(1.0, 0.0)))
    assert alpha == pytest.approx(math.e / (math.e + 1), abs=1e-15)
    assert alpha == pytest.approx(0.731059, abs=1e-6)
    alpha, _, _ = dynamic_weights(WeightLogits(alpha_logits=(50.0, 0.0)))
    assert alpha == 1.0


def test_dynamic_weights_non_finite():
    with pytest.raises(NonFiniteLogit):
        dynamic_weights(WeightLogits(beta_logits=(float("nan"), 0.0)))
    with pytest.raises(NonFiniteLogit):
        dynamic_weights(WeightLogits(gamma_logits=(0.0, float("inf"))))


# --- relation objective --------------------------------------------------------

def test_identical_batches_similarity():
    rng = np.random.default_rng(7)
    X = unit_rows(rng, 5, 4)
    params = LossParams(tau_rel=0.3)
    rel = mrd_relation_losses(X, X, X, WeightLogits(), params)
    assert rel.intra == pytest.approx(0.0, abs=1e-12)
    assert rel.cross_p2t == rel.cross_p2i
    shared = relation_similarity(X, X, tau=0.3)
    assert rel.cross_p2t == pytest.approx(distill_jeffrey(shared, shared), abs=1e-12)


def test_saturated_alpha():
    P, I, T = triplet(8, 5, 4)
    params = LossParams(tau_rel=0.3)
    rel = mrd_relation_losses(P, I, T, WeightLogits(alpha_logits=(50.0, -50.0)), params)
    alone = distill_jeffrey(relation_similarity(P, tau=0.3), relation_similarity(I, tau=0.3))
    assert rel.intra == pytest.approx(alone, abs=1e-9)


def compose_relation_terms(P, I, T, params, weights):
    """Brute-force recomposition of the three weighted relation terms."""
    alpha, beta, gamma = weights
    if params.form is RelationForm.SIMILARITY:
        def rel(a, b=None):
            return relation_similarity(a, b, tau=params.tau_rel).values

        loss = jeffrey_oracle
    elif params.form is RelationForm.EUCLIDEAN:
        def rel(a, b=None):
            return relation_euclidean(a, b).values

        loss = mse_oracle
    else:
        def rel(a, b=None):
            return relation_euclidean(a, b).values

        def loss(s, t):
            return rank_oracle(s, t, params.eta)

    def teacher(a, b=None):
        if params.form is RelationForm.PARTIAL_ORDER:
            return relation_partial_order(a, b).values
        return rel(a, b)

    intra = alpha * loss(rel(P), teacher(I)) + (1 - alpha) * loss(rel(P), teacher(T))
    it, ti = teacher(I, T), teacher(T, I)
    p2t = beta * loss(rel(P, T), it) + (1 - beta) * loss(rel(P, T), ti)
    p2i = gamma * loss(rel(P, I), it) + (1 - gamma) * loss(rel(P, I), ti)
    return intra, p2t, p2i


@pytest.mark.parametrize("form", list(RelationForm))
def test_relation_losses_compositional_oracle(form):
    P, I, T = triplet(9, 3, 5)
    logits = WeightLogits((0.3, -0.2), (1.0, 0.5), (-0.4, 0.2))
    params = LossParams(tau_rel=0.2, form=form)
    rel = mrd_relation_losses(P, I, T, logits, params)
    expected = compose_relation_terms(P, I, T, params, dynamic_weights(logits))
    np.testing.assert_allclose([rel.intra, rel.cross_p2t, rel.cross_p2i], expected, atol=1e-10, rtol=0)


def test_total_loss_compositional_oracle():
    P, I, T = triplet(10, 4, 8)
    logits = WeightLogits((0.1, 0.0), (0.0, 0.4), (0.2, -0.3))
    params = LossParams(tau_align=0.1, tau_rel=0.1, lam=2.5)
    report, _ = total_loss(P, I, T, logits, params)

    def nce(A, B, tau):
        z = A @ B.T / tau
        rows = [-(z[k, k] - math.log(math.fsum(math.exp(v) for v in z[k]))) for k in range(len(z))]
        cols = [-(z[k, k] - math.log(math.fsum(math.exp(v) for v in z[:, k]))) for k in range(len(z))]
        return 0.5 * (sum(rows) / len(rows) + sum(cols) / len(cols))

    align = 0.5 * (nce(P, T, 0.1) + nce(P, I, 0.1))
    terms = compose_relation_terms(P, I, T, params, dynamic_weights(logits))
    assert report.align == pytest.approx(align, abs=1e-10)
    assert report.total == pytest.approx(align + 2.5 * sum(terms), abs=1e-10)


def test_lambda_zero_is_alignment():
    P, I, T = triplet(11, 6, 4)
    logits = WeightLogits((0.5, 0.0), (0.0, 0.0), (0.0, 1.0))
    report, grads = total_loss(P, I, T, logits, LossParams(lam=0.0))
    assert report.total == report.align
    assert report.intra == report.cross_p2t == report.cross_p2i == 0.0
    assert np.all(grads.logits == 0)


def test_relation_toggles_off_is_alignment():
    P, I, T = triplet(12, 6, 4)
    for lam in (0.5, 3.0, 10.0):
        report, _ = total_loss(P, I, T, WeightLogits(), LossParams(lam=lam, ir_enabled=False, cr_enabled=False))
        assert report.total == report.align


def test_individual_toggles():
    P, I, T = triplet(13, 6, 4)
    r_ir, _ = total_loss(P, I, T, WeightLogits(), LossParams(cr_enabled=False))
    assert r_ir.cross_p2t == r_ir.cross_p2i == 0.0 and r_ir.intra > 0
    r_cr, _ = total_loss(P, I, T, WeightLogits(), LossParams(ir_enabled=False))
    assert r_cr.intra == 0.0 and r_cr.cross_p2t > 0


@pytest.mark.parametrize("form", list(RelationForm))
def test_lambda_linearity(form):
    P, I, T = triplet(14, 6, 5)
    logits = WeightLogits((0.2, 0.1), (0.0, -0.5), (0.3, 0.3))
    reports = {lam: total_loss(P, I, T, logits, LossParams(lam=lam, form=form))[0] for lam in (0.7, 4.2)}
    r = reports[0.7]
    rel_sum = r.intra + r.cross_p2t + r.cross_p2i
    assert abs((reports[4.2].total - r.total) - 3.5 * rel_sum) <= 1e-9


def test_dd_off_fixes_half_weights():
    P, I, T = triplet(15, 6, 4)
    logits = WeightLogits((3.0, -1.0), (0.2, 0.0), (-2.0, 1.0))
    report, grads = total_loss(P, I, T, logits, LossParams(dd_enabled=False))
    assert (report.alpha, report.beta, report.gamma) == (0.5, 0.5, 0.5)
    assert np.all(grads.logits == 0)


def test_teachers_are_constants():
    P, I, T = triplet(16, 5, 4)
    I0, T0 = I.copy(), T.copy()
    logits = WeightLogits((0.2, 0.0), (0.0, 0.1), (0.3, 0.0))
    _, grads = total_loss(P, I, T, logits, LossParams(tau_rel=0.3))
    # gradients exist only for point rows, the alignment temperature and the logits
    assert set(dataclasses.asdict(grads)) == {"point", "tau_align", "logits"}
    assert np.array_equal(I, I0) and np.array_equal(T, T0)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 6), st.integers(2, 6), st.integers(0, 2**32 - 1), st.sampled_from(list(RelationForm)))
def test_total_finite_nonnegative(n, d, seed, form):
    P, I, T = triplet(seed, n, d)
    report, grads = total_loss(P, I, T, WeightLogits(), LossParams(form=form))
    for v in (report.align, report.intra, report.cross_p2t, report.cross_p2i, report.total):
        assert math.isfinite(v) and v >= 0
    assert np.all(np.isfinite(grads.point))


# --- gradient checks -----------------------------------------------------------

def test_grad_check_mse_small():
    inputs = random_inputs(4, 4, seed=0, form="euclidean")
    assert grad_check("mse", inputs, step=1e-5).max_rel_error < 1e-5


def test_grad_check_total_similarity():
    inputs = random_inputs(6, 12, seed=1, form="similarity")
    assert grad_check("total", inputs, step=1e-5).max_rel_error < 1e-4


def test_grad_check_detects_corruption():
    inputs = random_inputs(6, 12, seed=2, form="similarity")

    def corrupt(name, grad):
        if name == "p":
            flat = grad.reshape(-1)
            k = int(np.argmax(np.abs(flat)))
            flat[k] *= 2.0
        return grad

    assert grad_check("total", inputs, corrupt=corrupt).max_rel_error > 0.1


@pytest.mark.parametrize("form", list(RelationForm))
def test_grad_suite_every_form(form):
    for res in grad_suite(form, n=5, d=6, seed=3):
        assert res.passed(1e-4), (res.kind, res.per_param)


@pytest.mark.parametrize("variant", [
    dict(share_tau=True),
    dict(mask_diagonal=True),
    dict(tau_align=0.07, tau_rel=0.07),
    dict(dd_enabled=False),
])
def test_grad_check_variants(variant):
    inputs = random_inputs(5, 6, seed=4, form="similarity", **variant)
    assert grad_check("total", inputs).passed(1e-4)


def test_grad_check_rank_margin_hinge_safe():
    inputs = hinge_safe_inputs(6, 8, seed=5)
    for kind in ("rank_margin", "total"):
        assert grad_check(kind, inputs).passed(1e-4)


def test_relation_matrix_inputs_accepted():
    rm = RelationMatrix(RelationForm.EUCLIDEAN, np.zeros((2, 2)), intra=True)
    assert distill_mse(rm, rm) == 0.0
