"""Reference-loss tests: hand cases, reductions, oracles, analytic gradients."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinfair.losses import (
    BiasVector,
    LossBreakdown,
    LossConfigError,
    NonFiniteLossError,
    SimMatrix,
    batch_bias,
    bias_vector_from_features,
    cosine,
    cosine_matrix,
    fair_contrastive_loss,
    fair_loss_probabilities,
    loss_grad_wrt_sims,
    p_ij,
    pair_bias,
    race_ce,
    supcon_loss,
    total_loss,
)


def random_sim_matrix(rng, n, tau=0.08, limit=0.95):
    """Random valid similarity matrices with entries bounded away from +-1."""
    cos_xy = rng.uniform(-limit, limit, (n, n))
    cos_xx = rng.uniform(-limit, limit, (n, n))
    cos_yy = rng.uniform(-limit, limit, (n, n))
    np.fill_diagonal(cos_xx, 1.0)
    np.fill_diagonal(cos_yy, 1.0)
    return SimMatrix(cos_xy=cos_xy, cos_xx=cos_xx, cos_yy=cos_yy, tau=tau)


# --- cosine -------------------------------------------------------------


def test_cosine_identical_vectors():
    v = np.array([0.3, -1.2, 4.0])
    assert cosine(v, v) == pytest.approx(1.0, abs=1e-12)


def test_cosine_orthogonal():
    assert cosine(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == pytest.approx(0.0)


def test_cosine_hand_value():
    assert cosine(np.array([1.0, 1.0]), np.array([1.0, 0.0])) == pytest.approx(
        0.7071, abs=1e-4
    )


def test_cosine_degenerate_counts_and_warns():
    import kinfair.losses as losses_mod

    before = losses_mod.degenerate_cosine_count
    with pytest.warns(UserWarning):
        value = cosine(np.zeros(3), np.zeros(3))
    assert value == 0.0
    assert losses_mod.degenerate_cosine_count == before + 1


def test_cosine_matrix_matches_scalar():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(4, 6))
    b = rng.normal(size=(5, 6))
    mat = cosine_matrix(a, b)
    for i in range(4):
        for j in range(5):
            assert mat[i, j] == pytest.approx(cosine(a[i], b[j]), abs=1e-12)


# --- SimMatrix / BiasVector invariants -----------------------------------


def test_sim_matrix_rejects_bad_tau():
    eye = np.eye(2)
    with pytest.raises(LossConfigError):
        SimMatrix(cos_xy=eye, cos_xx=eye, cos_yy=eye, tau=0.0)


def test_sim_matrix_rejects_bad_diagonal():
    eye = np.eye(3)
    off = eye.copy()
    off[0, 0] = 0.5
    with pytest.raises(LossConfigError):
        SimMatrix(cos_xy=eye, cos_xx=off, cos_yy=eye, tau=0.1)


def test_sim_matrix_rejects_out_of_range():
    eye = np.eye(2)
    bad = np.array([[1.5, 0.0], [0.0, 1.0]])
    with pytest.raises(LossConfigError):
        SimMatrix(cos_xy=bad, cos_xx=eye, cos_yy=eye, tau=0.1)


def test_bias_vector_rejects_non_antisymmetric():
    eps = np.array([[0.0, 1.0], [0.5, 0.0]])
    with pytest.raises(LossConfigError):
        BiasVector(b=np.zeros(2), eps_matrix=eps)


# --- pair bias and batch bias ---------------------------------------------


def test_pair_bias_equal_inputs_is_zero():
    m = np.array([0.5, 0.2])
    assert pair_bias(m, m, m) == pytest.approx(0.0)


def test_pair_bias_hand_case():
    # squared cosines: 1^2 - 0^2
    assert pair_bias(
        np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.array([0.0, 1.0])
    ) == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_pair_bias_antisymmetric_random_affine(seed):
    rng = np.random.default_rng(seed)
    f_i = rng.normal(size=5)
    f_j = rng.normal(size=5)
    weight = rng.normal(size=(5, 4))
    bias = rng.normal(size=4)
    mid = 0.5 * (f_i + f_j)
    eps_ij = pair_bias(mid @ weight + bias, f_i @ weight + bias, f_j @ weight + bias)
    eps_ji = pair_bias(mid @ weight + bias, f_j @ weight + bias, f_i @ weight + bias)
    assert eps_ij + eps_ji == pytest.approx(0.0, abs=1e-9)


def test_batch_bias_zero_matrix():
    assert np.allclose(batch_bias(np.zeros((4, 4))), 0.0)


def test_batch_bias_single_element():
    assert batch_bias(np.zeros((1, 1))).tolist() == [0.0]


def test_batch_bias_hand_case_3x3():
    eps = np.array([[0.0, 0.2, -0.1], [-0.2, 0.0, 0.4], [0.1, -0.4, 0.0]])
    expected = [0.05, 0.1, -0.15]
    assert np.allclose(batch_bias(eps), expected)


def test_batch_bias_sums_to_zero_by_antisymmetry():
    rng = np.random.default_rng(1)
    raw = rng.normal(size=(6, 6))
    eps = raw - raw.T
    assert batch_bias(eps).sum() * (6 - 1) == pytest.approx(0.0, abs=1e-12)


def test_bias_vector_from_features_matches_scalar_op():
    rng = np.random.default_rng(2)
    feats = rng.normal(size=(5, 7))
    weight = rng.normal(size=(7, 6))
    bias = rng.normal(size=6)
    vec = bias_vector_from_features(feats, weight, bias)
    mapped = feats @ weight + bias
    for i in range(5):
        for j in range(5):
            if i == j:
                assert vec.eps_matrix[i, j] == 0.0
                continue
            mid = (0.5 * (feats[i] + feats[j])) @ weight + bias
            assert vec.eps_matrix[i, j] == pytest.approx(
                pair_bias(mid, mapped[i], mapped[j]), abs=1e-12
            )
    assert np.allclose(vec.b, batch_bias(vec.eps_matrix))


# --- supervised contrastive loss -------------------------------------------


def test_supcon_uniform_two_pairs():
    # all similarities equal: 1 positive and 2 negatives per anchor
    cos = np.full((2, 2), 0.4)
    s = SimMatrix(
        cos_xy=cos,
        cos_xx=np.where(np.eye(2, dtype=bool), 1.0, 0.4),
        cos_yy=np.where(np.eye(2, dtype=bool), 1.0, 0.4),
        tau=0.08,
    )
    assert supcon_loss(s) == pytest.approx(-math.log(1 / 3), rel=1e-12)


def test_supcon_separated_pairs_near_zero():
    n = 2
    cos_xy = np.where(np.eye(n, dtype=bool), 1.0, -1.0)
    cos_xx = np.where(np.eye(n, dtype=bool), 1.0, -1.0)
    s = SimMatrix(cos_xy=cos_xy, cos_xx=cos_xx, cos_yy=cos_xx.copy(), tau=0.08)
    assert supcon_loss(s) < 1e-6


def test_supcon_permutation_invariant():
    rng = np.random.default_rng(3)
    s = random_sim_matrix(rng, 5)
    perm = rng.permutation(5)
    s_perm = SimMatrix(
        cos_xy=s.cos_xy[np.ix_(perm, perm)],
        cos_xx=s.cos_xx[np.ix_(perm, perm)],
        cos_yy=s.cos_yy[np.ix_(perm, perm)],
        tau=s.tau,
    )
    assert supcon_loss(s_perm) == pytest.approx(supcon_loss(s), rel=1e-12)


def test_supcon_single_pair_is_error():
    s = SimMatrix(cos_xy=np.eye(1), cos_xx=np.eye(1), cos_yy=np.eye(1), tau=0.08)
    with pytest.raises(LossConfigError):
        supcon_loss(s)


def test_supcon_self_term_variant_differs_and_is_larger():
    rng = np.random.default_rng(4)
    s = random_sim_matrix(rng, 4)
    default = supcon_loss(s)
    literal = supcon_loss(s, include_self_term=True)
    # the self term e^{1/tau} dominates the denominator, inflating the loss
    assert literal > default


# --- fair contrastive loss ---------------------------------------------------


def test_fair_loss_zero_bias_reduces_to_supcon():
    rng = np.random.default_rng(5)
    for _ in range(200):
        n = rng.integers(2, 9)
        s = random_sim_matrix(rng, n)
        fair = fair_contrastive_loss(s, BiasVector.zeros(n))
        sup = supcon_loss(s)
        assert fair == pytest.approx(sup, rel=1e-9)


def test_fair_loss_hand_case_two_pairs():
    # independent scalar oracle, written before the implementation:
    # pos = (0.8 - 0.05)/tau, two negatives at 0.1/tau per anchor
    tau = 0.08
    pos = (0.8 - 0.05) / tau
    neg = 0.1 / tau
    oracle = math.log(2 * math.exp(neg) + math.exp(pos)) - pos
    assert oracle == pytest.approx(0.0005919142443087, abs=1e-12)

    cos_xy = np.full((2, 2), 0.1)
    np.fill_diagonal(cos_xy, 0.8)
    cos_xx = np.where(np.eye(2, dtype=bool), 1.0, 0.1)
    s = SimMatrix(cos_xy=cos_xy, cos_xx=cos_xx, cos_yy=cos_xx.copy(), tau=tau)
    value = fair_contrastive_loss(s, np.array([0.05, 0.05]))
    assert value == pytest.approx(oracle, rel=1e-12)


def test_fair_loss_strictly_increasing_in_bias():
    rng = np.random.default_rng(6)
    s = random_sim_matrix(rng, 4)
    b = np.zeros(4)
    base = fair_contrastive_loss(s, b)
    for i in range(4):
        bumped = b.copy()
        bumped[i] = 0.05
        assert fair_contrastive_loss(s, bumped) > base


def test_fair_loss_accepts_bias_vector_and_array():
    rng = np.random.default_rng(7)
    s = random_sim_matrix(rng, 3)
    raw = rng.normal(size=(3, 3)) * 0.01
    eps = raw - raw.T
    vec = BiasVector.from_eps(eps)
    assert fair_contrastive_loss(s, vec) == pytest.approx(
        fair_contrastive_loss(s, vec.b), rel=1e-12
    )


def test_fair_loss_distinct_direction_biases():
    rng = np.random.default_rng(8)
    s = random_sim_matrix(rng, 3)
    b_x = np.array([0.1, 0.0, -0.05])
    b_y = np.array([-0.02, 0.07, 0.0])
    asym = fair_contrastive_loss(s, b_x, b_y)
    sym = fair_contrastive_loss(s, b_x)
    assert asym != pytest.approx(sym, rel=1e-12)


def test_logit_shift_invariance():
    # adding a constant to every logit of a row of the stabilized softmax
    # leaves the loss unchanged; realized here by shifting tau-scaled
    # similarities through a common additive constant on the exponents
    rng = np.random.default_rng(9)
    n = 4
    s = random_sim_matrix(rng, n)
    from kinfair.losses import _direction_losses

    base = _direction_losses(s, np.zeros(n))
    # same rows, all logits shifted by +c: equivalent to tau-scaled sims + c
    c = 37.5
    pos = (np.diag(s.cos_xy)) / s.tau + c
    off = ~np.eye(n, dtype=bool)
    negs = (
        np.stack(
            [
                np.concatenate([s.cos_xx[i, off[i]], s.cos_xy[i, off[i]]])
                for i in range(n)
            ]
        )
        / s.tau
        + c
    )
    all_logits = np.concatenate([negs, pos[:, None]], axis=1)
    m = all_logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(all_logits - m).sum(axis=1))
    shifted = lse - pos
    assert np.abs(shifted - base).max() <= 1e-9


# --- probabilities (gradient analysis) ---------------------------------------


def test_p_ij_rows_sum_to_one():
    rng = np.random.default_rng(10)
    s = random_sim_matrix(rng, 6)
    probs = p_ij(s, rng.normal(size=6) * 0.1)
    assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-9)
    assert (probs > 0).all()


def test_p_ij_zero_bias_reduction():
    rng = np.random.default_rng(11)
    s = random_sim_matrix(rng, 5)
    assert np.allclose(p_ij(s), p_ij(s, np.zeros(5)), atol=1e-15)


def test_p_ij_strictly_increasing_in_bias():
    rng = np.random.default_rng(12)
    for _ in range(25):
        n = int(rng.integers(2, 8))
        s = random_sim_matrix(rng, n)
        b = rng.normal(size=n) * 0.1
        base = p_ij(s, b)
        for i in range(n):
            bumped = b.copy()
            bumped[i] += 0.03
            probs = p_ij(s, bumped)
            off = [j for j in range(n) if j != i]
            assert (probs[i, off] > base[i, off]).all()
            # other anchors' rows are untouched
            for k in range(n):
                if k != i:
                    assert np.allclose(probs[k], base[k], atol=1e-15)


def test_fair_loss_probabilities_rows_normalize():
    rng = np.random.default_rng(13)
    s = random_sim_matrix(rng, 5)
    b = rng.normal(size=5) * 0.05
    for direction in fair_loss_probabilities(s, b, b):
        total = (
            direction.p_pos
            + direction.p_within.sum(axis=1)
            + direction.p_cross.sum(axis=1)
        )
        assert np.allclose(total, 1.0, atol=1e-9)
        assert np.allclose(np.diag(direction.p_within), 0.0)
        assert np.allclose(np.diag(direction.p_cross), 0.0)


# --- analytic gradients -------------------------------------------------------


def finite_difference_grads(s, b_x, b_y, step=1e-4):
    """Central finite differences of the fair loss over every matrix entry."""
    grads = {}
    for name in ("cos_xy", "cos_xx", "cos_yy"):
        base = getattr(s, name)
        grad = np.zeros_like(base)
        for i in range(s.n):
            for j in range(s.n):
                if name in ("cos_xx", "cos_yy") and i == j:
                    continue  # pinned to 1 by the type invariant
                plus = {k: getattr(s, k).copy() for k in ("cos_xy", "cos_xx", "cos_yy")}
                minus = {k: v.copy() for k, v in plus.items()}
                plus[name][i, j] += step
                minus[name][i, j] -= step
                s_plus = SimMatrix(tau=s.tau, **plus)
                s_minus = SimMatrix(tau=s.tau, **minus)
                grad[i, j] = (
                    fair_contrastive_loss(s_plus, b_x, b_y)
                    - fair_contrastive_loss(s_minus, b_x, b_y)
                ) / (2 * step)
        grads[name] = grad
    return grads


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-9):
    # relative check with an absolute floor: central differences bottom out
    # near 1e-11 from float roundoff, below any meaningful gradient scale
    diff = np.abs(analytic - numeric)
    bound = atol + rtol * np.maximum(np.abs(analytic), np.abs(numeric))
    assert (diff <= bound).all(), f"max violation {np.max(diff - bound):.3e}"


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(14)
    for _ in range(30):
        n = int(rng.integers(2, 9))
        s = random_sim_matrix(rng, n, limit=0.9)
        b_x = rng.normal(size=n) * 0.1
        b_y = rng.normal(size=n) * 0.1
        grads = loss_grad_wrt_sims(s, b_x, b_y)
        fd = finite_difference_grads(s, b_x, b_y)
        for name, analytic in (
            ("cos_xy", grads.d_cos_xy),
            ("cos_xx", grads.d_cos_xx),
            ("cos_yy", grads.d_cos_yy),
        ):
            numeric = fd[name]
            mask = np.ones((n, n), dtype=bool)
            if name != "cos_xy":
                np.fill_diagonal(mask, False)
            assert_grads_close(analytic[mask], numeric[mask])


def test_gradient_signs():
    rng = np.random.default_rng(15)
    s = random_sim_matrix(rng, 5)
    grads = loss_grad_wrt_sims(s, rng.normal(size=5) * 0.1)
    assert (np.diag(grads.d_cos_xy) < 0).all()  # positives pull together
    off = ~np.eye(5, dtype=bool)
    assert (grads.d_cos_xx[off] > 0).all()
    assert (grads.d_cos_yy[off] > 0).all()
    assert (grads.d_cos_xy[off] > 0).all()
    assert np.allclose(np.diag(grads.d_cos_xx), 0.0)
    assert np.allclose(np.diag(grads.d_cos_yy), 0.0)


def test_gradient_identity_positive_row():
    # -dL_i/dcos(pos) = (1/tau) * (1 - P_pos) per anchor direction
    rng = np.random.default_rng(16)
    n = 6
    s = random_sim_matrix(rng, n)
    b_x = rng.normal(size=n) * 0.05
    b_y = rng.normal(size=n) * 0.05
    probs_x, probs_y = fair_loss_probabilities(s, b_x, b_y)
    grads = loss_grad_wrt_sims(s, b_x, b_y)
    expected = -((1 - probs_x.p_pos) + (1 - probs_y.p_pos)) / (2 * n * s.tau)
    assert np.allclose(np.diag(grads.d_cos_xy), expected, atol=1e-12)
    # and the negative-probability sum formulation agrees
    neg_sum_x = probs_x.p_within.sum(axis=1) + probs_x.p_cross.sum(axis=1)
    assert np.allclose(1 - probs_x.p_pos, neg_sum_x, atol=1e-12)


def test_bias_increases_gradient_magnitudes():
    # positive bias inflates every row probability, hence every gradient
    rng = np.random.default_rng(17)
    s = random_sim_matrix(rng, 4)
    zero = loss_grad_wrt_sims(s, np.zeros(4))
    biased = loss_grad_wrt_sims(s, np.full(4, 0.1))
    off = ~np.eye(4, dtype=bool)
    assert (biased.d_cos_xx[off] > zero.d_cos_xx[off]).all()
    assert (np.diag(biased.d_cos_xy) < np.diag(zero.d_cos_xy)).all()


# --- race cross entropy and total loss ----------------------------------------


def test_race_ce_uniform_logits():
    logits = np.zeros((3, 4))
    assert race_ce(logits, [0, 1, 3]) == pytest.approx(math.log(4), rel=1e-12)


def test_race_ce_margin_20():
    logits = np.array([[20.0, 0.0, 0.0, 0.0]])
    assert race_ce(logits, [0]) < 1e-3


def test_race_ce_hand_fixture():
    logits = np.array([[2.0, 0.5, -1.0, 0.0], [0.0, 0.0, 3.0, -2.0]])
    assert race_ce(logits, [0, 2]) == pytest.approx(0.2216908095226664, rel=1e-12)


def test_race_ce_label_out_of_range():
    with pytest.raises(LossConfigError):
        race_ce(np.zeros((1, 4)), [4])


def test_race_ce_shift_invariance():
    rng = np.random.default_rng(18)
    logits = rng.normal(size=(5, 4))
    labels = [0, 1, 2, 3, 1]
    shifted = logits + 123.0
    assert race_ce(shifted, labels) == pytest.approx(race_ce(logits, labels), abs=1e-9)


def test_total_loss_values():
    assert total_loss(1.0, 0.5) == 1.5
    assert total_loss(3.25, 0.0) == 3.25


def test_total_loss_rejects_non_finite():
    with pytest.raises(NonFiniteLossError):
        total_loss(float("nan"), 1.0)
    with pytest.raises(NonFiniteLossError):
        total_loss(1.0, float("inf"))


def test_loss_breakdown_total_is_exact_sum():
    bias = BiasVector.zeros(3)
    breakdown = LossBreakdown.build(0.1 + 0.2, 0.3, bias)
    assert breakdown.l_total == breakdown.l_fairness + breakdown.l_race
