"""Confusion-aware margin: similarity, tendency, margin matrix, margin loss."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capforge import (
    MarginState,
    ValidationError,
    build_margin_state,
    class_prototypes,
    margin_loss,
    margin_loss_batch,
    margin_matrix,
    similarity_matrix,
    tendency_stats,
)

# --------------------------------------------------------------------------
# prototypes


def test_prototype_mean_then_normalize():
    feats = {0: np.array([[1.0, 0.0], [0.0, 1.0]]), 1: np.array([[0.0, 1.0]])}
    vp, tp = class_prototypes(feats, np.eye(2))
    assert np.allclose(vp[0], [0.7071, 0.7071], atol=1e-4)
    assert np.allclose(vp[1], [0.0, 1.0])
    assert np.array_equal(tp, np.eye(2))


def test_prototype_matches_brute_force_mean(rng):
    feats = {c: rng.standard_normal((5 + c, 6)) for c in range(3)}
    vp, _ = class_prototypes(feats, np.eye(3, 6))
    for c in range(3):
        total = np.zeros(6)
        for row in feats[c]:
            total += row
        mean = total / len(feats[c])
        assert np.allclose(vp[c], mean / np.linalg.norm(mean), atol=1e-12)


def test_prototype_empty_class_rejected():
    with pytest.raises(ValidationError):
        class_prototypes({0: np.eye(2)}, np.eye(2))


# --------------------------------------------------------------------------
# similarity


def test_similarity_self_is_one(rng):
    V = rng.standard_normal((4, 8))
    S = similarity_matrix(V, rng.standard_normal((4, 8)))
    assert np.allclose(np.diag(S), 1.0)


def test_similarity_takes_modality_max():
    V = np.eye(2)                                  # visual cos = 0
    half = np.sqrt(1 - 0.8**2)
    T = np.array([[1.0, 0.0], [0.8, half]])        # text cos = 0.8
    S = similarity_matrix(V, T)
    assert S[0, 1] == pytest.approx(0.8, abs=1e-9)
    assert S[1, 0] == pytest.approx(0.8, abs=1e-9)


def test_similarity_clamps_negative_to_zero():
    V = np.array([[1.0, 0.0], [-1.0, 0.0]])
    T = np.array([[0.0, 1.0], [0.0, -1.0]])
    S = similarity_matrix(V, T)
    assert S[0, 1] == 0.0


def test_similarity_symmetric(rng):
    S = similarity_matrix(rng.standard_normal((5, 7)), rng.standard_normal((5, 7)))
    assert np.array_equal(S, S.T)
    assert S.min() >= 0.0 and S.max() <= 1.0


# --------------------------------------------------------------------------
# tendency


def test_tendency_unit_example():
    preds = [(0, 0.9)] * 4 + [(1, 0.9)] * 2
    sigma, delta, big = tendency_stats(preds, tau=0.85, n_classes=3)
    assert np.array_equal(sigma, [4, 2, 0])
    assert np.allclose(delta, [0.0, 0.5, 1.0])
    assert big == 1.0


def test_tendency_balanced_counts_disable_margin():
    preds = [(0, 0.9), (1, 0.9), (2, 0.9)]
    sigma, delta, big = tendency_stats(preds, tau=0.85, n_classes=3)
    assert np.array_equal(sigma, [1, 1, 1])
    assert np.allclose(delta, 0.0)
    assert big == 0.0


def test_tendency_all_below_threshold_disables_margin():
    preds = [(0, 0.5), (1, 0.2)]
    sigma, delta, big = tendency_stats(preds, tau=0.85, n_classes=3)
    assert sigma.sum() == 0
    assert np.allclose(delta, 0.0) and big == 0.0


def test_tendency_threshold_is_inclusive():
    sigma, _, _ = tendency_stats([(1, 0.85)], tau=0.85, n_classes=2)
    assert sigma[1] == 1


# --------------------------------------------------------------------------
# margin matrix


def test_margin_matrix_arithmetic():
    S = np.full((2, 2), 0.8)
    M = margin_matrix(S, delta=np.array([0.5, 0.5]), big_delta=1.0,
                      base_scale=12.0)
    assert M[0, 1] == pytest.approx(4.8)
    assert M[1, 0] == pytest.approx(4.8)
    assert M[0, 0] == 0.0 and M[1, 1] == 0.0


def test_margin_matrix_zero_row_for_top_class():
    S = np.ones((3, 3))
    M = margin_matrix(S, delta=np.array([0.0, 0.5, 1.0]), big_delta=1.0,
                      base_scale=12.0)
    assert np.allclose(M[0], 0.0)
    assert M[2, 0] == pytest.approx(12.0)


@given(st.integers(0, 2**32 - 1))
def test_margin_matrix_bounded_by_base_scale(seed):
    rng = np.random.default_rng(seed)
    C = 4
    S = np.clip(rng.uniform(-0.2, 1.0, (C, C)), 0.0, 1.0)
    S = 0.5 * (S + S.T)
    delta = rng.uniform(0.0, 1.0, C)
    big = float(delta.max(initial=0.0))
    M = margin_matrix(S, delta, big, base_scale=12.0)
    assert M.min() >= 0.0
    assert M.max() <= 12.0 + 1e-12
    assert np.all(np.diag(M) == 0.0)


def test_build_margin_state_assembles_consistently(rng):
    feats = {c: rng.standard_normal((4, 8)) for c in range(3)}
    text = rng.standard_normal((3, 8))
    preds = [(0, 0.9)] * 4 + [(1, 0.9)] * 2
    st_ = build_margin_state(feats, text, preds, tau=0.85, n_classes=3,
                             base_scale=12.0)
    assert isinstance(st_, MarginState)
    assert np.allclose(st_.m_vec, 12.0 * st_.big_delta * st_.delta)
    assert np.allclose(st_.margin,
                       margin_matrix(st_.sim_matrix, st_.delta,
                                     st_.big_delta, 12.0))
    doc = st_.to_json()
    assert doc["base_scale"] == 12.0 and len(doc["sigma"]) == 3


# --------------------------------------------------------------------------
# margin loss


def test_zero_margin_is_cross_entropy():
    loss, grad = margin_loss(0, np.zeros(2), np.zeros((2, 2)))
    assert loss == pytest.approx(np.log(2.0), abs=1e-12)
    assert np.allclose(grad, [-0.5, 0.5])


def test_margin_shifts_closed_form():
    M = np.array([[0.0, np.log(3.0)], [0.0, 0.0]])
    loss, _ = margin_loss(0, np.zeros(2), M)
    assert loss == pytest.approx(np.log(4.0), abs=1e-12)


def test_zero_margin_matches_cross_entropy_on_random_inputs(rng):
    C = 7
    Mz = np.zeros((C, C))
    for _ in range(200):
        y = int(rng.integers(C))
        z = rng.standard_normal(C) * 5
        loss, _ = margin_loss(y, z, Mz)
        ce = -np.log(np.exp(z[y]) / np.exp(z).sum())
        assert abs(loss - ce) < 1e-9


def test_gradient_matches_finite_differences(rng):
    # oracle: central differences on the loss, h = 1e-4
    C = 5
    for _ in range(100):
        y = int(rng.integers(C))
        z = rng.standard_normal(C) * 3
        M = np.abs(rng.standard_normal((C, C)))
        np.fill_diagonal(M, 0.0)
        loss, grad = margin_loss(y, z, M)
        h = 1e-4
        for j in range(C):
            zp, zm = z.copy(), z.copy()
            zp[j] += h
            zm[j] -= h
            fd = (margin_loss(y, zp, M)[0] - margin_loss(y, zm, M)[0]) / (2 * h)
            denom = max(abs(fd), abs(grad[j]), 1e-8)
            assert abs(fd - grad[j]) / denom < 1e-4


def test_loss_monotone_in_margin(rng):
    C = 4
    z = rng.standard_normal(C)
    M = np.zeros((C, C))
    base, _ = margin_loss(1, z, M)
    M2 = M.copy()
    M2[1, 3] = 0.7
    bigger, _ = margin_loss(1, z, M2)
    assert bigger > base
    M3 = M2.copy()
    M3[1, 3] = 1.4
    assert margin_loss(1, z, M3)[0] > bigger


def test_extreme_logits_stay_finite():
    loss, grad = margin_loss(0, np.array([1000.0, -1000.0]), np.zeros((2, 2)))
    assert np.isfinite(loss) and np.isfinite(grad).all()
    with pytest.raises(ValidationError):
        margin_loss(0, np.array([np.nan, 0.0]), np.zeros((2, 2)))


def test_batch_loss_is_mean_of_singles(rng):
    C, b = 6, 9
    ys = rng.integers(0, C, b)
    Z = rng.standard_normal((b, C)) * 4
    M = np.abs(rng.standard_normal((C, C)))
    np.fill_diagonal(M, 0.0)
    total, G = margin_loss_batch(ys, Z, M)
    singles = [margin_loss(int(y), z, M) for y, z in zip(ys, Z)]
    assert total == pytest.approx(np.mean([s[0] for s in singles]), abs=1e-12)
    for i, (_, g) in enumerate(singles):
        assert np.allclose(G[i], g / b, atol=1e-12)


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_gradient_rows_sum_to_zero(seed):
    rng = np.random.default_rng(seed)
    C = 5
    y = int(rng.integers(C))
    z = rng.standard_normal(C) * 10
    M = np.abs(rng.standard_normal((C, C)))
    np.fill_diagonal(M, 0.0)
    _, grad = margin_loss(y, z, M)
    # softmax minus one-hot always sums to zero
    assert abs(grad.sum()) < 1e-9
