import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import lambda1_bruteforce, random_rotation, unit_rows
from trialign.autograd import Tensor, grad_check, ops
from trialign.losses import (PAIRS, ConfigError, EmbeddingBatch, Temperature, anchor_triplet_count, clamp_temperature,
                             combine_terms, contrastive_loss, contrastive_terms, info_nce_pair, info_nce_triplet,
                             sample_triplet_indices, triplet_lambda_logits)
from trialign.numkit import Rng, ValidationError, top_singular_value


def random_batch(rng, b, d):
    return EmbeddingBatch(*(unit_rows(rng, b, d) for _ in range(3)))


def check_index_invariants(idx: np.ndarray, b: int) -> None:
    ar = np.arange(b)
    assert idx.shape == (b, b, 3)
    assert np.array_equal(idx[:, 0, :], np.repeat(ar[:, None], 3, axis=1))
    assert np.array_equal(idx[:, :, 0], np.repeat(ar[:, None], b, axis=1))
    for i in range(1, b):
        for j in (1, 2):
            assert np.array_equal(np.sort(idx[:, i, j]), ar)


# -- temperature -----------------------------------------------------------------------


def test_clamp_below_stage1_range():
    t = Temperature(1 / 14, (0.01, 1e4))
    t.tau = 0.005
    assert clamp_temperature(t).tau == pytest.approx(0.01, rel=1e-12)


def test_clamp_inside_unchanged():
    t = Temperature(0.2, (0.1, 1e4))
    t.tau = 0.5
    assert clamp_temperature(t).tau == pytest.approx(0.5, rel=1e-12)


def test_clamp_above_stage3_range():
    t = Temperature(0.2, (0.2, 1e4))
    t.tau = 2e4
    assert clamp_temperature(t).tau == pytest.approx(1e4, rel=1e-12)


def test_inverted_range_is_config_error():
    with pytest.raises(ConfigError):
        Temperature(1.0, (2.0, 1.0))
    t = Temperature(1.0, (0.5, 2.0))
    t.clamp_range = (2.0, 1.0)
    with pytest.raises(ConfigError):
        clamp_temperature(t)


def test_tau0_outside_range_rejected():
    with pytest.raises(ConfigError):
        Temperature(0.05, (0.1, 1e4))


def test_stored_as_log_inverse():
    t = Temperature(1 / 14)
    assert float(t.param.value) == pytest.approx(math.log(14), rel=1e-14)
    assert t.inverse().item() == pytest.approx(14.0, rel=1e-12)


def test_reset():
    t = Temperature(1 / 14, (0.01, 1e4))
    t.tau = 3.0
    t.reset(0.2, (0.2, 1e4))
    assert t.tau == pytest.approx(0.2) and t.clamp_range == (0.2, 1e4)


# -- pairwise InfoNCE ------------------------------------------------------------------


def test_orthonormal_one_directional_value():
    x = np.eye(4)
    loss = info_nce_pair(x, x, 1.0, symmetric=False).item()
    assert loss == pytest.approx(-math.log(math.e / (math.e + 3)), abs=1e-14)


@pytest.mark.parametrize("b", [2, 8, 64])
@pytest.mark.parametrize("symmetric", [True, False])
def test_identical_embeddings_give_log_b(b, symmetric):
    x = np.tile(unit_rows(np.random.default_rng(b), 1, 16), (b, 1))
    assert info_nce_pair(x, x, Temperature(1 / 14), symmetric).item() == pytest.approx(math.log(b), abs=1e-10)


def test_perfect_separation_limit():
    x = np.eye(6)
    assert info_nce_pair(x, x, 1e-3).item() < 1e-12


def test_pair_needs_two_samples():
    with pytest.raises(ValidationError):
        info_nce_pair(np.eye(1, 4), np.eye(1, 4), 1.0)


def test_symmetric_is_average_of_directions():
    rng = np.random.default_rng(0)
    a, b = unit_rows(rng, 8, 5), unit_rows(rng, 8, 5)
    fwd = info_nce_pair(a, b, 0.3, symmetric=False).item()
    bwd = info_nce_pair(b, a, 0.3, symmetric=False).item()
    assert info_nce_pair(a, b, 0.3).item() == pytest.approx(0.5 * (fwd + bwd), abs=1e-14)


def test_positive_cosine_monotonicity():
    rng = np.random.default_rng(1)
    a, b = unit_rows(rng, 6, 4), unit_rows(rng, 6, 4)
    # rotate b[0] away from a[0] within their common plane, in small steps
    u = a[0]
    w = b[0] - (b[0] @ u) * u
    w /= np.linalg.norm(w)
    prev = -np.inf
    for cos in np.linspace(0.99, -0.99, 25):
        b2 = b.copy()
        b2[0] = cos * u + math.sqrt(1 - cos * cos) * w
        loss = info_nce_pair(a, b2, 0.5, symmetric=False).item()
        assert loss >= prev - 1e-14
        prev = loss


# -- triplet sampling ---------------------------------------------------------------------


def test_b1_single_positive():
    idx = sample_triplet_indices(1, Rng(0))
    assert idx.tolist() == [[[0, 0, 0]]]


def test_b2_structure():
    idx = sample_triplet_indices(2, Rng(3))
    assert idx[0, 0].tolist() == [0, 0, 0] and idx[1, 0].tolist() == [1, 1, 1]
    assert sorted(idx[:, 1, 1]) == [0, 1] and sorted(idx[:, 1, 2]) == [0, 1]


@settings(max_examples=300, deadline=None)
@given(st.integers(1, 64), st.integers(0, 2**32 - 1))
def test_index_invariants_property(b, seed):
    check_index_invariants(sample_triplet_indices(b, Rng(seed)), b)


def test_reject_collisions_removes_positive_repeats():
    for seed in range(200):
        idx = sample_triplet_indices(4, Rng(seed), reject_collisions=True)
        check_index_invariants(idx, 4)
        neg = idx[:, 1:, :]
        assert not np.any((neg[..., 1] == neg[..., 0]) & (neg[..., 2] == neg[..., 0]))


def test_collision_rate_monte_carlo():
    b, seeds = 8, 10_000
    hits = 0
    for s in range(seeds):
        idx = sample_triplet_indices(b, Rng(s))
        neg = idx[:, 1:, :]
        hits += int(np.sum((neg[..., 1] == neg[..., 0]) & (neg[..., 2] == neg[..., 0])))
    n = seeds * b * (b - 1)
    p = 1.0 / b**2
    se = math.sqrt(p * (1 - p) / n)
    assert abs(hits / n - p) < 3 * se


def test_anchor_triplet_count():
    # brute-force: triplets (i, j, k) over B samples with at least one index equal to the anchor
    for b in range(1, 7):
        brute = sum(1 for i in range(b) for j in range(b) for k in range(b) if 0 in (i, j, k))
        assert anchor_triplet_count(b) == brute == 3 * b * b - 3 * b + 1


# -- triplet logits ------------------------------------------------------------------------


def test_identical_modalities_give_three_on_positive_column():
    x = unit_rows(np.random.default_rng(2), 6, 10)
    lam = triplet_lambda_logits(EmbeddingBatch(x, x, x), sample_triplet_indices(6, Rng(0))).data
    np.testing.assert_allclose(lam[:, 0], 3.0, atol=1e-12)


def test_orthonormal_triplet_gives_one():
    e = np.eye(3, 5)
    lam = triplet_lambda_logits(EmbeddingBatch(e[[0]], e[[1]], e[[2]]), sample_triplet_indices(1, Rng(0))).data
    assert lam[0, 0] == pytest.approx(1.0, abs=1e-14)


def test_logits_match_explicit_stacking():
    rng = np.random.default_rng(3)
    batch = random_batch(rng, 12, 20)
    idx = sample_triplet_indices(12, Rng(1))
    lam = triplet_lambda_logits(batch, idx).data
    xs = [batch.x_img.data, batch.x_2d.data, batch.x_3d.data]
    for bb in range(12):
        for i in range(12):
            m = np.stack([xs[j][idx[bb, i, j]] for j in range(3)])
            assert lam[bb, i] == pytest.approx(top_singular_value(m)[1], abs=1e-10)
            assert lam[bb, i] == pytest.approx(lambda1_bruteforce(m), abs=1e-10)
    assert lam.min() >= 1 - 1e-12 and lam.max() <= 3 + 1e-12


def test_logits_index_shape_mismatch():
    batch = random_batch(np.random.default_rng(0), 4, 3)
    with pytest.raises(ValidationError):
        triplet_lambda_logits(batch, sample_triplet_indices(5, Rng(0)))


# -- triplet InfoNCE ----------------------------------------------------------------------


@pytest.mark.parametrize("b", [2, 8, 64])
def test_triplet_uniform_logits(b):
    assert info_nce_triplet(np.full((b, b), 2.2), 0.07).item() == pytest.approx(math.log(b), abs=1e-10)


def test_triplet_two_sample_value():
    lam = np.array([[3.0, 1.0], [3.0, 1.0]])
    assert info_nce_triplet(lam, 1.0).item() == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-14)
    assert info_nce_triplet(lam, 1.0).item() == pytest.approx(0.1269, abs=1e-4)


def test_triplet_temperature_limit():
    lam = np.array([[3.0, 1.0, 1.5], [2.5, 1.0, 2.0], [2.0, 1.9, 1.0]])
    assert info_nce_triplet(lam, 1e-3).item() < 1e-12


# -- combined loss -----------------------------------------------------------------------------


def test_alpha_zero_reduces_exactly_to_pair_sum():
    rng = np.random.default_rng(4)
    batch = random_batch(rng, 16, 8)
    temp = Temperature(0.2, (0.2, 1e4))
    total = contrastive_loss(batch, temp, 0.0, Rng(0), PAIRS, use_triplet=True).item()
    pairs = sum(info_nce_pair(batch.get(p.split("-")[0]), batch.get(p.split("-")[1]), temp).item() for p in PAIRS)
    parts = [info_nce_pair(batch.get(p.split("-")[0]), batch.get(p.split("-")[1]), temp) for p in PAIRS]
    exact = ops.add(ops.add(parts[0], parts[1]), parts[2]).item()
    assert total == exact
    assert total == pytest.approx(pairs, abs=1e-12)


def test_uniform_everything():
    b = 8
    x = np.tile(unit_rows(np.random.default_rng(5), 1, 4), (b, 1))
    alpha = 0.7
    total = contrastive_loss(EmbeddingBatch(x, x, x), 0.3, alpha, Rng(0), PAIRS, True).item()
    assert total == pytest.approx((3 + alpha) * math.log(b), abs=1e-10)


def test_empty_active_pairs():
    with pytest.raises(ConfigError):
        contrastive_loss(random_batch(np.random.default_rng(0), 4, 3), 1.0, 1.0, Rng(0), [], False)


def test_terms_keys_and_combine():
    batch = random_batch(np.random.default_rng(6), 8, 5)
    terms = contrastive_terms(batch, 0.5, 1.0, Rng(0), ["img-2d", "2d-3d"], True)
    assert set(terms) == {"pair_img-2d", "pair_2d-3d", "triplet"}
    expect = terms["pair_img-2d"].item() + terms["pair_2d-3d"].item() + 2.0 * terms["triplet"].item()
    assert combine_terms(terms, 2.0).item() == pytest.approx(expect, abs=1e-12)


def test_losses_invariant_under_common_rotation():
    rng = np.random.default_rng(7)
    batch = random_batch(rng, 10, 3)
    q = random_rotation(rng)
    rot = EmbeddingBatch(batch.x_img.data @ q, batch.x_2d.data @ q, batch.x_3d.data @ q)
    a = contrastive_terms(batch, 0.4, 1.0, Rng(3), PAIRS, True)
    b = contrastive_terms(rot, 0.4, 1.0, Rng(3), PAIRS, True)
    for k in a:
        assert a[k].item() == pytest.approx(b[k].item(), abs=1e-12)


def test_positive_lambda_three_iff_parallel():
    rng = np.random.default_rng(8)
    x = unit_rows(rng, 5, 6)
    y = x.copy()
    y[2] = unit_rows(rng, 1, 6)[0]
    lam = triplet_lambda_logits(EmbeddingBatch(x, x, y), sample_triplet_indices(5, Rng(0))).data[:, 0]
    assert np.allclose(np.delete(lam, 2), 3.0, atol=1e-12)
    assert lam[2] < 3.0 - 1e-6


def test_contrastive_loss_gradient_wrt_raw_embeddings():
    rng = np.random.default_rng(9)
    b, d = 6, 5
    raw = rng.normal(size=3 * b * d)
    temp_inv = 1.0 / 0.3

    def f(x):
        parts = [ops.l2_normalize(ops.reshape(ops.gather(x, slice(k * b * d, (k + 1) * b * d)), (b, d)))
                 for k in range(3)]
        batch = EmbeddingBatch(*parts)
        return contrastive_loss(batch, Tensor(np.asarray(temp_inv)), 1.0, Rng(11), PAIRS, True)

    assert grad_check(f, raw) < 1e-4


def test_temperature_gets_gradient():
    from trialign.autograd import Tape
    batch = random_batch(np.random.default_rng(10), 8, 4)
    temp = Temperature(0.5)
    with Tape() as tape:
        loss = contrastive_loss(batch, temp, 1.0, Rng(0), PAIRS, True)
    g = tape.backward(loss)[temp.param.name]
    assert np.isfinite(g) and g != 0.0
