import math

import numpy as np
import pytest

import oracles
from reidlab.autodiff import Tensor, backward, finite_diff_check
from reidlab.losses import (EmbeddingBatch, SmoothingConfig, TripletConfig,
                            batch_hard_pre_hinge, batch_soft_pre_hinge,
                            batch_soft_weights, cross_entropy_smoothed,
                            pairwise_distances, positive_negative_masks,
                            triplet_batch_all, triplet_batch_hard,
                            triplet_batch_soft, triplet_loss, triplet_naive,
                            triplet_soft_margin)


def leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def pk_batch(seed, num_ids=8, per_id=4, dim=4, scale=1.0):
    rng = np.random.default_rng(seed)
    x = leaf(rng.uniform(-scale, scale, (num_ids * per_id, dim)))
    ids = np.repeat(np.arange(num_ids), per_id)
    return x, ids


def separated_batch(gap=3.0, jitter=0.05, num_ids=2, per_id=2, dim=3, seed=0):
    """Tight same-id clusters far apart: batch-hard loss is zero at any
    sane margin."""
    rng = np.random.default_rng(seed)
    rows, ids = [], []
    for i in range(num_ids):
        center = np.zeros(dim)
        center[0] = i * gap
        for _ in range(per_id):
            rows.append(center + jitter * rng.standard_normal(dim))
            ids.append(i)
    return leaf(np.array(rows)), np.array(ids)


class TestPairwiseDistances:
    def test_three_four_five(self):
        x = leaf([[0.0, 0.0], [3.0, 4.0]])
        d = pairwise_distances(x)
        assert d.values[0, 1] == pytest.approx(5.0, abs=1e-12)

    def test_symmetric_zero_diagonal(self):
        x, _ = pk_batch(3)
        d = pairwise_distances(x).values
        np.testing.assert_array_equal(d, d.T)
        np.testing.assert_array_equal(np.diag(d), 0.0)

    def test_matches_double_loop_oracle(self):
        x, _ = pk_batch(5)
        d = pairwise_distances(x).values
        np.testing.assert_allclose(d, oracles.pairwise_euclidean_loop(x.values),
                                   atol=1e-10)

    def test_squared_variant(self):
        x, _ = pk_batch(6)
        d2 = pairwise_distances(x, "squared-euclidean").values
        np.testing.assert_allclose(
            d2, oracles.pairwise_euclidean_loop(x.values) ** 2, atol=1e-9)

    def test_accepts_embedding_batch(self):
        x, ids = pk_batch(7, num_ids=2, per_id=2)
        batch = EmbeddingBatch(embeddings=x, ids=ids)
        d = pairwise_distances(batch)
        assert d.shape == (4, 4)

    def test_single_row_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            pairwise_distances(leaf([[1.0, 2.0]]))

    def test_coincident_rows_keep_finite_gradient(self):
        x = leaf([[1.0, 2.0], [1.0, 2.0], [0.0, 0.0]])
        d = pairwise_distances(x)
        backward(d.sum())
        assert np.isfinite(x.grad).all()
        assert d.values[0, 1] == 0.0


class TestTripletNaive:
    def test_margin_exactly_met(self):
        out = triplet_naive(leaf([0.2]), leaf([0.5]), 0.3)
        assert out.values[0] == 0.0

    def test_direct_substitution(self):
        out = triplet_naive(leaf([0.5]), leaf([0.2]), 0.3)
        assert out.values[0] == pytest.approx(0.6, abs=1e-15)

    def test_equal_distances_zero_margin(self):
        out = triplet_naive(leaf([0.7]), leaf([0.7]), 0.0)
        assert out.values[0] == 0.0


class TestBatchHard:
    def test_fully_separated_zero_loss(self):
        x, ids = separated_batch()
        d = pairwise_distances(x)
        assert triplet_batch_hard(d, ids, 0.3).item() == 0.0

    def test_separated_with_large_margin(self):
        # positives ~0.1 apart, negatives ~1.0 apart: loss = m + 0.1 - 1.0
        rows = np.array([[0.0, 0.0], [0.1, 0.0], [1.0, 0.0], [1.1, 0.0]])
        ids = np.array([0, 0, 1, 1])
        d = pairwise_distances(leaf(rows))
        loss = triplet_batch_hard(d, ids, 1.0).item()
        # per anchor: 1.0 + 0.1 - 0.9 or 1.0 + 0.1 - 1.0
        manual = oracles.batch_hard_loop(d.values, ids, 1.0)
        assert loss == pytest.approx(manual, abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_enumeration_oracle(self, seed):
        x, ids = pk_batch(seed)
        d = pairwise_distances(x)
        got = triplet_batch_hard(d, ids, 0.3).item()
        want = oracles.batch_hard_loop(d.values, ids, 0.3)
        assert got == pytest.approx(want, abs=1e-10)

    def test_gradient_only_through_selected_pair(self):
        x, ids = pk_batch(11, num_ids=3, per_id=3)
        dmat = Tensor(pairwise_distances(x).values, requires_grad=True)
        loss = triplet_batch_hard(dmat, ids, 5.0)  # margin large: all active
        backward(loss)
        pos, neg = positive_negative_masks(ids)
        n = dmat.shape[0]
        touched = np.zeros((n, n), dtype=bool)
        for a in range(n):
            touched[a, np.where(pos[a], dmat.values[a], -np.inf).argmax()] = True
            touched[a, np.where(neg[a], dmat.values[a], np.inf).argmin()] = True
        assert (dmat.grad[touched] != 0.0).all()
        assert (dmat.grad[~touched] == 0.0).all()

    def test_anchor_without_positive_rejected(self):
        x = leaf(np.random.default_rng(0).uniform(-1, 1, (3, 4)))
        ids = np.array([0, 1, 1])
        with pytest.raises(ValueError, match="anchor 0 has no positive"):
            triplet_batch_hard(pairwise_distances(x), ids, 0.3)

    def test_anchor_without_negative_rejected(self):
        x = leaf(np.random.default_rng(0).uniform(-1, 1, (3, 4)))
        ids = np.array([0, 0, 0])
        with pytest.raises(ValueError, match="anchor 0 has no negative"):
            triplet_batch_hard(pairwise_distances(x), ids, 0.3)


class TestBatchSoft:
    def test_two_positive_weights_example(self):
        # positives at d = 0.2 and 0.4: weights e^0.2, e^0.4 normalized
        d = np.array([0.2, 0.4])
        w = np.exp(d) / np.exp(d).sum()
        np.testing.assert_allclose(w, [0.4502, 0.5498], atol=5e-5)
        # construct a 1-anchor view through the library path
        rows = np.array([[0.0, 0.0], [0.2, 0.0], [0.0, 0.4],
                         [5.0, 5.0], [5.0, 6.0]])
        ids = np.array([0, 0, 0, 1, 1])
        dist = pairwise_distances(leaf(rows))
        w_pos, _ = batch_soft_weights(dist, ids)
        got = w_pos.values[0][[1, 2]]
        dd = dist.values[0][[1, 2]]
        want = np.exp(dd) / np.exp(dd).sum()
        np.testing.assert_allclose(got, want, atol=1e-12)
        # farther positive upweighted
        assert got[np.argmax(dd)] > got[np.argmin(dd)]

    def test_equidistant_positives_equal_weights(self):
        rows = np.array([[0.0, 0.0], [0.3, 0.0], [-0.3, 0.0],
                         [5.0, 5.0], [5.0, 6.0]])
        ids = np.array([0, 0, 0, 1, 1])
        w_pos, _ = batch_soft_weights(pairwise_distances(leaf(rows)), ids)
        np.testing.assert_allclose(w_pos.values[0][[1, 2]], 0.5, atol=1e-12)

    def test_single_pos_single_neg_reduces_to_naive(self):
        # anchor 0: one positive, two equidistant negatives, so the soft
        # weights collapse to 1 and the per-anchor term equals the naive loss
        rows = np.array([[0.0, 0.0], [0.4, 0.0], [0.0, 1.5], [0.0, -1.5]])
        ids = np.array([0, 0, 1, 1])
        d = pairwise_distances(leaf(rows))
        arg0 = batch_soft_pre_hinge(d, ids, 0.3).values[0]
        naive0 = triplet_naive(leaf([d.values[0, 1]]), leaf([d.values[0, 2]]),
                               0.3).item()
        assert max(0.0, arg0) == pytest.approx(naive0, abs=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_weight_normalization(self, seed):
        x, ids = pk_batch(seed)
        w_pos, w_neg = batch_soft_weights(pairwise_distances(x), ids)
        np.testing.assert_allclose(w_pos.values.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(w_neg.values.sum(axis=1), 1.0, atol=1e-12)

    def test_shift_stabilization_invariance(self):
        """Weights computed with the max-shift equal an unshifted scalar
        recomputation to 1e-12."""
        x, ids = pk_batch(21)
        dist = pairwise_distances(x)
        w_pos, w_neg = batch_soft_weights(dist, ids)
        pos, neg = positive_negative_masks(ids)
        d = dist.values
        for a in range(d.shape[0]):
            for j in np.nonzero(pos[a])[0]:
                plain = math.exp(d[a, j]) / sum(math.exp(d[a, k])
                                                for k in np.nonzero(pos[a])[0])
                assert abs(w_pos.values[a, j] - plain) <= 1e-12
            for j in np.nonzero(neg[a])[0]:
                plain = math.exp(-d[a, j]) / sum(math.exp(-d[a, k])
                                                 for k in np.nonzero(neg[a])[0])
                assert abs(w_neg.values[a, j] - plain) <= 1e-12

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_scalar_oracle(self, seed):
        x, ids = pk_batch(seed)
        d = pairwise_distances(x)
        got = triplet_batch_soft(d, ids, 0.3).item()
        want = oracles.batch_soft_loop(d.values, ids, 0.3)
        assert got == pytest.approx(want, abs=1e-10)

    @pytest.mark.parametrize("seed", range(10))
    def test_soft_leq_hard_pre_hinge(self, seed):
        x, ids = pk_batch(seed)
        d = pairwise_distances(x)
        soft_args = batch_soft_pre_hinge(d, ids, 0.3).values
        hard_args = batch_hard_pre_hinge(d, ids, 0.3).values
        assert (soft_args <= hard_args + 1e-12).all()


class TestSoftMargin:
    def test_balanced_arg_gives_log_two(self):
        # anchor 0: positive at distance 1, both negatives at distance 1,
        # so the weighted sums cancel and softplus(0) = ln 2
        rows = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        ids = np.array([0, 0, 1, 1])
        d = pairwise_distances(leaf(rows))
        args = oracles.batch_soft_terms_loop(d.values, ids, 0.0)
        assert args[0] == pytest.approx(0.0, abs=1e-12)
        lib_args = batch_soft_pre_hinge(d, ids, 0.0).values
        assert math.log1p(math.exp(lib_args[0])) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_positive_on_separated_batch_and_gradient_direction(self):
        x, ids = separated_batch()
        d = pairwise_distances(x)
        assert triplet_batch_hard(d, ids, 0.3).item() == 0.0
        loss = triplet_soft_margin(d, ids)
        assert loss.item() > 0.0
        backward(loss)
        # moving a positive toward its anchor must decrease the loss:
        # gradient of x_p has positive dot with (x_p - x_a)
        vals = x.values
        g = x.grad
        same0 = np.nonzero(ids == ids[0])[0]
        a, p = same0[0], same0[1]
        assert g[p] @ (vals[p] - vals[a]) > 0.0

    def test_finite_difference_sign_check_on_separated_batch(self):
        x, ids = separated_batch(seed=3)
        h = 1e-6
        base = triplet_soft_margin(pairwise_distances(x), ids).item()
        vals = x.values.copy()
        same0 = np.nonzero(ids == ids[0])[0]
        a, p = same0[0], same0[1]
        step = (vals[p] - vals[a])
        step /= np.linalg.norm(step)
        x.values[p] += h * step
        moved = triplet_soft_margin(pairwise_distances(x), ids).item()
        x.values[...] = vals
        assert moved > base  # farther positive -> larger loss

    @pytest.mark.parametrize("seed", range(10))
    def test_strictly_positive(self, seed):
        x, ids = pk_batch(seed)
        assert triplet_soft_margin(pairwise_distances(x), ids).item() > 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_scalar_oracle(self, seed):
        x, ids = pk_batch(seed)
        d = pairwise_distances(x)
        got = triplet_soft_margin(d, ids).item()
        want = oracles.soft_margin_loop(d.values, ids)
        assert got == pytest.approx(want, abs=1e-10)

    def test_weighted_gradient_signs(self):
        """On a separated batch, increasing any positive distance increases
        the loss and increasing any negative distance decreases it."""
        x, ids = separated_batch(seed=5, num_ids=2, per_id=3)
        d = pairwise_distances(x)
        pos, neg = positive_negative_masks(ids)
        # loss as a function of the distance matrix directly
        dmat = Tensor(d.values.copy(), requires_grad=True)
        loss2 = triplet_soft_margin(dmat, ids)
        backward(loss2)
        sym = dmat.grad + dmat.grad.T  # distance matrix is symmetric
        assert (sym[pos] > 0).all()
        assert (sym[neg] < 0).all()


class TestTripletConfigDispatch:
    def test_soft_margin_ignores_margin(self):
        x, ids = pk_batch(31)
        d = pairwise_distances(x)
        a = triplet_loss(d, ids, TripletConfig("soft-margin", margin=0.1))
        b = triplet_loss(d, ids, TripletConfig("soft-margin", margin=7.0))
        assert a.item() == b.item()

    def test_batch_all_matches_loop(self):
        x, ids = pk_batch(33, num_ids=4, per_id=2)
        d = pairwise_distances(x)
        got = triplet_batch_all(d, ids, 0.3).item()
        want = oracles.batch_all_loop(d.values, ids, 0.3)
        assert got == pytest.approx(want, abs=1e-10)

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError, match="variant"):
            TripletConfig("quadruplet")

    def test_negative_margin_rejected(self):
        with pytest.raises(ValueError, match="margin"):
            TripletConfig("batch-hard", margin=-0.1)


class TestCrossEntropySmoothed:
    def test_epsilon_zero_is_plain_cross_entropy(self):
        rng = np.random.default_rng(2)
        logits = rng.uniform(-2, 2, (5, 7))
        targets = rng.integers(0, 7, 5)
        got = cross_entropy_smoothed(leaf(logits), targets,
                                     SmoothingConfig(0.0, 7)).item()
        want = 0.0
        for row, t in zip(logits, targets):
            z = row - row.max()
            want -= z[t] - math.log(np.exp(z).sum())
        want /= 5
        assert got == pytest.approx(want, abs=1e-12)

    def test_uniform_logits_any_epsilon(self):
        logits = np.zeros((3, 4))
        targets = np.array([0, 1, 2])
        for eps in (0.0, 0.1, 0.5):
            got = cross_entropy_smoothed(leaf(logits), targets,
                                         SmoothingConfig(eps, 4)).item()
            assert got == pytest.approx(math.log(4.0), abs=1e-12)

    def test_matches_scalar_oracle_many_classes(self):
        rng = np.random.default_rng(3)
        logits = rng.uniform(-3, 3, (6, 751))
        targets = rng.integers(0, 751, 6)
        got = cross_entropy_smoothed(leaf(logits), targets,
                                     SmoothingConfig(0.1, 751)).item()
        want = oracles.cross_entropy_smoothed_loop(logits, targets, 0.1, 751)
        assert got == pytest.approx(want, rel=1e-10)

    def test_target_distribution_sums_to_one(self):
        cfg = SmoothingConfig(0.37, 13)
        q = cfg.target_distribution(np.arange(13) % 13)
        np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-12)

    def test_epsilon_ge_one_rejected(self):
        with pytest.raises(ValueError, match="epsilon"):
            SmoothingConfig(1.0, 10)

    def test_out_of_range_target_rejected(self):
        with pytest.raises(ValueError, match="range"):
            cross_entropy_smoothed(leaf(np.zeros((1, 3))), [3],
                                   SmoothingConfig(0.1, 3))


@pytest.mark.parametrize("seed", range(10))
def test_all_losses_pass_finite_diff(seed):
    from reidlab.gradcheck import default_suite, run_case
    cases = [c for c in default_suite() if c.name.startswith("loss.")]
    for case in cases:
        result = run_case(case, [seed])
        assert result["passed"], result
