import numpy as np
import pytest

import oracles
from reidlab.swag import (LayoutMismatchError, SwagPosterior, WeightLayout,
                          WeightVector, bma_predict, collect_snapshot,
                          derive_sample_seed, load_posterior, save_posterior,
                          swa_weights, swag_sample)


def layout(n=1):
    return WeightLayout((("w", (n,)),))


def posterior_from(snapshots, lay=None):
    lay = lay or layout(np.asarray(snapshots[0]).size)
    post = SwagPosterior(layout=lay)
    for snap in snapshots:
        collect_snapshot(post, WeightVector(np.asarray(snap, dtype=float), lay))
    return post


class TestMoments:
    def test_two_snapshot_mean(self):
        post = posterior_from([[1.0], [3.0]])
        assert swa_weights(post).values[0] == pytest.approx(2.0, abs=1e-15)

    def test_two_snapshot_second_moment_and_variance(self):
        post = posterior_from([[1.0], [3.0]])
        assert post.second_moment[0] == pytest.approx(5.0, abs=1e-15)
        assert post.diag_variance()[0] == pytest.approx(1.0, abs=1e-12)

    def test_identical_snapshots_variance_floor(self):
        post = posterior_from([[2.5]] * 7)
        assert swa_weights(post).values[0] == pytest.approx(2.5, abs=1e-15)
        assert post.diag_variance()[0] == post.variance_floor
        assert post.floor_hits() == 1

    def test_single_snapshot_variance_is_floor_everywhere(self):
        post = posterior_from([np.arange(5.0)])
        np.testing.assert_array_equal(post.diag_variance(),
                                      np.full(5, post.variance_floor))

    @pytest.mark.parametrize("seed", range(5))
    def test_streaming_equals_offline(self, seed):
        rng = np.random.default_rng(seed)
        snaps = [rng.standard_normal(11) for _ in range(15)]
        post = posterior_from(snaps)
        mean, second = oracles.offline_moments(snaps)
        np.testing.assert_allclose(post.mean, mean, atol=1e-10)
        np.testing.assert_allclose(post.second_moment, second, atol=1e-10)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(8)
        snaps = [rng.standard_normal(6) for _ in range(9)]
        a = posterior_from(snaps)
        b = posterior_from(list(reversed(snaps)))
        np.testing.assert_allclose(a.mean, b.mean, atol=1e-12)

    def test_layout_mismatch_rejected(self):
        post = SwagPosterior(layout=layout(3))
        with pytest.raises(LayoutMismatchError):
            collect_snapshot(post, WeightVector(np.zeros(2), layout(2)))

    def test_empty_posterior_rejected(self):
        with pytest.raises(ValueError, match="no snapshots"):
            swa_weights(SwagPosterior(layout=layout()))


class TestSampling:
    def test_scale_zero_returns_mean_bitwise(self):
        post = posterior_from([[1.0, -2.0], [3.0, 4.0]])
        sample = swag_sample(post, 0.0, seed=123)
        assert np.array_equal(sample.values, post.mean)

    def test_fixed_seed_reproducible(self):
        post = posterior_from([[1.0], [3.0]])
        a = swag_sample(post, 1.0, seed=7)
        b = swag_sample(post, 1.0, seed=7)
        assert np.array_equal(a.values, b.values)

    def test_monte_carlo_moments(self):
        post = posterior_from([[1.0], [3.0]])  # mean 2, variance 1
        samples = np.array([swag_sample(post, 1.0, seed=s).values[0]
                            for s in range(10_000)])
        assert samples.mean() == pytest.approx(2.0, abs=0.05)
        assert samples.var() == pytest.approx(1.0, abs=0.1)

    def test_derived_seeds_differ(self):
        a = derive_sample_seed(0, 0)
        b = derive_sample_seed(0, 1)
        assert (np.random.default_rng(a).standard_normal(4)
                != np.random.default_rng(b).standard_normal(4)).any()


class TestBmaPredict:
    def test_single_sample_scale_zero_equals_swa_output(self):
        post = posterior_from([[1.0, 2.0], [3.0, 0.0]])

        def model(weights, x):
            return weights.values @ x

        x = np.array([[1.0], [1.0]])
        got = bma_predict(post, 1, model, x, scale=0.0)
        assert got == pytest.approx(post.mean @ x)

    def test_linear_model_equals_model_at_sampled_mean(self):
        rng = np.random.default_rng(5)
        snaps = [rng.standard_normal(4) for _ in range(6)]
        post = posterior_from(snaps)

        def model(weights, x):
            return x @ weights.values

        x = rng.standard_normal((3, 4))
        num = 16
        got = bma_predict(post, num, model, x, scale=0.7, seed=11)
        sampled = [swag_sample(post, 0.7, derive_sample_seed(11, s)).values
                   for s in range(num)]
        want = x @ np.mean(sampled, axis=0)
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_more_samples_reduce_spread(self):
        """Average gap between two independent BMA estimates shrinks as the
        sample count grows."""
        rng = np.random.default_rng(6)
        snaps = [rng.standard_normal(8) for _ in range(10)]
        post = posterior_from(snaps)

        def model(weights, x):
            return x @ weights.values

        x = rng.standard_normal((4, 8))

        def gap(num_samples, pairs=20):
            gaps = []
            for trial in range(pairs):
                a = bma_predict(post, num_samples, model, x, scale=1.0,
                                seed=1000 + trial)
                b = bma_predict(post, num_samples, model, x, scale=1.0,
                                seed=5000 + trial)
                gaps.append(np.linalg.norm(a - b))
            return np.mean(gaps)

        assert gap(64) < gap(8)

    def test_renormalize_rows(self):
        post = posterior_from([[3.0, 4.0]])

        def model(weights, x):
            return np.tile(weights.values, (2, 1))

        out = bma_predict(post, 1, model, None, scale=0.0, renormalize=True)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-12)


class TestSerialization:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        lay = WeightLayout((("a", (3, 2)), ("b", (4,))))
        post = SwagPosterior(layout=lay)
        for _ in range(5):
            collect_snapshot(post, WeightVector(rng.standard_normal(10), lay))
        path = tmp_path / "posterior.bin"
        save_posterior(post, path)
        loaded = load_posterior(path)
        assert loaded.count == post.count
        assert loaded.layout == post.layout
        np.testing.assert_array_equal(loaded.mean, post.mean)
        np.testing.assert_array_equal(loaded.second_moment, post.second_moment)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTAPOST" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            load_posterior(path)

    def test_unknown_version_rejected(self, tmp_path):
        post = posterior_from([[1.0], [2.0]])
        path = tmp_path / "posterior.bin"
        save_posterior(post, path)
        blob = bytearray(path.read_bytes())
        blob[8] = 99  # bump the little-endian version field
        path.write_bytes(bytes(blob))
        with pytest.raises(ValueError, match="version"):
            load_posterior(path)

    def test_segment_access(self):
        lay = WeightLayout((("a", (2, 2)), ("b", (3,))))
        wv = WeightVector(np.arange(7.0), lay)
        np.testing.assert_array_equal(wv.segment("a"), [[0.0, 1.0], [2.0, 3.0]])
        np.testing.assert_array_equal(wv.segment("b"), [4.0, 5.0, 6.0])
