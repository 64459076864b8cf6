import numpy as np
import pytest

import oracles
from reidlab.autodiff import Tensor, finite_diff_check, tensor_sum, multiply
from reidlab.pooling import GemLayer, gem_pool


def feature_leaf(values):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)


def pool_values(x, p):
    layer = GemLayer(p=Tensor(np.full(1, float(p)), requires_grad=True))
    return gem_pool(feature_leaf(np.asarray(x, dtype=float)[None, :]), layer).values[0]


class TestGemValues:
    def test_p_one_is_arithmetic_mean(self):
        assert pool_values([1.0, 2.0, 3.0, 4.0], 1.0) == pytest.approx(2.5, abs=1e-12)

    def test_p_three_cube_root_example(self):
        got = pool_values([1.0, 2.0, 3.0, 4.0], 3.0)
        assert got == pytest.approx(25.0 ** (1.0 / 3.0), abs=1e-12)
        assert got == pytest.approx(2.9240, abs=5e-5)

    def test_large_p_approaches_max_64_values(self):
        # oracle-computed ratio for 64 evenly spread values at p = 64:
        # the deficit below the max is 5.55 percent
        x = np.linspace(0.1, 1.0, 64)
        got = pool_values(x, 64.0)
        want = oracles.gem_loop(x, 64.0)
        assert got == pytest.approx(want, rel=1e-12)
        assert got == pytest.approx(0.9444638368832892, abs=1e-12)

    def test_large_p_within_five_percent_on_16_values(self):
        x = np.linspace(0.1, 1.0, 16)
        got = pool_values(x, 64.0)
        assert got >= 0.95 * x.max()

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_scalar_oracle(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.05, 3.0, 17)
        p = rng.uniform(0.5, 6.0)
        assert pool_values(x, p) == pytest.approx(oracles.gem_loop(x, p), rel=1e-12)

    def test_per_channel_exponents(self):
        feats = feature_leaf([[1.0, 2.0, 3.0, 4.0], [1.0, 2.0, 3.0, 4.0]])
        layer = GemLayer(p=Tensor(np.array([1.0, 3.0]), requires_grad=True))
        out = gem_pool(feats, layer).values
        assert out[0] == pytest.approx(2.5, abs=1e-12)
        assert out[1] == pytest.approx(25.0 ** (1.0 / 3.0), abs=1e-12)

    def test_batched_input(self):
        rng = np.random.default_rng(9)
        feats = feature_leaf(rng.uniform(0.1, 1.0, (5, 3, 7)))
        layer = GemLayer.per_channel(3, init=2.0)
        out = gem_pool(feats, layer)
        assert out.shape == (5, 3)
        for b in range(5):
            for c in range(3):
                want = oracles.gem_loop(feats.values[b, c], 2.0)
                assert out.values[b, c] == pytest.approx(want, rel=1e-12)


class TestGemProperties:
    @pytest.mark.parametrize("seed", range(10))
    def test_monotone_in_p(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.05, 2.0, 12)
        grid = [0.5, 1.0, 1.5, 2.0, 3.0, 5.0, 8.0, 16.0, 32.0]
        vals = [pool_values(x, p) for p in grid]
        diffs = np.diff(vals)
        assert (diffs >= -1e-12).all()

    @pytest.mark.parametrize("lam", [0.5, 2.0, 7.5])
    def test_homogeneity(self, lam):
        rng = np.random.default_rng(3)
        x = rng.uniform(0.1, 1.0, 9)
        base = pool_values(x, 3.0)
        scaled = pool_values(lam * x, 3.0)
        assert scaled == pytest.approx(lam * base, rel=1e-10)

    def test_projection_floors_p(self):
        layer = GemLayer.per_channel(4, init=3.0)
        layer.p.values[:] = [-1.0, 0.05, 0.5, 3.0]
        layer.project()
        np.testing.assert_allclose(layer.p.values, [0.1, 0.1, 0.5, 3.0])

    def test_empty_channel_rejected(self):
        layer = GemLayer.shared()
        with pytest.raises(ValueError, match="empty channel"):
            gem_pool(feature_leaf(np.zeros((3, 0))), layer)

    def test_channel_count_mismatch_rejected(self):
        layer = GemLayer.per_channel(4)
        with pytest.raises(ValueError, match="channels"):
            gem_pool(feature_leaf(np.ones((3, 5))), layer)


@pytest.mark.parametrize("seed", range(10))
def test_gradients_wrt_inputs_and_exponent(seed):
    rng = np.random.default_rng(seed)
    feats = feature_leaf(rng.uniform(0.01, 2.0, (3, 6)) + 0.01)
    p = Tensor(rng.uniform(0.8, 4.0, 3), requires_grad=True)
    c = rng.uniform(-1, 1, 3)

    def f(x, p_leaf):
        return tensor_sum(multiply(gem_pool(x, GemLayer(p=p_leaf)), c))

    report = finite_diff_check(f, [feats, p], h=1e-5, tol=1e-4,
                               names=["features", "p"])
    assert report.passed, report
