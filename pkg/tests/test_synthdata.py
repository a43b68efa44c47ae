import numpy as np
import pytest
from scipy import stats

from cot.synthdata import (
    ConditionalGaussianSpec,
    JointDataset,
    RngStream,
    dataset_from_csv,
    dataset_to_csv,
    gen_conditional_gaussian,
    gen_toy_cell,
    gen_toy_classification,
    sample_beta,
)

# 1% two-sided KS critical value, asymptotic: sqrt(-ln(0.005)/2) / sqrt(n)
KS_CRIT_1PCT = np.sqrt(-0.5 * np.log(0.005))


class TestRngStream:
    def test_determinism(self):
        a = RngStream(42).normals((1000,))
        b = RngStream(42).normals((1000,))
        assert np.array_equal(a, b)

    def test_children_are_independent_of_draw_order(self):
        root = RngStream(7)
        c1 = root.child(3).uniforms(10)
        root.uniforms(100)  # consume from the parent
        c2 = RngStream(7).child(3).uniforms(10)
        assert np.array_equal(c1, c2)

    def test_distinct_children_differ(self):
        root = RngStream(7)
        assert not np.array_equal(root.child(0).uniforms(10), root.child(1).uniforms(10))

    def test_normals_moments(self):
        z = RngStream(1).normals((200000,))
        assert abs(z.mean()) < 3.0 / np.sqrt(z.size)
        assert abs(z.var() - 1.0) < 3.0 * np.sqrt(2.0 / z.size)

    def test_normals_ks(self):
        z = RngStream(2).normals((10000,))
        d = stats.kstest(z, "norm").statistic
        assert d < KS_CRIT_1PCT / np.sqrt(z.size)

    def test_gamma_ks(self):
        for alpha in (0.5, 1.0, 2.5):
            g = RngStream(3).gammas(alpha, 10000)
            d = stats.kstest(g, "gamma", args=(alpha,)).statistic
            assert d < KS_CRIT_1PCT / np.sqrt(g.size), f"alpha={alpha}"

    def test_permutation(self):
        perm = RngStream(4).permutation(100)
        assert sorted(perm.tolist()) == list(range(100))

    def test_categorical_frequencies(self):
        probs = np.array([0.5, 0.3, 0.2])
        draws = RngStream(5).categorical(probs, 100000)
        freq = np.bincount(draws, minlength=3) / draws.size
        assert np.abs(freq - probs).max() < 0.01


class TestBeta:
    def test_uniform_case_mean(self):
        x = sample_beta(RngStream(10), 1.0, 1.0, 100000)
        se = np.sqrt(1.0 / 12.0 / x.size)
        assert abs(x.mean() - 0.5) < 3.0 * se

    def test_beta24_mean(self):
        x = sample_beta(RngStream(11), 2.0, 4.0, 100000)
        mean, var = 2.0 / 6.0, (2.0 * 4.0) / (36.0 * 7.0)
        assert abs(x.mean() - mean) < 3.0 * np.sqrt(var / x.size)

    def test_beta24_ks_at_one_percent(self):
        x = sample_beta(RngStream(12), 2.0, 4.0, 10000)
        d = stats.kstest(x, "beta", args=(2.0, 4.0)).statistic
        assert d < KS_CRIT_1PCT / np.sqrt(x.size)

    def test_beta42_ks_at_one_percent(self):
        x = sample_beta(RngStream(13), 4.0, 2.0, 10000)
        d = stats.kstest(x, "beta", args=(4.0, 2.0)).statistic
        assert d < KS_CRIT_1PCT / np.sqrt(x.size)

    def test_support(self):
        x = sample_beta(RngStream(14), 2.0, 4.0, 10000)
        assert x.min() > 0.0 and x.max() < 1.0

    def test_invalid_shapes(self):
        with pytest.raises(ValueError):
            sample_beta(RngStream(0), 0.0, 1.0, 5)
        with pytest.raises(ValueError):
            sample_beta(RngStream(0), 1.0, -2.0, 5)


class TestConditionalGaussian:
    def test_zero_slope_marginal_mean(self):
        spec = ConditionalGaussianSpec(2.0, 2.0, 0.0, 0.0, 0.0, 1.0)
        data = gen_conditional_gaussian(RngStream(20), spec, 100000)
        assert abs(data.Y.mean()) < 3.0 / np.sqrt(len(data))

    def test_conditional_mean_in_bin(self):
        # Conditioning near x = 0.5 the mean of y should be near mean(0.5) = 0.
        spec = ConditionalGaussianSpec(2.0, 4.0, 4.0, -2.0, 0.0, 1.0)
        data = gen_conditional_gaussian(RngStream(21), spec, 200000)
        mask = np.abs(data.X[:, 0] - 0.5) < 0.01
        y_bin = data.Y[mask, 0]
        # mean function is locally linear; allow 3 SE plus slope*binwidth slack
        assert abs(y_bin.mean()) < 3.0 / np.sqrt(mask.sum()) + 4.0 * 0.01

    def test_variance_positive(self):
        spec = ConditionalGaussianSpec(4.0, 2.0, -2.0, 1.0, 8.0, 1.0)
        x = np.linspace(0, 1, 11)
        assert (spec.variance(x) > 0).all()

    def test_invalid_variance_rejected(self):
        with pytest.raises(ValueError):
            ConditionalGaussianSpec(2.0, 2.0, 0.0, 0.0, -2.0, 1.0)

    def test_determinism(self):
        spec = ConditionalGaussianSpec(2.0, 4.0, 4.0, -2.0, 0.0, 1.0)
        d1 = gen_conditional_gaussian(RngStream(22), spec, 500)
        d2 = gen_conditional_gaussian(RngStream(22), spec, 500)
        assert np.array_equal(d1.X, d2.X) and np.array_equal(d1.Y, d2.Y)


class TestToyClassification:
    def test_one_hot_labels(self):
        data = gen_toy_classification(RngStream(30), 3, 200, 4.0)
        assert data.Y.shape == (200, 3)
        assert np.array_equal(data.Y.sum(axis=1), np.ones(200))
        assert set(np.unique(data.Y)) <= {0.0, 1.0}

    def test_mean_separation(self):
        sep = 3.5
        data = gen_toy_classification(RngStream(31), 3, 60000, sep)
        labels = data.Y.argmax(axis=1)
        means = np.stack([data.X[labels == c].mean(axis=0) for c in range(3)])
        for i in range(3):
            for j in range(i + 1, 3):
                d = np.linalg.norm(means[i] - means[j])
                assert d == pytest.approx(sep, abs=0.05)

    def test_zero_separation_is_chance(self):
        data = gen_toy_classification(RngStream(32), 2, 4000, 0.0)
        labels = data.Y.argmax(axis=1)
        # With identical class-conditionals no classifier beats chance;
        # check the feature distributions coincide in mean.
        m0 = data.X[labels == 0].mean(axis=0)
        m1 = data.X[labels == 1].mean(axis=0)
        assert np.linalg.norm(m0 - m1) < 0.1


class TestToyCell:
    def test_set_sizes(self):
        data = gen_toy_cell(RngStream(40), [1.0, 2.0, 3.0], 50, [10, 20, 30], 2)
        assert data.unperturbed.shape == (50, 2)
        assert [p.shape[0] for p in data.perturbed] == [10, 20, 30]

    def test_shift_recoverable_from_means(self):
        data = gen_toy_cell(RngStream(41), [1.0, 4.0], 5000, 5000, 3, shift_scale=0.5)
        for q in range(2):
            est = data.perturbed[q].mean(axis=0) - data.unperturbed.mean(axis=0)
            se = 3.0 * np.sqrt(2.0 / 5000.0)
            assert np.linalg.norm(est - data.shifts[q]) < 3.0 * se

    def test_zero_shift_same_law(self):
        data = gen_toy_cell(RngStream(42), [1.0], 20000, 20000, 2, shift_scale=0.0)
        assert np.allclose(data.shifts, 0.0)
        d = stats.kstest(data.perturbed[0][:, 0], "norm").statistic
        assert d < KS_CRIT_1PCT / np.sqrt(20000)


class TestCsvRoundTrip:
    def test_round_trip(self, tmp_path):
        data = gen_conditional_gaussian(
            RngStream(50), ConditionalGaussianSpec(2.0, 4.0, 4.0, -2.0, 0.0, 1.0), 64)
        path = tmp_path / "data.csv"
        dataset_to_csv(data, path)
        back = dataset_from_csv(path)
        assert np.array_equal(back.X, data.X)
        assert np.array_equal(back.Y, data.Y)

    def test_header(self, tmp_path):
        data = JointDataset(np.zeros((2, 2)), np.zeros((2, 1)))
        path = tmp_path / "d.csv"
        dataset_to_csv(data, path)
        assert path.read_text().splitlines()[0] == "x_0,x_1,y_0"


def test_joint_dataset_validation():
    with pytest.raises(ValueError):
        JointDataset(np.zeros((3, 1)), np.zeros((2, 1)))
    with pytest.raises(ValueError):
        JointDataset(np.array([[np.inf]]), np.array([[0.0]]))
