import itertools

import numpy as np
import pytest
from scipy import stats

from cot.oracles import (
    BARYCENTER_SOURCE,
    BARYCENTER_TARGET,
    CONVERGE_SOURCE,
    CONVERGE_TARGET,
    DiscretePlan,
    Gaussian1D,
    analytic_barycenter,
    barycenter_1d_by_quantiles,
    empirical_w1_1d,
    exact_assignment_ot,
    exact_ot_1d,
    gaussian_barycenter_1d,
    gaussian_w2sq,
    mccann_interpolate,
    true_conditional_w2sq,
)
from cot.synthdata import RngStream


class TestGaussianW2:
    def test_identical(self):
        g = Gaussian1D(0.3, 2.0)
        assert gaussian_w2sq(g, g) == 0.0

    def test_pure_mean_shift(self):
        assert gaussian_w2sq(Gaussian1D(0, 1), Gaussian1D(3, 1)) == pytest.approx(9.0)

    def test_pure_scale(self):
        # (sqrt(4) - sqrt(1))^2 = 1
        assert gaussian_w2sq(Gaussian1D(0, 1), Gaussian1D(0, 4)) == pytest.approx(1.0)

    def test_symmetry_and_triangle(self):
        stream = RngStream(0)
        for trial in range(50):
            s = stream.child(trial)
            mus = 3.0 * s.normals(3)
            sds = 0.3 + np.abs(s.normals(3))
            a, b, c = (Gaussian1D(m, sd ** 2) for m, sd in zip(mus, sds))
            assert gaussian_w2sq(a, b) == gaussian_w2sq(b, a)
            dab, dbc, dac = (np.sqrt(gaussian_w2sq(p, q))
                             for p, q in ((a, b), (b, c), (a, c)))
            assert dac <= dab + dbc + 1e-9

    def test_zero_iff_equal(self):
        assert gaussian_w2sq(Gaussian1D(0.1, 1.0), Gaussian1D(0.1, 1.0001)) > 0.0


class TestTrueConditionalW2:
    def test_at_half(self):
        # (sqrt(5) - 1)^2 = 6 - 2 sqrt(5)
        assert true_conditional_w2sq(0.5) == pytest.approx(6.0 - 2.0 * np.sqrt(5.0),
                                                           abs=1e-12)
        assert true_conditional_w2sq(0.5) == pytest.approx(1.5278640450004204, abs=1e-9)

    def test_at_three_quarters(self):
        # 1.5^2 + (sqrt(7) - 1)^2 = 2.25 + 8 - 2 sqrt(7)
        assert true_conditional_w2sq(0.75) == pytest.approx(
            10.25 - 2.0 * np.sqrt(7.0), abs=1e-12)
        assert true_conditional_w2sq(0.75) == pytest.approx(4.95849737787082, abs=1e-9)

    def test_cross_validates_against_gaussian_w2(self):
        xs = RngStream(1).uniforms(100)
        for x in xs:
            via_formula = true_conditional_w2sq(x)
            via_w2 = gaussian_w2sq(CONVERGE_SOURCE(x), CONVERGE_TARGET(x))
            assert via_formula == pytest.approx(via_w2, abs=1e-12)

    def test_domain(self):
        with pytest.raises(ValueError):
            true_conditional_w2sq(-0.1)
        with pytest.raises(ValueError):
            true_conditional_w2sq(1.1)


class TestBarycenter:
    def test_endpoints(self):
        for x in (0.2, 0.5, 0.8):
            src, tgt = BARYCENTER_SOURCE(x), BARYCENTER_TARGET(x)
            assert analytic_barycenter(x, 1.0) == src
            assert analytic_barycenter(x, 0.0) == tgt

    def test_midpoint_closed_form(self):
        b = analytic_barycenter(0.5, 0.5)
        assert b.mean == pytest.approx(0.0, abs=1e-15)
        assert b.std == pytest.approx(1.5, abs=1e-15)
        assert b.var == pytest.approx(2.25, abs=1e-15)

    def test_mean_formula_matches_flat_line(self):
        for x in np.linspace(0, 1, 21):
            assert analytic_barycenter(x, 0.5).mean == pytest.approx(-x + 0.5, abs=1e-12)

    def test_variance_against_bruteforce_quantile_barycenter(self):
        # Discretized quantile-averaging ground truth settles which variance
        # constant is correct for the equal-weight barycenter.
        for x in (0.25, 0.5, 0.75):
            src, tgt = BARYCENTER_SOURCE(x), BARYCENTER_TARGET(x)
            q = barycenter_1d_by_quantiles(
                lambda u: stats.norm.ppf(u, loc=src.mean, scale=src.std),
                lambda u: stats.norm.ppf(u, loc=tgt.mean, scale=tgt.std),
                rho=0.5, n_grid=200001)
            bary = analytic_barycenter(x, 0.5)
            assert q.mean() == pytest.approx(bary.mean, abs=1e-6)
            # quantile-grid variance is slightly truncated in the tails
            assert q.var() == pytest.approx(bary.var, rel=2e-3)
            assert abs(q.var() - 2.5) > 0.2  # rules out the flat 2.5 reading

    def test_general_rule(self):
        p, q = Gaussian1D(1.0, 4.0), Gaussian1D(-3.0, 9.0)
        b = gaussian_barycenter_1d(p, q, 0.25)
        assert b.mean == pytest.approx(0.25 * 1.0 + 0.75 * -3.0)
        assert b.std == pytest.approx(0.25 * 2.0 + 0.75 * 3.0)

    def test_rho_domain(self):
        with pytest.raises(ValueError):
            analytic_barycenter(0.5, 1.2)


class TestMcCann:
    def test_endpoints_and_midpoint(self):
        y0 = np.array([1.0, 2.0])
        y1 = np.array([3.0, -2.0])
        assert np.array_equal(mccann_interpolate(1.0, y0, y1), y0)
        assert np.array_equal(mccann_interpolate(0.0, y0, y1), y1)
        assert np.allclose(mccann_interpolate(0.5, y0, y1), [2.0, 0.0])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mccann_interpolate(0.5, np.zeros(3), np.zeros(4))


class TestExactOt1d:
    def test_shifted_pair(self):
        # pairings: (0-1,1-2) cost (1+1)/2 = 1 vs (0-2,1-1) cost (4+0)/2 = 2
        assert exact_ot_1d([0.0, 1.0], [1.0, 2.0]) == pytest.approx(1.0)

    def test_identical(self):
        assert exact_ot_1d([0.0, 1.0], [0.0, 1.0]) == 0.0
        assert exact_ot_1d([0.0, 1.0], [1.0, 0.0], cost="abs") == 0.0

    def test_matches_brute_force(self):
        stream = RngStream(2)
        for trial in range(30):
            s = stream.child(trial)
            n = 2 + trial % 5
            a, b = s.normals(n), s.normals(n)
            for cost, fn in (("sqeuclidean", lambda d: d * d), ("abs", np.abs)):
                best = min(
                    np.mean([fn(a[i] - b[p[i]]) for i in range(n)])
                    for p in itertools.permutations(range(n))
                )
                assert exact_ot_1d(a, b, cost) == pytest.approx(best, abs=1e-12)

    def test_unequal_counts(self):
        with pytest.raises(ValueError):
            exact_ot_1d([0.0], [0.0, 1.0])


class TestAssignment:
    def test_single_pair(self):
        cost, perm = exact_assignment_ot([[0.0, 0.0]], [[1.0, 1.0]])
        assert cost == pytest.approx(2.0)
        assert perm.tolist() == [0]

    def test_matches_exhaustive_n3(self):
        stream = RngStream(3)
        for trial in range(50):
            s = stream.child(trial)
            A, B = s.normals((3, 2)), s.normals((3, 2))
            cost, _ = exact_assignment_ot(A, B)
            best = min(
                np.mean([np.sum((A[i] - B[p[i]]) ** 2) for i in range(3)])
                for p in itertools.permutations(range(3))
            )
            assert cost == pytest.approx(best, abs=1e-12)

    def test_matches_sorted_matching_in_1d(self):
        stream = RngStream(4)
        for trial in range(20):
            s = stream.child(trial)
            a, b = s.normals(6), s.normals(6)
            cost, _ = exact_assignment_ot(a[:, None], b[:, None])
            assert cost == pytest.approx(exact_ot_1d(a, b), abs=1e-12)

    def test_unequal_counts_error(self):
        with pytest.raises(ValueError):
            exact_assignment_ot(np.zeros((2, 1)), np.zeros((3, 1)))

    def test_cap(self):
        with pytest.raises(ValueError):
            exact_assignment_ot(np.zeros((513, 1)), np.zeros((513, 1)))


class TestW11d:
    def test_identical(self):
        assert empirical_w1_1d([0.0, 1.0], [1.0, 0.0]) == 0.0

    def test_shift(self):
        a = np.array([0.0, 1.0, 2.0])
        assert empirical_w1_1d(a, a + 0.7) == pytest.approx(0.7)

    def test_matches_assignment_with_abs_cost(self):
        stream = RngStream(5)
        for trial in range(20):
            s = stream.child(trial)
            a, b = s.normals(5), s.normals(5)
            cost, _ = exact_assignment_ot(a[:, None], b[:, None], cost="abs")
            assert empirical_w1_1d(a, b) == pytest.approx(cost, abs=1e-12)


class TestDiscretePlan:
    def test_permutation_plan(self):
        plan = DiscretePlan.from_permutation([2, 0, 1])
        assert plan.matrix.sum() == pytest.approx(1.0)
        assert np.allclose(plan.row_marginal, 1.0 / 3.0)

    def test_marginal_validation(self):
        with pytest.raises(ValueError):
            DiscretePlan(np.eye(2) / 2.0, np.array([0.7, 0.3]), np.array([0.5, 0.5]))

    def test_mass_validation(self):
        with pytest.raises(ValueError):
            DiscretePlan(np.eye(2), np.ones(2), np.ones(2))
