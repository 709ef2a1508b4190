import math

import numpy as np
import pytest
from scipy import integrate, stats

from npmix.errors import InvalidArgumentError
from npmix.hermite import psi
from npmix.synthgen import (
    GaussianMixtureDensity,
    SyntheticTruth,
    circle_truth,
    gaussian_truth,
    gmm_on_circle,
    hermite_random_density,
    laplace_density,
    sample_mixture,
    scale_separated_truth,
    skew_exp_power_density,
    three_component_truth,
)


def mass(d):
    return integrate.quad(lambda t: float(np.atleast_1d(d.pdf(np.array([t])))[0]), d.lo, d.hi,
                          limit=400, epsabs=1e-13, points=_breaks(d))[0]


def _breaks(d):
    mu = getattr(d, "mu", getattr(d, "center", None))
    return [mu] if mu is not None and d.lo < mu < d.hi else None


def chi_square_pvalue(draws, d, bins=40):
    edges = np.quantile(draws, np.linspace(0, 1, bins + 1))
    edges[0], edges[-1] = d.lo, d.hi
    cdf = np.asarray(d.cdf(edges), dtype=float)
    expected = np.diff(cdf) * draws.size
    observed = np.histogram(draws, edges)[0]
    keep = expected > 5
    obs, exp = observed[keep], expected[keep]
    exp = exp * obs.sum() / exp.sum()
    return stats.chisquare(obs, exp).pvalue


class TestHermiteDensity:
    def test_cdf_matches_quadrature(self):
        d = hermite_random_density(0.5, 1.0, 3, 4)
        x = np.linspace(d.lo - 1, d.hi + 1, 15)
        assert np.allclose(d.cdf(x), super(type(d), d).cdf(x), atol=1e-9)

    def test_degree_zero_is_gaussian(self):
        d = hermite_random_density(1.0, 2.0, 0, seed=3)
        x = np.linspace(d.lo, d.hi, 101)
        ref = psi(0, 1.0, d.scale, x)
        ref = ref / integrate.quad(lambda t: psi(0, 1.0, d.scale, t), d.lo, d.hi)[0]
        assert np.allclose(d.pdf(x), ref, rtol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_integrates_to_one(self, seed):
        d = hermite_random_density(-2.0, 1.5, 4, seed)
        assert mass(d) == pytest.approx(1.0, abs=1e-6)
        assert np.all(d.pdf(np.linspace(d.lo - 1, d.hi + 1, 500)) >= 0)

    def test_seeds_differ(self):
        a, b = hermite_random_density(0, 1, 3, 0), hermite_random_density(0, 1, 3, 1)
        x = np.linspace(a.lo, a.hi, 2001)
        assert np.trapezoid(np.abs(a.pdf(x) - b.pdf(x)), x) > 0

    def test_sampler_matches_pdf(self, rng):
        d = hermite_random_density(0.0, 1.5, 3, 2)
        x = d.sample(10**5, rng)
        assert np.all((x >= d.lo) & (x <= d.hi))
        assert chi_square_pvalue(x, d) > 1e-3

    @pytest.mark.parametrize("seed", range(4))
    def test_positive_has_no_clipped_region(self, seed):
        d = hermite_random_density(-10.0, 1.5, 4, seed, positive=True)
        x = np.linspace(d.lo, d.hi, 3001)
        assert np.all(d.pdf(x) > 0)
        assert mass(d) == pytest.approx(1.0, abs=1e-6)

    def test_positive_is_deterministic(self):
        a = hermite_random_density(0.0, 1.0, 4, 9, positive=True)
        b = hermite_random_density(0.0, 1.0, 4, 9, positive=True)
        assert np.array_equal(a.coefs, b.coefs)

    def test_invalid(self):
        with pytest.raises(InvalidArgumentError):
            hermite_random_density(0, -1, 2)


class TestLaplaceAndSkew:
    def test_laplace_pdf(self):
        assert laplace_density(0, 1).pdf(0.0) == 0.5
        assert mass(laplace_density(2, 0.3)) == pytest.approx(1, abs=1e-6)

    def test_laplace_median(self, rng):
        x = laplace_density(1.5, 2.0).sample(10**6, rng)
        assert np.median(x) == pytest.approx(1.5, abs=0.01)

    def test_laplace_sampler(self, rng):
        d = laplace_density(-1, 0.7)
        assert stats.kstest(d.sample(10**5, rng), d.cdf).pvalue > 1e-3

    def test_symmetric_skew_zero(self, rng):
        d = skew_exp_power_density(0.0, 1.0, 1.5, 0.0)
        x = d.sample(10**5, rng)
        assert abs(stats.skew(x)) < 5 * math.sqrt(6 / x.size)

    @pytest.mark.parametrize("params", [(0.0, 1.0, 1.5, 0.4), (10, 1.2, 1.5, -0.4), (0, 2, 3.0, 0.7)])
    def test_skew_pdf_cdf_sampler(self, rng, params):
        d = skew_exp_power_density(*params)
        assert mass(d) == pytest.approx(1.0, abs=1e-6)
        x = np.linspace(d.lo, d.hi, 9)
        num = [integrate.quad(lambda t: float(d.pdf(t)), d.lo, v, points=[params[0]] if d.lo < params[0] < v else None)[0]
               for v in x]
        assert np.allclose(d.cdf(x), num, atol=1e-8)
        draws = d.sample(10**5, rng)
        assert stats.kstest(draws, d.cdf).pvalue > 1e-3
        assert chi_square_pvalue(draws, d) > 1e-3

    def test_skew_direction(self):
        d = skew_exp_power_density(0, 1, 2, 0.5)
        assert d.cdf(0.0) == pytest.approx(0.75)

    def test_invalid(self):
        with pytest.raises(InvalidArgumentError):
            skew_exp_power_density(0, 1, 2, 1.0)
        with pytest.raises(InvalidArgumentError):
            laplace_density(0, 0)


class TestCircle:
    def test_single_atom(self):
        g = gmm_on_circle((1.0, 2.0), 3.0, 1, 0.5)
        assert np.allclose(g.means, [[4.0, 2.0]])

    def test_covariances(self):
        g = gmm_on_circle((0, 0), 2.0, 8, 0.4, seed=5)
        ev = np.linalg.eigvalsh(g.covs)
        assert np.all(ev >= 0.1 - 1e-12) and np.all(ev <= 0.4 + 1e-12)
        assert np.allclose(np.linalg.norm(g.means, axis=1), 2.0)

    def test_sample_mean(self, rng):
        g = gmm_on_circle((3.0, -1.0), 2.0, 6, 0.3)
        assert np.allclose(g.sample(10**5, rng).mean(axis=0), [3.0, -1.0], atol=0.02)

    def test_pdf_integrates(self):
        g = gmm_on_circle((0, 0), 1.0, 3, 0.2)
        gx = np.linspace(-4, 4, 401)
        X, Y = np.meshgrid(gx, gx, indexing="ij")
        f = g.pdf(np.column_stack([X.ravel(), Y.ravel()])).reshape(X.shape)
        assert np.trapezoid(np.trapezoid(f, gx, axis=1), gx) == pytest.approx(1.0, abs=1e-6)

    def test_bad_weights(self):
        with pytest.raises(InvalidArgumentError):
            GaussianMixtureDensity([0.5, 0.6], [[0.0], [1.0]], [[[1.0]], [[1.0]]])


class TestMixtures:
    def test_degenerate_weights(self):
        truth = gaussian_truth([1.0, 0.0], [0, 5], [1, 1])
        _, lab = sample_mixture(truth, 500, 1)
        assert np.all(lab == 0)

    def test_label_fraction(self):
        truth = gaussian_truth([0.7, 0.3], [-3, 3], [0.5, 0.5])
        _, lab = sample_mixture(truth, 10**6, 2)
        assert np.mean(lab == 0) == pytest.approx(0.7, abs=0.0015)

    def test_components_match(self):
        truth = three_component_truth(0)
        data, lab = sample_mixture(truth, 30_000, 3)
        for k in range(3):
            xs = data.x[lab == k, 0]
            assert stats.kstest(xs, truth.components[k].cdf).statistic < 0.01 + 1.36 / math.sqrt(xs.size)

    def test_deterministic(self):
        a = sample_mixture(circle_truth(0), 100, 4)[0].x
        b = sample_mixture(circle_truth(0), 100, 4)[0].x
        assert np.array_equal(a, b)

    def test_designs_integrate(self):
        for d in three_component_truth(1).components:
            assert mass(d) == pytest.approx(1.0, abs=1e-6)
        for d in scale_separated_truth().components + gaussian_truth([0.5, 0.5], [0, 1], [1, 2]).components:
            assert mass(d) == pytest.approx(1.0, abs=1e-6)

    def test_three_component_hermite_positive(self):
        h = three_component_truth(3).components[0]
        assert h.coefs.size == 5
        assert np.all(h.pdf(np.linspace(h.lo, h.hi, 2001)) > 0)

    def test_three_component_supports_disjoint(self):
        lo = [d.lo for d in three_component_truth(0).components]
        hi = [d.hi for d in three_component_truth(0).components]
        # the Hermite component sits strictly left of the others' effective ranges
        assert hi[0] < -4 and lo[2] > 0

    def test_separation_validated(self):
        circle_truth(0)
        g1 = GaussianMixtureDensity([0.5, 0.5], [[0, 0], [3, 0]], np.stack([np.eye(2)] * 2))
        g2 = GaussianMixtureDensity([1.0], [[5, 0]], np.eye(2)[None])
        with pytest.raises(InvalidArgumentError):
            SyntheticTruth([0.5, 0.5], [g1, g2], separation_gap=1.0)
        with pytest.raises(InvalidArgumentError):
            SyntheticTruth([0.5, 0.6], [g1, g2])
