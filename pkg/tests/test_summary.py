import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from npmix.errors import InvalidArgumentError
from npmix.model import Atoms, Hyperparams, Snapshot
from npmix.summary import (
    DensityGrid,
    bivariate_normal_cdf,
    canonical_order,
    cdf_grid,
    default_grid,
    density_band,
    density_distance,
    density_values,
    weight_table,
)


def snap(c, r, atoms, w, m=1):
    out = []
    for u, cov, beta in atoms:
        u = np.asarray(u, dtype=float).reshape(-1, m)
        cov = np.asarray(cov, dtype=float).reshape(-1, m, m)
        beta = np.asarray(beta, dtype=float)
        out.append(Atoms(u, cov, beta, 1.0 - beta.sum()))
    return Snapshot(0, np.asarray(w, dtype=float), np.asarray(c, dtype=float).reshape(-1, m),
                    np.asarray(r, dtype=float), out)


def gauss_snap(mu=0.0, var=1.0):
    return snap([mu], [1.0], [([mu], [var], [1.0])], [1.0])


class TestBands:
    grid = np.linspace(-5, 5, 101)

    def test_constant_chain(self):
        band = density_band([gauss_snap()] * 5, grid=self.grid)
        assert np.allclose(band.lower, band.mean) and np.allclose(band.upper, band.mean)
        assert np.allclose(band.mean, stats.norm.pdf(self.grid), atol=1e-14)

    def test_two_state_quantiles(self):
        # densities at x=0 of 0.2 and 0.4 from two Gaussian widths
        s1 = 1 / (0.2 * math.sqrt(2 * math.pi))
        s2 = 1 / (0.4 * math.sqrt(2 * math.pi))
        chain = [gauss_snap(0, s1 ** 2), gauss_snap(0, s2 ** 2)] * 10
        band = density_band(chain, grid=np.array([-1.0, 0.0, 1.0]), level=0.95)
        assert band.mean[1] == pytest.approx(0.3)
        assert band.lower[1] == pytest.approx(0.2, abs=1e-12)
        assert band.upper[1] == pytest.approx(0.4, abs=1e-12)

    def test_level_zero_is_median(self):
        chain = [gauss_snap(m) for m in (-0.5, 0.0, 0.3)]
        band = density_band(chain, grid=self.grid, level=0.0)
        med = np.median(density_values(chain, grid=self.grid), axis=0)
        assert np.allclose(band.lower, med) and np.allclose(band.upper, med)

    def test_monotone_in_level(self, rng):
        chain = [gauss_snap(m, v) for m, v in zip(rng.normal(0, 0.3, 40), rng.uniform(0.5, 2, 40))]
        narrow = density_band(chain, grid=self.grid, level=0.5)
        wide = density_band(chain, grid=self.grid, level=0.95)
        assert np.all(wide.lower <= narrow.lower + 1e-15) and np.all(wide.upper >= narrow.upper - 1e-15)
        assert np.all(wide.lower <= wide.upper)

    def test_component_target_and_weighting(self):
        s = snap([3.0, -3.0], [1, 1], [([3.0], [1.0], [1.0]), ([-3.0], [1.0], [1.0])], [0.3, 0.7])
        # canonical order puts the centre at -3 first (stored second)
        assert canonical_order(s).tolist() == [1, 0]
        x = np.array([-3.0, 3.0])
        v = density_values([s], target=0, grid=x)[0]
        assert np.allclose(v, stats.norm.pdf(x, -3, 1))
        vw = density_values([s], target=0, grid=x, weighted=True)[0]
        assert np.allclose(vw, 0.7 * v)

    def test_errors(self):
        with pytest.raises(InvalidArgumentError):
            density_band([], grid=self.grid)
        with pytest.raises(InvalidArgumentError):
            density_band([gauss_snap()], grid=None)
        with pytest.raises(InvalidArgumentError):
            density_band([gauss_snap()], grid=self.grid[::-1])
        with pytest.raises(InvalidArgumentError):
            density_band([gauss_snap()], grid=self.grid, level=1.0)

    def test_mixture_integrates_to_one(self):
        hp = Hyperparams(K=2)
        s = snap([-4.0, 4.0], [1.0, 1.0], [([-4.2, -3.5], [0.3, 1.1], [0.5, 0.3]), ([4.1], [0.7], [0.9])],
                 [0.4, 0.6])
        grid = np.linspace(-4.2 - 8 * 1.1, 4.1 + 8 * 1.1, 6001)
        band = density_band([s], grid=grid, hp=hp)
        assert np.trapezoid(band.mean, grid) == pytest.approx(1.0, abs=1e-3)

    def test_lattice(self):
        s = snap([[0.0, 0.0]], [1.0], [([[0.0, 0.0]], np.eye(2), [1.0])], [1.0], m=2)
        gx, gy = np.linspace(-1, 1, 3), np.linspace(-2, 2, 5)
        band = density_band([s], grid=(gx, gy))
        assert band.mean.shape == (3, 5) and band.ndim == 2
        assert band.mean[1, 2] == pytest.approx(1 / (2 * math.pi))


class TestWeights:
    def test_constant(self):
        s = snap([-3.0, 3.0], [1, 1], [([-3.0], [1.0], [1.0]), ([3.0], [1.0], [1.0])], [0.7, 0.3])
        tab = weight_table([s] * 4)
        assert np.allclose(tab.mean, [0.7, 0.3])
        assert np.allclose(tab.lower, tab.upper)
        assert tab.labels == ["0", "1"]

    def test_canonical_and_background(self, rng):
        chain = []
        for _ in range(200):
            w = rng.dirichlet([30, 50, 20])
            chain.append(snap([3.0, -3.0], [1, 1], [([3.0], [1.0], [1.0]), ([-3.0], [1.0], [1.0])], w))
        tab = weight_table(chain)
        assert tab.labels == ["0", "1", "background"]
        assert tab.mean.sum() == pytest.approx(1.0, abs=1e-12)
        assert tab.mean[0] == pytest.approx(0.5, abs=0.02)
        assert np.all((tab.lower <= tab.mean) & (tab.mean <= tab.upper))
        assert tab.level == 0.68


class TestCdf:
    def test_single_atom(self):
        s = snap([[0.0, 0.0]], [1.0], [([[0.0, 0.0]], np.eye(2), [1.0])], [1.0], m=2)
        g = (np.array([-40.0, 0.0, 40.0]), np.array([-40.0, 0.0, 40.0]))
        F = cdf_grid([s], g)
        assert F[1, 1] == pytest.approx(0.25)
        assert F[2, 2] == pytest.approx(1.0)
        assert np.allclose(F[0, :], 0.0) and np.allclose(F[:, 0], 0.0)

    def test_correlated_against_scipy(self):
        cov = np.array([[1.0, 0.6], [0.6, 2.0]])
        s = snap([[0.0, 0.0]], [3.0], [([[0.3, -0.2]], cov, [1.0])], [1.0], m=2)
        gx, gy = np.linspace(-3, 3, 7), np.linspace(-4, 4, 5)
        F = cdf_grid([s], (gx, gy))
        ref = stats.multivariate_normal([0.3, -0.2], cov)
        for i, a in enumerate(gx):
            for j, b in enumerate(gy):
                assert F[i, j] == pytest.approx(ref.cdf([a, b]), abs=1e-6)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-6, 6), st.floats(-6, 6), st.floats(-0.999, 0.999))
    def test_owen_t_formula(self, h, k, rho):
        ref = stats.multivariate_normal([0, 0], [[1, rho], [rho, 1]]).cdf([h, k])
        assert float(bivariate_normal_cdf(h, k, rho)) == pytest.approx(ref, abs=1e-6)

    def test_one_dimensional_and_monotone(self, rng):
        hp = Hyperparams(K=2)
        s = snap([-3.0, 3.0], [1.0, 1.0], [([-3.2, -2.7], [0.4, 0.9], [0.5, 0.4]), ([3.0], [0.5], [0.8])],
                 [0.4, 0.6])
        grid = np.linspace(-15, 15, 301)
        F = cdf_grid([s], grid, hp)
        assert np.all(np.diff(F) >= -1e-15)
        assert F[0] == pytest.approx(0, abs=1e-6) and F[-1] == pytest.approx(1, abs=1e-6)
        # derivative matches the density
        f = density_values([s], grid=grid, hp=hp)[0]
        assert np.max(np.abs(np.gradient(F, grid) - f)) < 5e-3

    def test_lattice_monotone(self):
        cov = np.array([[1.0, -0.5], [-0.5, 1.0]])
        s = snap([[0.0, 0.0], [6.0, 0.0]], [2.0, 2.0], [([[0.0, 0.0]], cov, [1.0]), ([[6.0, 0.5]], np.eye(2), [1.0])],
                 [0.5, 0.5], m=2)
        g = (np.linspace(-4, 10, 30), np.linspace(-4, 4, 20))
        F = cdf_grid([s], g)
        assert np.all(np.diff(F, axis=0) >= -1e-12) and np.all(np.diff(F, axis=1) >= -1e-12)
        assert np.all((F >= 0) & (F <= 1))


class TestDistance:
    grid = np.linspace(-1, 3, 4001)

    def test_zero(self):
        f = stats.norm.pdf(self.grid, 1, 0.5)
        assert density_distance(f, f, "L1", self.grid) == 0
        assert density_distance(f, f, "hellinger", self.grid) == 0

    def test_disjoint_boxes(self):
        g = np.linspace(0, 2, 200_001)
        a = np.where(g < 1, 1.0, 0.0)
        b = 1.0 - a
        assert density_distance(a, b, "L1", g) == pytest.approx(2.0, abs=1e-4)
        assert density_distance(a, b, "hellinger", g) == pytest.approx(math.sqrt(2), abs=1e-4)

    def test_callable_and_density_grid(self):
        f = stats.norm.pdf(self.grid, 1, 0.5)
        dg = DensityGrid(self.grid, f, f, f, 0.95)
        assert density_distance(dg, lambda x: stats.norm.pdf(x, 1, 0.5)) == 0
        with pytest.raises(InvalidArgumentError):
            density_distance(f, f, "L7", self.grid)
        with pytest.raises(InvalidArgumentError):
            density_distance(f, f)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-1, 1), st.floats(0.2, 2), st.floats(-1, 1), st.floats(0.2, 2))
    def test_sandwich(self, m1, s1, m2, s2):
        g = np.linspace(-15, 15, 6001)
        f, h = stats.norm.pdf(g, m1, s1), stats.norm.pdf(g, m2, s2)
        l1 = density_distance(f, h, "L1", g)
        d = density_distance(f, h, "hellinger", g)
        assert d * d <= l1 + 1e-9 and l1 <= 2 * d + 1e-9


class TestGrid:
    def test_default(self):
        x = np.array([0.0, 1.0, 2.0])
        g = default_grid(x)
        sd = x.std()
        assert g.size == 512 and g[0] == -3 * sd and g[-1] == pytest.approx(2 + 3 * sd)
        gx, gy = default_grid(np.column_stack([x, 2 * x]), points=10)
        assert gx.size == gy.size == 10
