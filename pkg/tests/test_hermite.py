import math
import warnings

import numpy as np
import pytest
from scipy import integrate, stats

from npmix.errors import ConditioningError, DegenerateEstimateError, InvalidArgumentError
from npmix.hermite import (
    HermiteBasis,
    KdeEstimate,
    adaptive_gauss_legendre,
    build_A,
    choose_ell,
    component_estimate,
    default_epsilon,
    hermite_h,
    hermite_split,
    inner_psi_gauss,
    inner_psi_psi,
    kde_fit,
    min_ell,
    project_yhat,
    psi,
    psi_direct,
    silverman_bandwidth,
    solve_lambda,
)


def quad(f, a=-np.inf, b=np.inf):
    return integrate.quad(f, a, b, epsabs=1e-13, epsrel=1e-12, limit=400)[0]


def gauss(mu, sigma):
    return lambda x: stats.norm.pdf(x, mu, sigma)


class TestHermitePolynomials:
    def test_examples(self):
        assert np.all(hermite_h(0, np.linspace(-3, 3, 7)) == 1.0)
        assert hermite_h(2, 1.0) == 2.0
        assert hermite_h(3, 0.0) == 0.0

    def test_against_numpy(self):
        x = np.linspace(-4, 4, 41)
        for j in range(12):
            c = np.zeros(j + 1)
            c[j] = 1
            assert np.allclose(hermite_h(j, x), np.polynomial.hermite.hermval(x, c), rtol=1e-12)


class TestPsi:
    def test_value_at_zero(self):
        assert psi(0, 0, 1, 0.0) == pytest.approx(math.pi ** -0.25, abs=1e-6)

    def test_matches_literal_formula(self):
        x = np.linspace(-6, 6, 25)
        for j in range(15):
            assert np.allclose(psi(j, 0.3, 1.7, x), psi_direct(j, 0.3, 1.7, x), atol=1e-13)

    def test_sign_convention(self):
        assert psi(1, 0, 1, 1.0) < 0

    def test_orthonormality(self):
        for i in range(11):
            for j in range(i, 11):
                v = quad(lambda x: psi(i, 0.5, 1.3, x) * psi(j, 0.5, 1.3, x))
                assert v == pytest.approx(float(i == j), abs=1e-8)

    def test_high_order_finite(self):
        x = np.linspace(-30, 30, 101)
        v = psi(80, 0, 1, x)
        assert np.all(np.isfinite(v))
        assert quad(lambda t: psi(40, 0, 1, t) ** 2) == pytest.approx(1.0, abs=1e-8)

    def test_invalid_sigma(self):
        with pytest.raises(InvalidArgumentError):
            psi(0, 0, 0, 0.0)


class TestInnerProducts:
    def test_gaussian_overlap(self):
        assert inner_psi_psi(0, 0, 0, 2, 1) == pytest.approx(math.exp(-1))

    def test_same_center_orthogonal(self):
        assert inner_psi_psi(2, 1.0, 5, 1.0, 0.7) == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("i,j,dmu,sigma", [(1, 0, 1.0, 1.0), (3, 2, 2.5, 0.8), (0, 4, -1.5, 1.2),
                                               (6, 6, 4.0, 2.0)])
    def test_against_quadrature(self, i, j, dmu, sigma):
        ref = quad(lambda x: psi(i, 0.0, sigma, x) * psi(j, dmu, sigma, x))
        assert inner_psi_psi(i, 0.0, j, dmu, sigma) == pytest.approx(ref, abs=1e-8)

    def test_psi_gauss_quadrature(self):
        ref = quad(lambda x: psi(1, 0, 1, x) * gauss(1, 1)(x))
        val = inner_psi_gauss(1, 0, 1, 1)
        assert val == pytest.approx(ref, abs=1e-8)
        assert val == pytest.approx(-0.292489, abs=1e-6)

    def test_psi_gauss_zero_shift(self):
        for s in (0.5, 1, 2):
            assert inner_psi_gauss(0, 0.7, 0.7, s) == pytest.approx((2 * s * math.sqrt(math.pi)) ** -0.5)

    def test_psi_gauss_sign_rule(self):
        for j in range(1, 8):
            v = inner_psi_gauss(j, 1.0, -0.5, 1.0)
            assert np.sign(v) == (-1) ** j * (-1) ** j

    @pytest.mark.parametrize("j", range(0, 16))
    def test_coefficient_decay_bound(self, j):
        sigma, r = 1.0, 0.8
        rng = np.random.default_rng(j)
        u = rng.uniform(-r, r, 5)
        w = rng.dirichlet(np.ones(5))
        alpha = sum(wk * inner_psi_gauss(j, 0.0, uk, sigma) for wk, uk in zip(w, u))
        bound = (r / (math.sqrt(2) * sigma)) ** j / math.sqrt(2 * math.factorial(j) * sigma * math.sqrt(math.pi))
        assert abs(alpha) <= bound * (1 + 1e-12)


class TestGram:
    def test_ell_one(self):
        A = build_A(HermiteBasis(1.0, 0.0, 2.0, 1))
        assert np.allclose(A, [[1, math.exp(-1)], [math.exp(-1), 1]])
        assert np.linalg.det(A) == pytest.approx(1 - math.exp(-2))

    def test_ell_two_quadrature(self):
        basis = HermiteBasis(1.0, 0.0, 3.0, 2)
        A = build_A(basis)
        rows = [(basis.c1, j) for j in range(2)] + [(basis.c2, j) for j in range(2)]
        for a, (ma, ja) in enumerate(rows):
            for b, (mb, jb) in enumerate(rows):
                ref = quad(lambda x: psi(ja, ma, 1.0, x) * psi(jb, mb, 1.0, x))
                assert A[a, b] == pytest.approx(ref, abs=1e-8)

    def test_structure(self):
        A = build_A(HermiteBasis(0.7, -1.0, 4.0, 5))
        assert np.allclose(np.diag(A), 1.0)
        assert np.allclose(A, A.T, atol=1e-10)
        assert 0 < np.linalg.det(A) <= 1

    def test_far_apart_is_identity(self):
        assert np.allclose(build_A(HermiteBasis(1.0, 0.0, 200.0, 4)), np.eye(8), atol=1e-12)

    def test_invalid_basis(self):
        with pytest.raises(InvalidArgumentError):
            HermiteBasis(1.0, 2.0, 1.0, 2)
        with pytest.raises(InvalidArgumentError):
            HermiteBasis(1.0, 0.0, 1.0, 0)


class TestKde:
    def test_single_kernel(self):
        assert KdeEstimate(np.zeros(10), 1.0)(0.0) == pytest.approx(1 / math.sqrt(2 * math.pi))

    def test_integrates_to_one(self, rng):
        kde = kde_fit(rng.standard_normal(500))
        assert quad(lambda x: float(kde(x)), -20, 20) == pytest.approx(1.0, abs=1e-6)

    def test_ise_large_n(self, rng):
        kde = kde_fit(rng.standard_normal(10**5))
        x = np.linspace(-8, 8, 2001)
        assert integrate.trapezoid((kde(x) - stats.norm.pdf(x)) ** 2, x) < 0.002

    def test_silverman(self):
        s = np.array([0.0, 1.0, 2.0, 3.0])
        assert silverman_bandwidth(s) == pytest.approx(1.06 * np.std(s, ddof=1) * 4 ** -0.2)

    def test_invalid(self):
        with pytest.raises(InvalidArgumentError):
            kde_fit([])
        with pytest.raises(InvalidArgumentError):
            KdeEstimate([0.0], 0.0)


class TestProjection:
    def test_gaussian_at_first_center(self):
        basis = HermiteBasis(1.0, 0.0, 6.0, 4)
        y = project_yhat(gauss(0.0, 1.0), basis)
        assert y[0] == pytest.approx((2 * math.sqrt(math.pi)) ** -0.5, abs=1e-9)
        assert np.allclose(y[1:4], 0.0, atol=1e-9)
        for j in range(4):
            assert y[4 + j] == pytest.approx(inner_psi_gauss(j, 6.0, 0.0, 1.0), abs=1e-9)

    def test_zero_function(self):
        basis = HermiteBasis(1.0, 0.0, 6.0, 3)
        assert np.allclose(project_yhat(lambda x: np.zeros_like(x), basis), 0.0)

    def test_quadrature_polynomial_exact(self):
        val, _ = adaptive_gauss_legendre(lambda x: x ** 5 - x ** 2, 0.0, 2.0)
        assert val == pytest.approx(64 / 6 - 8 / 3, abs=1e-12)


class TestSolve:
    def test_column_recovers_unit_vector(self):
        basis = HermiteBasis(1.0, 0.0, 4.0, 3)
        A = build_A(basis)
        assert np.allclose(solve_lambda(A, A[:, 1], basis), np.eye(6)[1], atol=1e-10)

    def test_identity(self):
        y = np.arange(4.0)
        assert np.allclose(solve_lambda(np.eye(4), y), y)

    def test_two_by_two(self):
        a = 0.3
        lam = solve_lambda(np.array([[1, a], [a, 1]]), np.array([1.0, 0.0]))
        assert np.allclose(lam, np.array([1, -a]) / (1 - a * a))

    def test_least_squares_fallback(self):
        A = np.array([[1.0, 1 - 1e-13], [1 - 1e-13, 1.0]])
        lam = solve_lambda(A, np.array([1.0, 1.0]))
        assert np.allclose(A @ lam, [1.0, 1.0], atol=1e-6)

    def test_singular(self):
        with pytest.raises(ConditioningError, match="ell=40"):
            basis = HermiteBasis(1.0, 0.0, 0.5, 40)
            solve_lambda(build_A(basis), np.ones(80), basis)


class TestComponents:
    def test_exact_recovery(self):
        basis = HermiteBasis(1.0, -4.0, 4.0, 3)
        w = (0.6, 0.4)
        lam = np.zeros(6)
        lam[0] = w[0] * inner_psi_gauss(0, -4.0, -4.0, 1.0)
        lam[3] = w[1] * inner_psi_gauss(0, 4.0, 4.0, 1.0)
        f1, f2, (w1, w2) = component_estimate(lam, basis)
        x = np.linspace(-10, 10, 201)
        assert np.allclose(f1(x), stats.norm.pdf(x, -4, 1), atol=1e-8)
        assert np.allclose(f2(x), stats.norm.pdf(x, 4, 1), atol=1e-8)
        assert (w1, w2) == pytest.approx(w, abs=1e-8)

    def test_clipping(self):
        basis = HermiteBasis(1.0, -4.0, 4.0, 2)
        f1, _, _ = component_estimate(np.array([0.2, 0.5, 0.3, 0.0]), basis)
        lo, hi = basis.domain()
        v = f1(np.linspace(lo, hi, 4001))
        assert np.all(v >= 0)
        assert quad(lambda t: float(f1(t)), lo, hi) == pytest.approx(1.0, abs=1e-6)
        assert np.any(v == 0)

    def test_degenerate(self):
        with pytest.raises(DegenerateEstimateError):
            component_estimate(np.array([-1.0, 0.0, 0.2, 0.0]), HermiteBasis(1.0, -4.0, 4.0, 2))

    def test_end_to_end(self, rng):
        n = 10**5
        lab = rng.random(n) < 0.6
        x = np.where(lab, rng.normal(-4, 1, n), rng.normal(4, 1, n))
        res = hermite_split(x, -4.0, 4.0, 1.0, ell=4)
        g = np.linspace(-14, 14, 4001)
        l1 = integrate.trapezoid(np.abs(res.f1_hat(g) - stats.norm.pdf(g, -4, 1)), g)
        assert l1 < 0.1
        assert res.weights[0] == pytest.approx(0.6, abs=0.05)


class TestTruncationDecay:
    def test_error_shrinks_with_ell(self):
        sigma, c1, c2, r = 1.0, 0.0, 8.0, 0.5
        f = lambda x: 0.6 * stats.norm.pdf(x, c1 + 0.3, sigma) + 0.4 * stats.norm.pdf(x, c2 - 0.2, sigma)
        errs = []
        for ell in (2, 4, 6, 8):
            basis = HermiteBasis(sigma, c1, c2, ell, r, r)
            lam_hat = solve_lambda(build_A(basis), project_yhat(f, basis), basis)
            truth = np.concatenate([
                [0.6 * inner_psi_gauss(j, c1, c1 + 0.3, sigma) for j in range(ell)],
                [0.4 * inner_psi_gauss(j, c2, c2 - 0.2, sigma) for j in range(ell)],
            ])
            errs.append(np.max(np.abs(lam_hat - truth)))
        assert all(b < a for a, b in zip(errs, errs[1:]))


class TestEll:
    def test_examples(self):
        assert choose_ell(math.exp(-3), 0.5, 1.0) == 4
        assert choose_ell(0.5, 2.0, 1.0) == 22
        assert choose_ell(1e-3, 1.0, 1e6) == math.floor(math.log(1e3)) + 1

    def test_min_ell_warning(self, rng):
        x = np.concatenate([rng.normal(-4, 1, 2000), rng.normal(4, 1, 2000)])
        with pytest.warns(UserWarning, match="below"):
            hermite_split(x, -4.0, 4.0, 1.0, ell=2, r1=1.0, r2=1.0)
        assert min_ell(1.0, 1.0) == 6

    def test_default_epsilon(self):
        assert default_epsilon(10**5) == pytest.approx(10 ** -2)

    def test_invalid(self):
        with pytest.raises(InvalidArgumentError):
            choose_ell(1.5, 1.0, 1.0)


class TestSplitInvariants:
    def test_outputs(self, rng):
        x = np.concatenate([rng.normal(-5, 1, 3000), rng.normal(5, 1, 2000)])
        res = hermite_split(x, -5.0, 5.0, 1.0, ell=3)
        assert res.A.shape == (6, 6)
        g = np.linspace(*res.basis.domain(), 8001)
        for f in (res.f1_hat, res.f2_hat):
            v = f(g)
            assert np.all(v >= 0)
            assert integrate.trapezoid(v, g) == pytest.approx(1.0, abs=1e-6)
