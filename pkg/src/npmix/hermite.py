"""Hermite-expansion splitting of a two-component location mixture.

Given a density estimate of ``f = w1 f1 + w2 f2`` where each ``fi`` is a
Gaussian location mixture with mixing support near ``ci``, the estimator
projects ``f`` on scaled Hermite functions centred at ``c1`` and ``c2``,
undoes the overlap between the two bases with the shifted Gram matrix and
keeps the positive part of each half of the expansion.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import special

from npmix.errors import ConditioningError, DegenerateEstimateError, InvalidArgumentError

_SQRT_PI = math.sqrt(math.pi)
COND_LIMIT = 1e12


def hermite_h(j: int, x):
    """Physicists' Hermite polynomial by the three-term recurrence."""
    if j < 0:
        raise InvalidArgumentError("degree must be nonnegative")
    x = np.asarray(x, dtype=float)
    h_prev = np.ones_like(x)
    if j == 0:
        return h_prev
    h = 2.0 * x
    for k in range(2, j + 1):
        h_prev, h = h, 2.0 * x * h - 2.0 * (k - 1) * h_prev
    return h


def _log_norm(j: int, sigma: float) -> float:
    # log sqrt(2^j j! sigma sqrt(pi))
    return 0.5 * (j * math.log(2.0) + special.gammaln(j + 1) + math.log(sigma * _SQRT_PI))


def psi(j: int, mu: float, sigma: float, x):
    """Scaled Hermite function, orthonormal in L2 for fixed ``(mu, sigma)``.

    Evaluated with the normalized recurrence so high orders neither overflow
    nor lose the Gaussian envelope.
    """
    if sigma <= 0:
        raise InvalidArgumentError("sigma must be positive")
    return psi_all(j + 1, mu, sigma, x)[j]


def psi_all(ell: int, mu: float, sigma: float, x) -> np.ndarray:
    """Rows ``psi(0..ell-1, mu, sigma, x)``, shape ``(ell, *x.shape)``.

    Uses the orthonormal recurrence
    ``phi_k = sqrt(2/k) t phi_{k-1} - sqrt((k-1)/k) phi_{k-2}`` for the
    unsigned functions and then applies the ``(-1)^j`` sign.
    """
    if sigma <= 0:
        raise InvalidArgumentError("sigma must be positive")
    t = (np.asarray(x, dtype=float) - mu) / sigma
    out = np.empty((ell, *t.shape))
    phi0 = np.exp(-0.5 * t * t) / math.sqrt(sigma * _SQRT_PI)
    out[0] = phi0
    if ell > 1:
        out[1] = math.sqrt(2.0) * t * phi0
    for k in range(2, ell):
        out[k] = math.sqrt(2.0 / k) * t * out[k - 1] - math.sqrt((k - 1) / k) * out[k - 2]
    out[1::2] *= -1.0
    return out


def psi_direct(j: int, mu: float, sigma: float, x):
    """Literal formula with a log-domain normalizer; reference path for tests."""
    t = (np.asarray(x, dtype=float) - mu) / sigma
    h = hermite_h(j, t)
    sign = -1.0 if j % 2 else 1.0
    return sign * h * np.exp(-0.5 * t * t - _log_norm(j, sigma))


def _signed_log_term(log_abs: float, sign: float):
    return sign * math.exp(log_abs) if log_abs > -745 else 0.0


def inner_psi_psi(i: int, mu1: float, j: int, mu2: float, sigma: float) -> float:
    """Closed-form ``<psi_{i,mu1,sigma}, psi_{j,mu2,sigma}>``.

    Every factorial and binomial is carried in the log domain with its sign
    tracked separately.
    """
    if sigma <= 0:
        raise InvalidArgumentError("sigma must be positive")
    t = (mu2 - mu1) / (math.sqrt(2.0) * sigma)
    log_env = -((mu2 - mu1) ** 2) / (4.0 * sigma * sigma)
    total = 0.0
    lgi, lgj = special.gammaln(i + 1), special.gammaln(j + 1)
    for k in range(min(i, j) + 1):
        pi_, pj = i - k, j - k
        if t == 0.0 and (pi_ or pj):
            continue
        log_abs = (
            log_env
            + special.gammaln(k + 1)
            - 0.5 * (lgi + lgj)
            + _log_binom(i, k)
            + _log_binom(j, k)
            + (pi_ + pj) * (math.log(abs(t)) if t else 0.0)
        )
        # (-1)^i t^(i-k) * (-1)^j (-t)^(j-k)
        sign = (-1.0) ** (i + j + pj)
        if t < 0:
            sign *= (-1.0) ** (pi_ + pj)
        total += _signed_log_term(log_abs, sign)
    return total


def _log_binom(n: int, k: int) -> float:
    return special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)


def inner_psi_gauss(j: int, mu1: float, mu2: float, sigma: float) -> float:
    """Closed-form ``<psi_{j,mu1,sigma}, g_{mu2,sigma}>``."""
    if sigma <= 0:
        raise InvalidArgumentError("sigma must be positive")
    d = (mu2 - mu1) / sigma
    if d == 0.0:
        return math.exp(-0.5 * math.log(2.0 * sigma * _SQRT_PI)) if j == 0 else 0.0
    log_abs = (
        -0.5 * ((j + 1) * math.log(2.0) + special.gammaln(j + 1) + math.log(sigma * _SQRT_PI))
        - d * d / 4.0
        + j * math.log(abs(d))
    )
    sign = (-1.0) ** j * (math.copysign(1.0, d) ** j)
    return _signed_log_term(log_abs, sign)


@dataclass(frozen=True)
class HermiteBasis:
    sigma: float
    c1: float
    c2: float
    ell: int
    r1: float = 0.0
    r2: float = 0.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise InvalidArgumentError("sigma must be positive")
        if not self.c1 < self.c2:
            raise InvalidArgumentError("require c1 < c2")
        if self.ell < 1:
            raise InvalidArgumentError("ell must be at least 1")

    @property
    def centers(self):
        return (self.c1, self.c2)

    @property
    def separation(self):
        return self.c2 - self.c1

    def domain(self, pad_sigmas: float = 12.0) -> tuple[float, float]:
        # extra room for the oscillatory reach of high-order functions
        reach = math.sqrt(2.0 * self.ell + 1.0) * self.sigma
        pad = pad_sigmas * self.sigma + reach
        return (self.c1 - self.r1 - self.r2 - pad, self.c2 + self.r1 + self.r2 + pad)

    def evaluate(self, x) -> np.ndarray:
        """All ``2 ell`` basis functions at ``x``; rows in (1,0..ell-1),(2,0..ell-1) order."""
        return np.concatenate(
            [psi_all(self.ell, self.c1, self.sigma, x), psi_all(self.ell, self.c2, self.sigma, x)]
        )


def build_A(basis: HermiteBasis) -> np.ndarray:
    """Gram matrix of the two shifted Hermite bases."""
    ell = basis.ell
    A = np.eye(2 * ell)
    for j1 in range(ell):
        for j2 in range(ell):
            v = inner_psi_psi(j1, basis.c1, j2, basis.c2, basis.sigma)
            A[j1, ell + j2] = v
            A[ell + j2, j1] = v
    return A


# ---------------------------------------------------------------------------
# kernel density estimate
# ---------------------------------------------------------------------------

SILVERMAN_CONSTANT = 1.06


@dataclass
class KdeEstimate:
    samples: np.ndarray
    bandwidth: float

    def __post_init__(self):
        self.samples = np.sort(np.asarray(self.samples, dtype=float).ravel())
        if not self.bandwidth > 0:
            raise InvalidArgumentError("bandwidth must be positive")

    def __call__(self, x, chunk: int = 1 << 22):
        x = np.asarray(x, dtype=float)
        flat = x.ravel()
        out = np.empty(flat.shape)
        h = self.bandwidth
        n = self.samples.size
        step = max(1, chunk // max(n, 1))
        for s in range(0, flat.size, step):
            xs = flat[s:s + step]
            z = (xs[:, None] - self.samples[None, :]) / h
            out[s:s + step] = np.exp(-0.5 * z * z).sum(axis=1)
        out /= n * h * math.sqrt(2.0 * math.pi)
        return out.reshape(x.shape)


def silverman_bandwidth(samples, constant: float = SILVERMAN_CONSTANT) -> float:
    samples = np.asarray(samples, dtype=float)
    sd = float(np.std(samples, ddof=1)) if samples.size > 1 else 0.0
    if sd == 0.0:
        sd = 1.0
    return constant * sd * samples.size ** (-0.2)


def kde_fit(samples, bandwidth: float | None = None,
            constant: float = SILVERMAN_CONSTANT) -> KdeEstimate:
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size == 0:
        raise InvalidArgumentError("no samples")
    if not np.all(np.isfinite(samples)):
        raise InvalidArgumentError("non-finite samples")
    h = bandwidth if bandwidth is not None else silverman_bandwidth(samples, constant)
    return KdeEstimate(samples, h)


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------


def adaptive_gauss_legendre(func: Callable[[np.ndarray], np.ndarray], a: float, b: float,
                            tol: float = 1e-9, order: int = 32, max_panels: int = 4096):
    """Vector-valued integral of ``func`` over ``[a, b]``.

    ``func`` maps ``x`` of shape ``(p,)`` to ``(q, p)``.  Panels are doubled
    until successive estimates agree to ``tol`` in every entry.  Returns the
    estimate and the last observed per-entry change.
    """
    nodes, weights = np.polynomial.legendre.leggauss(order)

    def estimate(panels):
        edges = np.linspace(a, b, panels + 1)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[:-1] + edges[1:])
        x = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
        w = (half[:, None] * weights[None, :]).ravel()
        return np.asarray(func(x)) @ w

    panels = 8
    prev = estimate(panels)
    while True:
        panels *= 2
        cur = estimate(panels)
        change = np.abs(cur - prev)
        if np.all(change <= tol):
            return cur, change
        if panels >= max_panels:
            return cur, change
        prev = cur


def project_yhat(fhat: Callable, basis: HermiteBasis, tol: float = 1e-9) -> np.ndarray:
    """Inner products of ``fhat`` with every basis function."""
    a, b = basis.domain()
    val, change = adaptive_gauss_legendre(lambda x: basis.evaluate(x) * fhat(x)[None, :],
                                          a, b, tol=tol)
    bad = np.nonzero(change > tol)[0]
    if bad.size:
        raise ArithmeticError(f"quadrature did not converge for entry {int(bad[0])}")
    return val


def solve_lambda(A: np.ndarray, y_hat: np.ndarray, basis: HermiteBasis | None = None):
    """Solve ``A lambda = y_hat``; least squares past the conditioning guard."""
    A = np.asarray(A, dtype=float)
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e16:
        info = ""
        if basis is not None:
            info = f" (ell={basis.ell}, r={basis.separation:g}, sigma={basis.sigma:g})"
        raise ConditioningError(f"Gram matrix is numerically singular, cond={cond:.3g}{info}")
    if cond > COND_LIMIT:
        sol, *_ = np.linalg.lstsq(A, y_hat, rcond=None)
        return sol
    return np.linalg.solve(A, y_hat)


@dataclass
class ComponentDensity:
    """Positive part of a Hermite expansion, normalized to unit mass."""

    coefs: np.ndarray
    center: float
    sigma: float
    mass: float
    lo: float
    hi: float

    def raw(self, x):
        return np.tensordot(self.coefs, psi_all(self.coefs.size, self.center, self.sigma, x), 1)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        v = np.maximum(self.raw(x), 0.0) / self.mass
        return np.where((x >= self.lo) & (x <= self.hi), v, 0.0)


def _positive_mass(coefs, center, sigma, lo, hi) -> float:
    probe = ComponentDensity(coefs, center, sigma, 1.0, lo, hi)
    val, _ = adaptive_gauss_legendre(lambda x: np.maximum(probe.raw(x), 0.0)[None, :],
                                     lo, hi, tol=1e-12)
    return float(val[0])


def component_estimate(lambda_hat, basis: HermiteBasis):
    """Normalized positive-part component densities and weight estimates.

    Returns ``(f1_hat, f2_hat, (w1_hat, w2_hat))``.
    """
    lam = np.asarray(lambda_hat, dtype=float)
    ell = basis.ell
    lo, hi = basis.domain()
    out = []
    weights = []
    for i, c in enumerate(basis.centers):
        coefs = lam[i * ell:(i + 1) * ell]
        mass = _positive_mass(coefs, c, basis.sigma, lo, hi)
        if mass <= 1e-8:
            raise DegenerateEstimateError(f"component {i + 1} has vanishing positive part")
        out.append(ComponentDensity(coefs, c, basis.sigma, mass, lo, hi))
        weights.append(mass)
    return out[0], out[1], tuple(weights)


def choose_ell(epsilon: float, r_i: float, sigma: float) -> int:
    """Truncation level ``max(floor(log(1/eps)), floor(2 e r_i^2 / sigma^2)) + 1``."""
    if not 0 < epsilon < 1:
        raise InvalidArgumentError("epsilon must lie in (0, 1)")
    if r_i <= 0 or sigma <= 0:
        raise InvalidArgumentError("r_i and sigma must be positive")
    return max(math.floor(math.log(1.0 / epsilon)),
               math.floor(2.0 * math.e * r_i * r_i / (sigma * sigma))) + 1


def min_ell(r_i: float, sigma: float) -> int:
    return math.floor(2.0 * math.e * r_i * r_i / (sigma * sigma)) + 1


def default_epsilon(n: int) -> float:
    return float(n) ** -0.4


@dataclass
class HermiteSplit:
    basis: HermiteBasis
    A: np.ndarray
    y_hat: np.ndarray
    lambda_hat: np.ndarray
    f1_hat: ComponentDensity
    f2_hat: ComponentDensity
    weights: tuple = field(default=(np.nan, np.nan))


def hermite_split(samples=None, c1: float = 0.0, c2: float = 1.0, sigma: float = 1.0,
                  ell: int | None = None, epsilon: float | None = None,
                  r1: float = 0.0, r2: float = 0.0, fhat: Callable | None = None,
                  bandwidth: float | None = None) -> HermiteSplit:
    """Full pipeline: density estimate, projection, solve, positive part.

    Either ``samples`` (a KDE is fitted) or a callable ``fhat`` must be
    given.  When ``ell`` is omitted it is chosen from ``epsilon`` (default
    ``n^(-2/5)``) and the larger halfwidth.
    """
    if fhat is None:
        if samples is None:
            raise InvalidArgumentError("need samples or fhat")
        fhat = kde_fit(samples, bandwidth)
    if ell is None:
        if epsilon is None:
            if samples is None:
                raise InvalidArgumentError("need ell or epsilon when no samples are given")
            epsilon = default_epsilon(np.asarray(samples).size)
        ell = choose_ell(epsilon, max(r1, r2, 1e-12), sigma)
    need = min_ell(max(r1, r2), sigma)
    if ell < need:
        warnings.warn(
            f"ell={ell} is below floor(2e r^2/sigma^2)+1={need}; the error bound does not apply",
            stacklevel=2,
        )
    basis = HermiteBasis(sigma, c1, c2, int(ell), r1, r2)
    A = build_A(basis)
    y_hat = project_yhat(fhat, basis)
    lam = solve_lambda(A, y_hat, basis)
    f1, f2, w = component_estimate(lam, basis)
    return HermiteSplit(basis, A, y_hat, lam, f1, f2, w)
