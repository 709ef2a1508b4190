"""Synthetic truths for simulation studies.

Every density exposes ``pdf``, ``cdf`` and ``sample(n, rng)`` together with
an interval ``(lo, hi)`` holding all but a negligible tail of its mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy.integrate import quad
from scipy.interpolate import CubicHermiteSpline

from npmix import rngdist
from npmix.errors import DegenerateEstimateError, InvalidArgumentError
from npmix.geometry import check_separation_C2
from npmix.hermite import adaptive_gauss_legendre, psi_all
from npmix.model import Dataset


class Density1D:
    lo: float
    hi: float

    def pdf(self, x):
        raise NotImplementedError

    def cdf(self, x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty_like(x)
        for i, v in enumerate(x):
            if v <= self.lo:
                out[i] = 0.0
            elif v >= self.hi:
                out[i] = 1.0
            else:
                out[i] = quad(lambda t: float(self.pdf(np.array([t]))[0]), self.lo, v,
                              limit=200, epsabs=1e-12)[0]
        return np.clip(out, 0.0, 1.0)

    def sample(self, n: int, rng) -> np.ndarray:
        raise NotImplementedError


@dataclass
class HermiteDensity(Density1D):
    """Positive part of a finite Hermite expansion, restricted to
    ``[lo, hi]`` and normalized."""

    coefs: np.ndarray
    center: float
    scale: float
    lo: float
    hi: float
    mass: float = field(init=False)
    _peak: float = field(init=False, repr=False)
    _cdf_spline: object = field(init=False, repr=False, default=None)

    def __post_init__(self):
        self.coefs = np.asarray(self.coefs, dtype=float)
        self.mass = adaptive_gauss_legendre(self._raw, self.lo, self.hi, tol=1e-12)[0]
        if not self.mass > 1e-10:
            raise DegenerateEstimateError("Hermite combination has no positive mass")
        grid = np.linspace(self.lo, self.hi, 8001)
        self._peak = float(self.pdf(grid).max())

    def _raw(self, x):
        x = np.asarray(x, dtype=float)
        vals = self.coefs @ psi_all(self.coefs.size, self.center, self.scale, x)
        return np.where((x >= self.lo) & (x <= self.hi), np.maximum(vals, 0.0), 0.0)

    def pdf(self, x):
        return self._raw(x) / self.mass

    def cdf(self, x):
        # cubic Hermite interpolation of a Gauss-Legendre cumulative table
        if self._cdf_spline is None:
            edges = np.linspace(self.lo, self.hi, 20_001)
            t, wt = np.polynomial.legendre.leggauss(8)
            half = 0.5 * np.diff(edges)
            mid = 0.5 * (edges[1:] + edges[:-1])
            nodes = mid[:, None] + half[:, None] * t[None, :]
            cells = (self.pdf(nodes.ravel()).reshape(nodes.shape) @ wt) * half
            cum = np.concatenate([[0.0], np.cumsum(cells)])
            self._cdf_spline = CubicHermiteSpline(edges, cum / cum[-1], self.pdf(edges))
        x = np.asarray(x, dtype=float)
        return np.clip(self._cdf_spline(np.clip(x, self.lo, self.hi)), 0.0, 1.0)

    def sample(self, n: int, rng) -> np.ndarray:
        gen = rngdist.as_generator(rng)
        bound = 1.05 * self._peak
        out = np.empty(0)
        while out.size < n:
            m = max(2 * (n - out.size), 64)
            x = gen.uniform(self.lo, self.hi, m)
            keep = gen.random(m) * bound < self.pdf(x)
            out = np.concatenate([out, x[keep]])
        return out[:n]


def hermite_random_density(center: float, halfwidth: float, degree: int, seed: int = 0,
                           scale: float | None = None, positive: bool = False) -> HermiteDensity:
    """Random Hermite combination with coefficients ``a_j ~ N(0, 0.5^j)``.

    The default function scale ``s = halfwidth / sqrt(2 degree + 1)`` keeps
    the oscillating part inside the halfwidth; the density is cut to
    ``center +- (halfwidth + 4 s)``.  With ``positive`` the coefficients are
    redrawn until the expansion is strictly positive on that window, so no
    part of the density is clipped to zero.
    """
    if degree < 0 or not halfwidth > 0:
        raise InvalidArgumentError("degree must be >= 0 and halfwidth > 0")
    s = scale if scale is not None else halfwidth / math.sqrt(2 * degree + 1)
    lo, hi = center - halfwidth - 4 * s, center + halfwidth + 4 * s
    root = rngdist.RngStream(seed, 0x4E)
    probe = np.linspace(lo, hi, 4001)
    tries = 5000 if positive else 100
    for attempt in range(tries):
        gen = root.spawn(attempt).generator
        a = gen.normal(0.0, np.sqrt(0.5 ** np.arange(degree + 1)))
        a[0] = abs(a[0])
        if positive and not np.all(a @ psi_all(degree + 1, center, s, probe) > 0):
            continue
        try:
            return HermiteDensity(a, center, s, lo, hi)
        except DegenerateEstimateError:
            continue
    raise DegenerateEstimateError(f"no usable Hermite combination after {tries} draws")


@dataclass
class LaplaceDensity(Density1D):
    mu: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if not self.b > 0:
            raise InvalidArgumentError("b must be positive")
        self.lo = self.mu - 40.0 * self.b
        self.hi = self.mu + 40.0 * self.b

    def pdf(self, x):
        return np.exp(-np.abs(np.asarray(x, dtype=float) - self.mu) / self.b) / (2.0 * self.b)

    def cdf(self, x):
        t = (np.asarray(x, dtype=float) - self.mu) / self.b
        return np.where(t < 0, 0.5 * np.exp(np.minimum(t, 0.0)), 1.0 - 0.5 * np.exp(-np.maximum(t, 0.0)))

    def sample(self, n: int, rng) -> np.ndarray:
        p = rngdist.as_generator(rng).random(n) - 0.5
        return self.mu - self.b * np.sign(p) * np.log1p(-2.0 * np.abs(p))


def laplace_density(mu: float = 0.0, b: float = 1.0) -> LaplaceDensity:
    return LaplaceDensity(mu, b)


@dataclass
class SkewExpPowerDensity(Density1D):
    """Epsilon-skew exponential power law.

    ``f(x) = beta / (2 alpha Gamma(1/beta)) exp(-(|x - mu| / (alpha (1 - sign(x - mu) skew)))^beta)``;
    ``skew > 0`` puts more mass left of ``mu``.
    """

    mu: float = 0.0
    alpha: float = 1.0
    beta_shape: float = 2.0
    skew: float = 0.0

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta_shape > 0 and -1 < self.skew < 1):
            raise InvalidArgumentError("need alpha > 0, beta_shape > 0 and skew in (-1, 1)")
        q = special.gammainccinv(1.0 / self.beta_shape, 1e-17) ** (1.0 / self.beta_shape)
        self.lo = self.mu - self.alpha * (1 + self.skew) * q
        self.hi = self.mu + self.alpha * (1 - self.skew) * q

    @property
    def _lognorm(self):
        return (math.log(self.beta_shape) - math.log(2 * self.alpha)
                - special.gammaln(1.0 / self.beta_shape))

    def pdf(self, x):
        d = np.asarray(x, dtype=float) - self.mu
        scale = self.alpha * (1.0 - np.sign(d) * self.skew)
        return np.exp(self._lognorm - (np.abs(d) / scale) ** self.beta_shape)

    def cdf(self, x):
        d = np.asarray(x, dtype=float) - self.mu
        a = 1.0 / self.beta_shape
        left = 0.5 * (1 + self.skew) * special.gammaincc(
            a, (np.abs(d) / (self.alpha * (1 + self.skew))) ** self.beta_shape)
        right = 0.5 * (1 + self.skew) + 0.5 * (1 - self.skew) * special.gammainc(
            a, (np.abs(d) / (self.alpha * (1 - self.skew))) ** self.beta_shape)
        return np.where(d < 0, left, right)

    def sample(self, n: int, rng) -> np.ndarray:
        # side by its mass, then the magnitude is a scaled gamma power
        gen = rngdist.as_generator(rng)
        right = gen.random(n) < 0.5 * (1 - self.skew)
        g = gen.gamma(1.0 / self.beta_shape, 1.0, n) ** (1.0 / self.beta_shape)
        mag = self.alpha * np.where(right, 1 - self.skew, 1 + self.skew) * g
        return self.mu + np.where(right, mag, -mag)


def skew_exp_power_density(mu: float = 0.0, alpha: float = 1.0, beta_shape: float = 2.0,
                           skew: float = 0.0) -> SkewExpPowerDensity:
    return SkewExpPowerDensity(mu, alpha, beta_shape, skew)


@dataclass
class GaussianMixtureDensity:
    """Finite Gaussian mixture in ``m`` dimensions."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covs = np.asarray(self.covs, dtype=float).reshape(-1, self.means.shape[1],
                                                               self.means.shape[1])
        if abs(self.weights.sum() - 1) > 1e-12:
            raise InvalidArgumentError("weights must sum to 1")
        for S in self.covs:
            rngdist.check_spd(S, "covariance")

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def support_points(self):
        return self.means

    def pdf(self, x):
        x = np.asarray(x, dtype=float).reshape(-1, self.dim)
        dens = np.zeros(x.shape[0])
        for w, mu, S in zip(self.weights, self.means, self.covs):
            dens += w * np.exp(rngdist.mvn_logpdf(x, mu, S))
        return dens

    def sample(self, n: int, rng) -> np.ndarray:
        gen = rngdist.as_generator(rng)
        lab = gen.choice(self.weights.size, size=n, p=self.weights)
        out = np.empty((n, self.dim))
        for j in range(self.weights.size):
            idx = np.nonzero(lab == j)[0]
            if idx.size:
                out[idx] = gen.multivariate_normal(self.means[j], self.covs[j], idx.size,
                                                   method="cholesky")
        return out


def gmm_on_circle(center, radius: float, n_atoms: int, cov_scale: float,
                  seed: int = 0) -> GaussianMixtureDensity:
    """Equal-weight Gaussians with means evenly spaced on a circle (first at
    angle 0) and random covariances with eigenvalues in
    ``[cov_scale/4, cov_scale]``."""
    if n_atoms < 1 or not cov_scale > 0 or radius < 0:
        raise InvalidArgumentError("need n_atoms >= 1, cov_scale > 0, radius >= 0")
    gen = rngdist.RngStream(seed, 0xC1).generator
    center = np.asarray(center, dtype=float).reshape(2)
    ang = 2 * np.pi * np.arange(n_atoms) / n_atoms
    means = center + radius * np.column_stack([np.cos(ang), np.sin(ang)])
    covs = np.empty((n_atoms, 2, 2))
    for j in range(n_atoms):
        th = gen.uniform(0, np.pi)
        R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        ev = gen.uniform(cov_scale / 4, cov_scale, 2)
        S = R @ np.diag(ev) @ R.T
        covs[j] = 0.5 * (S + S.T)
    return GaussianMixtureDensity(np.full(n_atoms, 1.0 / n_atoms), means, covs)


@dataclass
class SyntheticTruth:
    """Weighted components with exact densities.

    When ``separation_gap`` is given, every component must expose
    ``support_points`` and the collection must satisfy the C2 separation
    condition at that connectivity gap.
    """

    weights: np.ndarray
    components: list
    separation_gap: float | None = None
    description: dict = field(default_factory=dict)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.weights.size != len(self.components):
            raise InvalidArgumentError("one weight per component required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1) > 1e-12:
            raise InvalidArgumentError("weights must lie on the simplex")
        if self.separation_gap is not None:
            rep = check_separation_C2([c.support_points for c in self.components],
                                      self.separation_gap)
            if not rep.separated:
                raise InvalidArgumentError(
                    f"components not separated: within {rep.max_within} vs between {rep.min_between}")

    @property
    def K(self):
        return self.weights.size

    def pdf(self, x):
        return sum(w * np.asarray(c.pdf(x)) for w, c in zip(self.weights, self.components))

    def component_pdf(self, k: int, x):
        return self.components[k].pdf(x)


def sample_mixture(truth: SyntheticTruth, n: int, seed: int = 0):
    """Draw ``n`` labelled observations; returns ``(Dataset, labels)`` with
    zero-based labels."""
    gen = rngdist.RngStream(seed, 0x5A).generator
    labels = gen.choice(truth.K, size=n, p=truth.weights)
    first = truth.components[0].sample(1, gen)
    m = 1 if np.ndim(first) == 1 else np.shape(first)[1]
    x = np.empty((n, m))
    for k in range(truth.K):
        idx = np.nonzero(labels == k)[0]
        if idx.size:
            x[idx] = np.asarray(truth.components[k].sample(idx.size, gen)).reshape(idx.size, m)
    return Dataset(x), labels


# ---------------------------------------------------------------------------
# ready-made designs
# ---------------------------------------------------------------------------


def three_component_truth(seed: int = 0, weights=(0.3, 0.4, 0.3)) -> SyntheticTruth:
    """Location-separated Hermite / Laplace / skewed exponential-power truth."""
    comps = [
        hermite_random_density(-10.0, 1.5, 4, seed, positive=True),
        laplace_density(0.0, 0.6),
        skew_exp_power_density(10.0, 1.2, 1.5, -0.4),
    ]
    return SyntheticTruth(np.asarray(weights, dtype=float), comps,
                          description={"design": "three_component", "seed": seed})


def circle_truth(seed: int = 0, weights=(0.5, 0.5)) -> SyntheticTruth:
    """Two circle-shaped Gaussian mixtures in the plane."""
    comps = [
        gmm_on_circle((-6.0, 0.0), 2.0, 6, 0.3, seed),
        gmm_on_circle((6.0, 0.0), 2.0, 6, 0.3, seed + 1),
    ]
    return SyntheticTruth(np.asarray(weights, dtype=float), comps, separation_gap=3.0,
                          description={"design": "circle", "seed": seed})


def gaussian_truth(weights, means, sds) -> SyntheticTruth:
    """One Gaussian per component."""
    comps = [_Mix1D(GaussianMixtureDensity([1.0], [[m]], [[[s * s]]])) for m, s in zip(means, sds)]
    return SyntheticTruth(np.asarray(weights, dtype=float), comps,
                          description={"design": "gaussian", "means": list(means), "sds": list(sds)})


def scale_separated_truth(sigma_intervals=((0.2, 0.4), (1.5, 2.5)), weights=(0.5, 0.5),
                          n_atoms: int = 3, seed: int = 0) -> SyntheticTruth:
    """Two components centred at the origin whose kernel standard deviations
    fall in disjoint intervals."""
    gen = rngdist.RngStream(seed, 0x5C).generator
    comps = []
    for lo, hi in sigma_intervals:
        if not 0 < lo < hi:
            raise InvalidArgumentError("each sigma interval needs 0 < lo < hi")
        sds = gen.uniform(lo, hi, n_atoms)
        means = gen.normal(0.0, 0.25, n_atoms)
        g = GaussianMixtureDensity(np.full(n_atoms, 1.0 / n_atoms), means[:, None],
                                   (sds ** 2)[:, None, None])
        comps.append(_Mix1D(g))
    return SyntheticTruth(np.asarray(weights, dtype=float), comps,
                          description={"design": "scale", "sigma_intervals": [list(s) for s in sigma_intervals]})


@dataclass
class _Mix1D(Density1D):
    g: GaussianMixtureDensity

    def __post_init__(self):
        sd = np.sqrt(self.g.covs[:, 0, 0])
        self.lo = float(np.min(self.g.means[:, 0] - 40 * sd))
        self.hi = float(np.max(self.g.means[:, 0] + 40 * sd))

    @property
    def support_points(self):
        return self.g.means

    def pdf(self, x):
        return self.g.pdf(np.asarray(x, dtype=float).reshape(-1, 1))

    def cdf(self, x):
        sd = np.sqrt(self.g.covs[:, 0, 0])
        z = (np.asarray(x, dtype=float)[..., None] - self.g.means[:, 0]) / sd
        return special.ndtr(z) @ self.g.weights

    def sample(self, n, rng):
        return self.g.sample(n, rng)[:, 0]
