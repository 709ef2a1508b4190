"""Generative model: hyperparameters, chain state and log densities.

A fitted model is a finite mixture of ``K`` components.  Component ``k`` is
a Dirichlet process mixture of Gaussians whose base measure confines atom
locations to the region ``[c_k - r_k, c_k + r_k]`` (an interval in one
dimension, an axis-aligned cube otherwise).  A repulsive prior keeps the
regions disjoint.  With ``separation_axis="scale"`` (one dimension only)
the regions constrain the kernel standard deviation instead.

Labels are zero based; the optional uniform background component uses
label ``-1`` and its weight is stored last in ``w``.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, fields
from itertools import combinations

import numpy as np
from scipy import special

from npmix import rngdist
from npmix.errors import InvalidArgumentError

BACKGROUND = -1
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class Hyperparams:
    """Fixed model constants.

    ``eta`` is the prior standard deviation of region centres around
    ``mu0`` (isotropic in several dimensions); ``sigma0`` is the spread of
    atom locations around their region centre.  ``iw_df``/``iw_scale`` and
    ``dirichlet_conc`` default to ``m + 2``, the identity and ``1/K``.
    """

    K: int = 2
    dim: int = 1
    dp_alpha: float = 1.0
    mu0: float | list = 0.0
    eta: float = 10.0
    gamma_shape: float = 2.0
    gamma_rate: float = 2.0
    tau: float = 1.0
    nu: int = 2
    sigma0: float = 1.0
    theta1: float = 2.0
    theta2: float = 1.0
    iw_df: float | None = None
    iw_scale: list | None = None
    dirichlet_conc: float | None = None
    separation_axis: str = "location"
    regions_fixed: bool = False
    fixed_centers: list | None = None
    fixed_halfwidths: list | None = None
    background: list | None = None  # [[lo_1..lo_m], [hi_1..hi_m]]
    scale_mu0: float = 1.0
    scale_eta: float = 1.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.K < 1 or self.dim < 1:
            raise InvalidArgumentError("K and dim must be positive")
        for name in ("dp_alpha", "eta", "gamma_shape", "gamma_rate", "tau", "sigma0",
                     "theta1", "theta2", "scale_eta"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"{name} must be positive")
        if int(self.nu) != self.nu or self.nu < 1:
            raise InvalidArgumentError("nu must be a positive integer")
        if self.iw_df is not None and not self.iw_df > self.dim - 1:
            raise InvalidArgumentError("iw_df must exceed dim - 1")
        if self.iw_scale is not None:
            rngdist.check_spd(np.asarray(self.iw_scale, dtype=float).reshape(self.dim, self.dim),
                              "iw_scale")
        if self.separation_axis not in ("location", "scale"):
            raise InvalidArgumentError("separation_axis must be 'location' or 'scale'")
        if self.separation_axis == "scale" and self.dim != 1:
            raise InvalidArgumentError("scale-axis separation is only defined in one dimension")
        if self.regions_fixed:
            if self.fixed_centers is None or self.fixed_halfwidths is None:
                raise InvalidArgumentError("regions_fixed requires fixed_centers and fixed_halfwidths")
            c = np.asarray(self.fixed_centers, dtype=float).reshape(-1, self.dim)
            r = np.asarray(self.fixed_halfwidths, dtype=float).ravel()
            if c.shape[0] != self.K or r.size != self.K:
                raise InvalidArgumentError("number of fixed regions must equal K")
            if np.any(r <= 0):
                raise InvalidArgumentError("fixed halfwidths must be positive")
        if self.background is not None:
            lo, hi = self.window
            if np.any(hi <= lo):
                raise InvalidArgumentError("background window must have positive volume")
        if self.dirichlet_conc is not None and not self.dirichlet_conc > 0:
            raise InvalidArgumentError("dirichlet_conc must be positive")

    # derived quantities -----------------------------------------------------

    @property
    def conc(self) -> float:
        return self.dirichlet_conc if self.dirichlet_conc is not None else 1.0 / self.K

    @property
    def mu0_vec(self) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.mu0, dtype=float), (self.dim,)).copy()

    @property
    def df(self) -> float:
        return self.iw_df if self.iw_df is not None else self.dim + 2.0

    @property
    def psi(self) -> np.ndarray:
        if self.iw_scale is None:
            return np.eye(self.dim)
        return np.asarray(self.iw_scale, dtype=float).reshape(self.dim, self.dim)

    @property
    def has_background(self) -> bool:
        return self.background is not None

    @property
    def window(self):
        b = np.asarray(self.background, dtype=float).reshape(2, self.dim)
        return b[0], b[1]

    @property
    def background_logdensity(self) -> float:
        lo, hi = self.window
        return -float(np.sum(np.log(hi - lo)))

    @property
    def scale_axis(self) -> bool:
        return self.separation_axis == "scale"

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown hyperparameter(s): {sorted(unknown)}")
        return cls(**d)


@dataclass
class Atoms:
    """Instantiated atoms of one component's stick-breaking measure."""

    u: np.ndarray  # (J, m)
    cov: np.ndarray  # (J, m, m)
    beta: np.ndarray  # (J,)
    rest: float = 1.0  # unrepresented stick mass

    @classmethod
    def empty(cls, m: int) -> "Atoms":
        return cls(np.zeros((0, m)), np.zeros((0, m, m)), np.zeros(0), 1.0)

    def __len__(self):
        return self.beta.size

    @property
    def sigma2(self) -> np.ndarray:
        """Kernel variances (one dimension)."""
        return self.cov[:, 0, 0]

    def append(self, u, cov, beta):
        self.u = np.concatenate([self.u, np.atleast_2d(u)])
        self.cov = np.concatenate([self.cov, cov.reshape(-1, *self.cov.shape[1:])])
        self.beta = np.concatenate([self.beta, np.atleast_1d(beta)])

    def take(self, keep) -> "Atoms":
        return Atoms(self.u[keep].copy(), self.cov[keep].copy(), self.beta[keep].copy(), self.rest)


@dataclass
class ChainState:
    w: np.ndarray  # (K,) or (K+1,) with background last
    c: np.ndarray  # (K, m)
    r: np.ndarray  # (K,)
    atoms: list  # list[Atoms], length K
    z: np.ndarray  # (n,) in {-1, 0..K-1}
    s: np.ndarray  # (n,) atom index within component (0 for background)
    rho_star_kj: list = field(default_factory=list)  # per component (J_k,)
    i_star_kj: list = field(default_factory=list)  # per component (J_k,)
    rho_star_bg: float = 1.0
    i_star_bg: int = -1
    rho_star: float = 1.0
    xi: float = 0.0

    @property
    def K(self) -> int:
        return self.c.shape[0]

    @property
    def dim(self) -> int:
        return self.c.shape[1]

    def copy(self) -> "ChainState":
        return copy.deepcopy(self)

    def snapshot(self, iteration: int = -1) -> "Snapshot":
        return Snapshot(
            iteration=iteration,
            w=self.w.copy(),
            c=self.c.copy(),
            r=self.r.copy(),
            atoms=[a.take(slice(None)) for a in self.atoms],
        )


@dataclass
class Snapshot:
    """Parameters retained from one iteration (labels are not stored)."""

    iteration: int
    w: np.ndarray
    c: np.ndarray
    r: np.ndarray
    atoms: list

    @property
    def K(self):
        return self.c.shape[0]

    @property
    def dim(self):
        return self.c.shape[1]


@dataclass
class Dataset:
    x: np.ndarray
    columns: list = field(default_factory=list)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise InvalidArgumentError("data must be an (n, m) array")
        if not np.all(np.isfinite(x)):
            raise InvalidArgumentError("data contain non-finite values")
        self.x = x
        if not self.columns:
            self.columns = [f"x{i + 1}" for i in range(x.shape[1])]

    @property
    def n(self):
        return self.x.shape[0]

    @property
    def dim(self):
        return self.x.shape[1]


# ---------------------------------------------------------------------------
# repulsive prior
# ---------------------------------------------------------------------------


def region_gaps(c, r, norm: str = "inf") -> np.ndarray:
    """Pairwise gaps ``dist(c_i, c_j) - r_i - r_j`` for i < j."""
    c = np.asarray(c, dtype=float)
    if c.ndim == 1:
        c = c[:, None]
    r = np.asarray(r, dtype=float)
    K = c.shape[0]
    out = []
    for i, j in combinations(range(K), 2):
        out.append(float(np.max(np.abs(c[i] - c[j]))) - r[i] - r[j])
    return np.asarray(out)


def log_repulsion(c, r, tau: float, nu: int) -> float:
    """``min_{i<j} -tau / max(gap_ij, 0)^nu``; ``-inf`` on overlap, 0 when K=1."""
    gaps = region_gaps(c, r)
    if gaps.size == 0:
        return 0.0
    g = float(gaps.min())
    if g <= 0:
        return -math.inf
    return -tau / g ** nu


def _log_center_prior(c, hp: Hyperparams) -> float:
    c = np.asarray(c, dtype=float).reshape(-1, hp.dim)
    if hp.scale_axis:
        return float(np.sum(rngdist.normal_logpdf(c, hp.scale_mu0, hp.scale_eta)))
    return float(np.sum(rngdist.normal_logpdf(c, hp.mu0_vec, hp.eta)))


def log_repulsive_prior(c, r, hp: Hyperparams) -> float:
    """Unnormalized log prior of region centres and halfwidths (one dimension)."""
    c = np.asarray(c, dtype=float).ravel()
    r = np.asarray(r, dtype=float).ravel()
    if np.any(r <= 0):
        return -math.inf
    base = _log_center_prior(c[:, None], hp) + float(
        np.sum(rngdist.gamma_logpdf(r, hp.gamma_shape, hp.gamma_rate)))
    return base + log_repulsion(c[:, None], r, hp.tau, hp.nu)


def log_repulsive_prior_mv(c, r, hp: Hyperparams) -> float:
    """Multivariate version with L-infinity centre distances."""
    c = np.asarray(c, dtype=float).reshape(-1, hp.dim)
    r = np.asarray(r, dtype=float).ravel()
    if np.any(r <= 0):
        return -math.inf
    base = _log_center_prior(c, hp) + float(
        np.sum(rngdist.gamma_logpdf(r, hp.gamma_shape, hp.gamma_rate)))
    return base + log_repulsion(c, r, hp.tau, hp.nu)


# ---------------------------------------------------------------------------
# base measure
# ---------------------------------------------------------------------------


def location_truncation_logmass(r: float, hp: Hyperparams) -> float:
    """log P(u in region) for u ~ N(c, sigma0^2 I): ``m log(1 - 2 Phi(-r/sigma0))``."""
    return hp.dim * float(np.log1p(-2.0 * special.ndtr(-r / hp.sigma0)))


def scale_interval(c: float, r: float):
    """Allowed kernel standard deviations for a scale-axis region."""
    return max(c - r, 0.0), c + r


def scale_truncation_logmass(c: float, r: float, hp: Hyperparams) -> float:
    lo, hi = scale_interval(c, r)
    if hi <= 0:
        return -math.inf
    # P(lo^2 < sigma^2 < hi^2) under InvGamma(theta1, theta2)
    a = hp.theta1
    p_hi = special.gammaincc(a, hp.theta2 / hi ** 2)
    p_lo = special.gammaincc(a, hp.theta2 / lo ** 2) if lo > 0 else 0.0
    mass = p_hi - p_lo
    if mass <= 0:
        # fall back to the lower regularized function for the upper tail
        mass = special.gammainc(a, hp.theta2 / lo ** 2) - special.gammainc(a, hp.theta2 / hi ** 2)
    return math.log(mass) if mass > 0 else -math.inf


def log_base_measure(u, sigma2, k: int, state: ChainState, hp: Hyperparams) -> float:
    """Log density of component ``k``'s base measure at ``(u, sigma)``.

    In one dimension the density is with respect to ``(u, sigma)`` and
    carries the ``2 sigma`` Jacobian of the variance parametrization; in
    several dimensions ``sigma2`` is a covariance matrix and the density is
    with respect to ``(u, Sigma)``.
    """
    c, r = state.c[k], float(state.r[k])
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if hp.dim == 1:
        s2 = float(np.asarray(sigma2).ravel()[0])
        if not s2 > 0:
            return -math.inf
        sigma = math.sqrt(s2)
        lig = float(rngdist.inverse_gamma_logpdf(s2, hp.theta1, hp.theta2))
        if hp.scale_axis:
            lo, hi = scale_interval(float(c[0]), r)
            if not lo <= sigma <= hi:
                return -math.inf
            lu = float(rngdist.normal_logpdf(u[0], hp.mu0_vec[0], hp.sigma0))
            return lu + lig + math.log(2.0 * sigma) - scale_truncation_logmass(float(c[0]), r, hp)
        if abs(u[0] - c[0]) > r:
            return -math.inf
        lu = float(rngdist.normal_logpdf(u[0], c[0], hp.sigma0))
        return lu - location_truncation_logmass(r, hp) + lig + math.log(2.0 * sigma)
    if np.max(np.abs(u - c)) > r:
        return -math.inf
    lu = float(np.sum(rngdist.normal_logpdf(u, c, hp.sigma0)))
    liw = float(rngdist.inverse_wishart_logpdf(np.asarray(sigma2, dtype=float), hp.df, hp.psi))
    return lu - location_truncation_logmass(r, hp) + liw


def sample_base(k_center, k_halfwidth, hp: Hyperparams, rng, size: int):
    """``size`` independent atoms ``(u, cov)`` from one component's base measure."""
    m = hp.dim
    c = np.asarray(k_center, dtype=float).reshape(m)
    r = float(k_halfwidth)
    if size == 0:
        return np.zeros((0, m)), np.zeros((0, m, m))
    if hp.scale_axis:
        lo, hi = scale_interval(float(c[0]), r)
        s2 = rngdist.sample_truncated_inverse_gamma(hp.theta1, hp.theta2, lo * lo, hi * hi, rng,
                                                    size=size)
        u = rngdist.as_generator(rng).normal(hp.mu0_vec[0], hp.sigma0, size=size)
        return u.reshape(size, 1), np.asarray(s2).reshape(size, 1, 1)
    u = rngdist.sample_truncated_normal(c, hp.sigma0, c - r, c + r, rng, size=(size, m))
    u = np.asarray(u).reshape(size, m)
    if m == 1:
        s2 = rngdist.sample_inverse_gamma(hp.theta1, hp.theta2, rng, size=size)
        return u, np.asarray(s2).reshape(size, 1, 1)
    cov = rngdist.sample_inverse_wishart(hp.df, hp.psi, rng, size=size)
    return u, cov


# ---------------------------------------------------------------------------
# mixture densities
# ---------------------------------------------------------------------------

_PREDICTIVE_DRAWS = 64
_PREDICTIVE_SEED = 0x5EED


def atom_logpdf(x, u, cov) -> np.ndarray:
    """``log g(x_i; u_j, cov_j)`` as an ``(n, J)`` matrix."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    J, m = u.shape
    if J == 0:
        return np.zeros((x.shape[0], 0))
    if m == 1:
        var = cov[:, 0, 0]
        d = x[:, 0:1] - u[:, 0][None, :]
        return -0.5 * (d * d / var[None, :] + _LOG_2PI + np.log(var)[None, :])
    L = np.linalg.cholesky(cov)  # (J, m, m)
    Linv = np.linalg.inv(L)
    d = x[:, None, :] - u[None, :, :]  # (n, J, m)
    sol = np.einsum("jab,njb->nja", Linv, d)
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return -0.5 * (np.sum(sol * sol, axis=-1) + m * _LOG_2PI + logdet[None, :])


def predictive_atoms(center, halfwidth, hp: Hyperparams):
    """Fixed-seed base-measure draws standing in for the unrepresented stick
    mass when a density is evaluated outside the sampler."""
    rng = rngdist.RngStream(_PREDICTIVE_SEED)
    return sample_base(center, halfwidth, hp, rng, _PREDICTIVE_DRAWS)


def component_logpdf(state, k: int, x, hp: Hyperparams | None = None) -> np.ndarray:
    """Log density of component ``k`` at each row of ``x``.

    The residual stick mass is spread over the base-measure predictive when
    ``hp`` is given; otherwise the represented atoms are renormalized.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if state.dim == 1 else x[None, :]
    at = state.atoms[k]
    terms = []
    if len(at):
        terms.append(atom_logpdf(x, at.u, at.cov) + np.log(np.maximum(at.beta, 1e-300))[None, :])
    rest = at.rest if hp is not None else 0.0
    if hp is not None and rest > 0:
        pu, pc = predictive_atoms(state.c[k], state.r[k], hp)
        lp = atom_logpdf(x, pu, pc) + math.log(rest / _PREDICTIVE_DRAWS)
        terms.append(lp)
    if not terms:
        raise InvalidArgumentError(f"component {k} has no atoms")
    allterms = np.concatenate(terms, axis=1)
    out = special.logsumexp(allterms, axis=1)
    if hp is None:
        out = out - math.log(float(at.beta.sum()))
    return out


def mixture_logpdf(state, x, hp: Hyperparams | None = None) -> np.ndarray:
    """Log of ``sum_k w_k G_k(x)`` plus the background term when enabled."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if state.dim == 1 else x[None, :]
    K = state.K
    cols = []
    for k in range(K):
        with np.errstate(divide="ignore"):
            cols.append(component_logpdf(state, k, x, hp) + math.log(state.w[k]) if state.w[k] > 0
                        else np.full(x.shape[0], -np.inf))
    if hp is not None and hp.has_background and state.w.size > K:
        lo, hi = hp.window
        inside = np.all((x >= lo) & (x <= hi), axis=1)
        with np.errstate(divide="ignore"):
            bg = np.where(inside, hp.background_logdensity, -np.inf) + math.log(state.w[K])
        cols.append(bg)
    return special.logsumexp(np.stack(cols, axis=1), axis=1)
