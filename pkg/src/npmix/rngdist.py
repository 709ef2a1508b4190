"""Seeded sampling and density evaluation for the model's distributions.

Every sampler takes an ``rng`` argument that is either an :class:`RngStream`
or a :class:`numpy.random.Generator`.  Streams are counter based (Philox),
so a ``(seed, stream_id)`` pair always reproduces the same draws no matter
which thread consumes it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import special

from npmix.errors import InvalidArgumentError, NumericalMassError

_MASK64 = (1 << 64) - 1


def _mix64(x: int) -> int:
    """splitmix64 finalizer; a cheap bijective 64-bit hash."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)

# Standardized lower bound above which inverse-CDF sampling is replaced by
# exponential-tilted rejection.
TAIL_THRESHOLD = 5.0

# Truncation sets whose log-probability falls below this are rejected.
MIN_LOG_MASS = -5000.0


@dataclass(frozen=True)
class RngStream:
    """A counter-based random stream identified by ``(seed, stream_id)``.

    Child streams are derived with :meth:`spawn`, which hashes the parent
    identity together with arbitrary integer keys (sweep index, block index,
    ...).  Draw sequences depend only on the identity, never on scheduling.
    """

    seed: int
    stream_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)
        object.__setattr__(self, "stream_id", int(self.stream_id) & _MASK64)

    @property
    def generator(self) -> np.random.Generator:
        gen = self.__dict__.get("_gen")
        if gen is None:
            gen = np.random.Generator(
                np.random.Philox(key=(self.stream_id << 64) | self.seed)
            )
            object.__setattr__(self, "_gen", gen)
        return gen

    def spawn(self, *keys: int) -> "RngStream":
        h = _mix64(self.stream_id ^ 0x6A09E667F3BCC909)
        for k in keys:
            h = _mix64(h ^ (int(k) & _MASK64))
        # fold in the key count so spawn(a) and spawn(a, 0) differ
        return RngStream(self.seed, _mix64(h ^ len(keys)))

    def fresh(self) -> "RngStream":
        """Same identity, draw counter reset to zero."""
        return RngStream(self.seed, self.stream_id)


RngLike = Union[RngStream, np.random.Generator]


def as_generator(rng: RngLike) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    raise InvalidArgumentError(f"expected RngStream or Generator, got {type(rng)!r}")


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)


def normal_pdf(x, mu=0.0, sigma=1.0):
    z = (np.asarray(x, dtype=float) - mu) / sigma
    return np.exp(-0.5 * z * z - _LOG_SQRT_2PI) / sigma


def normal_logpdf(x, mu=0.0, sigma=1.0):
    z = (np.asarray(x, dtype=float) - mu) / sigma
    return -0.5 * z * z - _LOG_SQRT_2PI - np.log(sigma)


def normal_cdf(x):
    """Standard normal CDF."""
    return special.ndtr(x)


def gamma_logpdf(x, shape, rate):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        out = shape * np.log(rate) - special.gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x
    return np.where(x > 0, out, -np.inf)


def inverse_gamma_logpdf(x, shape, scale):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = shape * np.log(scale) - special.gammaln(shape) - (shape + 1.0) * np.log(x) - scale / x
    return np.where(x > 0, out, -np.inf)


def inverse_gamma_cdf(x, shape, scale):
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore"):
        out = special.gammaincc(shape, scale / np.where(x > 0, x, np.nan))
    return np.where(x > 0, out, 0.0)


def inverse_wishart_logpdf(X, df, scale):
    X = np.asarray(X, dtype=float)
    scale = np.asarray(scale, dtype=float)
    m = scale.shape[0]
    _, logdet_s = np.linalg.slogdet(scale)
    _, logdet_x = np.linalg.slogdet(X)
    tr = np.trace(scale @ np.linalg.inv(X))
    return (
        0.5 * df * logdet_s
        - 0.5 * df * m * math.log(2.0)
        - special.multigammaln(0.5 * df, m)
        - 0.5 * (df + m + 1) * logdet_x
        - 0.5 * tr
    )


def mvn_logpdf(x, mean, cov):
    """Log density of N(mean, cov), batched over leading axes of ``x``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    mean = np.asarray(mean, dtype=float)
    L = np.linalg.cholesky(cov)
    diff = x - mean
    sol = np.linalg.solve(L, diff.T).T
    m = mean.shape[-1]
    return -0.5 * np.sum(sol * sol, axis=-1) - np.sum(np.log(np.diag(L))) - m * _LOG_SQRT_2PI


# ---------------------------------------------------------------------------
# univariate samplers
# ---------------------------------------------------------------------------


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidArgumentError("non-finite argument")


def _standard_tn(a, b, gen):
    """Standard normal truncated to [a, b], elementwise; a < b."""
    if (a < 0.0).all() and (b > 0.0).all():
        # every interval straddles zero: nothing is flipped, all central
        pa = special.ndtr(a)
        z = special.ndtri(pa + gen.random(a.shape) * (special.ndtr(b) - pa))
        return np.clip(z, a, b)
    out = np.empty(a.shape)
    flip = b <= 0.0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    # now either lo < 0 < hi (central) or lo >= 0 (upper side)
    central = lo < 0.0
    upper = ~central & (lo <= TAIL_THRESHOLD)
    tail = ~central & ~upper

    if central.any():
        pa = special.ndtr(lo[central])
        pb = special.ndtr(hi[central])
        u = gen.random(pa.shape)
        out[central] = special.ndtri(pa + u * (pb - pa))
    if upper.any():
        # survival-function inversion keeps precision on the right side
        qa = special.ndtr(-lo[upper])
        qb = special.ndtr(-hi[upper])
        u = gen.random(qa.shape)
        out[upper] = -special.ndtri(qb + u * (qa - qb))
    if tail.any():
        out[tail] = _tail_rejection(lo[tail], hi[tail], gen)

    out = np.where(flip, -out, out)
    return np.clip(out, a, b)


def _tail_rejection(a, b, gen):
    """Exponential-tilted rejection for a > TAIL_THRESHOLD (Robert 1995)."""
    out = np.empty(a.shape)
    todo = np.arange(a.size)
    lam = 0.5 * (a + np.sqrt(a * a + 4.0))
    narrow = (b - a) < 1.0 / a
    for _ in range(10_000):
        if todo.size == 0:
            return out
        aa, bb, ll, nn = a[todo], b[todo], lam[todo], narrow[todo]
        # wide intervals: shifted exponential proposal
        x_exp = aa + gen.exponential(size=todo.size) / ll
        acc_exp = np.exp(-0.5 * (x_exp - ll) ** 2)
        # narrow intervals: uniform proposal, acceptance >= exp(-1)
        x_uni = aa + gen.random(todo.size) * (bb - aa)
        acc_uni = np.exp(-0.5 * (x_uni * x_uni - aa * aa))
        x = np.where(nn, x_uni, x_exp)
        acc = np.where(nn, acc_uni, acc_exp)
        ok = (gen.random(todo.size) < acc) & (x <= bb)
        out[todo[ok]] = x[ok]
        todo = todo[~ok]
    raise NumericalMassError("tail rejection sampler did not terminate")


def _standard_tn_scalar(a: float, b: float, gen) -> float:
    """Scalar twin of :func:`_standard_tn`; consumes the same draws."""
    flip = b <= 0.0
    lo, hi = (-b, -a) if flip else (a, b)
    if lo < 0.0:
        pa, pb = special.ndtr(lo), special.ndtr(hi)
        z = float(special.ndtri(pa + gen.random() * (pb - pa)))
    elif lo <= TAIL_THRESHOLD:
        qa, qb = special.ndtr(-lo), special.ndtr(-hi)
        z = -float(special.ndtri(qb + gen.random() * (qa - qb)))
    else:
        z = float(_tail_rejection(np.array([lo]), np.array([hi]), gen)[0])
    z = -z if flip else z
    return min(max(z, a), b)


def sample_truncated_normal(mu, sigma, lo, hi, rng: RngLike, size=None):
    """Draw from N(mu, sigma^2) conditioned on [lo, hi].

    Arguments broadcast against each other (and ``size``).  Infinite bounds
    are allowed; ``mu`` and ``sigma`` must be finite.
    """
    gen = as_generator(rng)
    if size is None and all(isinstance(v, (float, int, np.floating, np.integer))
                            for v in (mu, sigma, lo, hi)):
        mu, sigma, lo, hi = float(mu), float(sigma), float(lo), float(hi)
        if not (math.isfinite(mu) and math.isfinite(sigma)):
            raise InvalidArgumentError("non-finite argument")
        if math.isnan(lo) or math.isnan(hi):
            raise InvalidArgumentError("NaN truncation bound")
        if not sigma > 0:
            raise InvalidArgumentError("sigma must be positive")
        if not lo < hi:
            raise InvalidArgumentError("require lo < hi")
        z = _standard_tn_scalar((lo - mu) / sigma, (hi - mu) / sigma, gen)
        return min(max(mu + sigma * z, lo), hi)

    mu, sigma, lo, hi = (np.asarray(v, dtype=float) for v in (mu, sigma, lo, hi))
    shape = np.broadcast_shapes(mu.shape, sigma.shape, lo.shape, hi.shape)
    if size is not None:
        shape = np.broadcast_shapes(shape, (size,) if np.isscalar(size) else tuple(size))
    mu, sigma, lo, hi = (v.reshape(-1) if v.shape == shape else np.broadcast_to(v, shape).ravel()
                         for v in (mu, sigma, lo, hi))
    if not np.isfinite(mu.sum() + sigma.sum()):
        _check_finite(mu, sigma)
    if np.isnan(lo.sum() - hi.sum()) and (np.isnan(lo).any() or np.isnan(hi).any()):
        raise InvalidArgumentError("NaN truncation bound")
    if sigma.size and sigma.min() <= 0:
        raise InvalidArgumentError("sigma must be positive")
    if (lo >= hi).any():
        raise InvalidArgumentError("require lo < hi")
    a = (lo - mu) / sigma
    b = (hi - mu) / sigma
    z = _standard_tn(a, b, gen)
    out = np.clip(mu + sigma * z, lo, hi).reshape(shape)
    return float(out) if out.ndim == 0 else out


def truncated_normal_logmass(mu, sigma, lo, hi):
    """log P(lo <= X <= hi) for X ~ N(mu, sigma^2), stable in both tails."""
    a = (np.asarray(lo, dtype=float) - mu) / sigma
    b = (np.asarray(hi, dtype=float) - mu) / sigma
    flip = b <= 0
    lo_s = np.where(flip, -b, a)
    hi_s = np.where(flip, -a, b)
    # P = Phi(hi_s) - Phi(lo_s) = Q(lo_s) - Q(hi_s) with Q the survival fn
    log_qa = special.log_ndtr(-lo_s)
    log_qb = special.log_ndtr(-hi_s)
    with np.errstate(divide="ignore"):
        return log_qa + np.log1p(-np.exp(np.minimum(log_qb - log_qa, 0.0)))


def sample_gamma(shape, rate, rng: RngLike, size=None):
    if np.any(np.asarray(shape) <= 0) or np.any(np.asarray(rate) <= 0):
        raise InvalidArgumentError("gamma shape and rate must be positive")
    return as_generator(rng).gamma(shape, 1.0 / np.asarray(rate, dtype=float), size=size)


def sample_beta(a, b, rng: RngLike, size=None):
    if np.any(np.asarray(a) <= 0) or np.any(np.asarray(b) <= 0):
        raise InvalidArgumentError("beta parameters must be positive")
    return as_generator(rng).beta(a, b, size=size)


def sample_inverse_gamma(shape, scale, rng: RngLike, size=None):
    """Draw with density proportional to x^(-shape-1) exp(-scale/x)."""
    shape = np.asarray(shape, dtype=float)
    scale = np.asarray(scale, dtype=float)
    if not (shape.min(initial=1.0) > 0 and scale.min(initial=1.0) > 0):
        raise InvalidArgumentError("inverse-gamma shape and scale must be positive")
    return scale / as_generator(rng).gamma(shape, 1.0, size=size)


def _trunc_exp(rate: float, a: float, b: float, gen) -> float:
    """Density proportional to exp(-rate*y) on [a, b]; rate may be <= 0."""
    w = b - a
    u = gen.random()
    if rate == 0.0:
        return a + u * w
    if rate > 0:
        return a - math.log1p(u * math.expm1(-rate * w)) / rate
    return b + math.log1p(u * math.expm1(rate * w)) / (-rate)


def _gamma_on_interval(k: float, a: float, b: float, gen, max_tries: int = 100_000) -> float:
    """Exact rejection draw from Gamma(k, 1) restricted to [a, b], for
    intervals whose probability is too small for CDF inversion."""

    def logf(y):
        return (k - 1.0) * math.log(y) - y

    if k >= 1.0:
        mode = k - 1.0
        if a >= mode:
            y0, slope = a, (k - 1.0) / a - 1.0 if a > 0 else -1.0
        elif b <= mode:
            y0, slope = b, (k - 1.0) / b - 1.0
        else:
            y0, slope = mode, None
        for _ in range(max_tries):
            if slope is None:
                y = a + gen.random() * (b - a)
                bound = logf(mode)
            else:
                y = _trunc_exp(-slope, a, b, gen)
                bound = logf(y0) + slope * (y - y0)
            if math.log(gen.random()) <= logf(y) - bound:
                return y
    else:
        for _ in range(max_tries):
            if a >= 1.0:
                # y^(k-1) <= a^(k-1) on [a, b]
                y = _trunc_exp(1.0, a, b, gen)
                acc = (k - 1.0) * (math.log(y) - math.log(a))
            else:
                # power-law proposal y^(k-1), accept with exp(-(y - a))
                lo_k, hi_k = a ** k, b ** k
                y = (lo_k + gen.random() * (hi_k - lo_k)) ** (1.0 / k)
                acc = -(y - a)
            if math.log(gen.random()) <= acc:
                return y
    raise NumericalMassError("truncated inverse-gamma tail sampler did not terminate")


def sample_truncated_inverse_gamma(shape, scale, lo, hi, rng: RngLike, size=None):
    """Inverse-gamma restricted to (lo, hi) by inverting the regularized
    incomplete gamma function."""
    gen = as_generator(rng)
    shape, scale, lo, hi = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (shape, scale, lo, hi))
    )
    if np.any(shape <= 0) or np.any(scale <= 0):
        raise InvalidArgumentError("inverse-gamma shape and scale must be positive")
    if np.any(lo < 0) or np.any(hi <= lo):
        raise InvalidArgumentError("require 0 <= lo < hi")
    if size is not None:
        shp = np.broadcast_shapes(shape.shape, (size,) if np.isscalar(size) else tuple(size))
        shape, scale, lo, hi = (np.broadcast_to(v, shp) for v in (shape, scale, lo, hi))
    # With Y = scale / X ~ Gamma(shape, 1):  X in (lo, hi)  <=>  Y in (scale/hi, scale/lo).
    with np.errstate(divide="ignore"):
        ylo = scale / hi
        yhi = np.where(lo > 0, scale / np.where(lo > 0, lo, 1.0), np.inf)
    # Work on whichever side of the median keeps the probabilities small.
    p_lo = special.gammainc(shape, ylo)
    p_hi = special.gammainc(shape, yhi)
    q_lo = special.gammaincc(shape, ylo)
    q_hi = special.gammaincc(shape, yhi)
    mass = np.maximum(p_hi - p_lo, q_lo - q_hi)
    u = gen.random(np.shape(shape))
    use_upper = p_lo > 0.5
    with np.errstate(all="ignore"):
        y_lower = special.gammaincinv(shape, p_lo + u * (p_hi - p_lo))
        y_upper = special.gammainccinv(shape, q_lo - u * (q_lo - q_hi))
    y = np.where(use_upper, y_upper, y_lower)
    # inversion loses all precision when the interval sits deep in a tail
    far = mass <= 1e-10
    if np.any(far):
        y = np.array(y, dtype=float)
        idx = np.flatnonzero(np.ravel(far))
        ks, las, lbs = (np.ravel(v)[idx] for v in (shape, ylo, yhi))
        flat = y.reshape(-1)
        for i, k, a, b in zip(idx, ks, las, lbs):
            flat[i] = _gamma_on_interval(float(k), float(a), float(b), gen)
    with np.errstate(divide="ignore"):
        x = scale / y
    x = np.clip(x, np.nextafter(lo, np.inf), np.nextafter(hi, -np.inf))
    return float(x) if np.ndim(x) == 0 else x


def sample_dirichlet(alpha, rng: RngLike, size=None):
    alpha = np.asarray(alpha, dtype=float)
    if alpha.ndim != 1 or np.any(alpha <= 0):
        raise InvalidArgumentError("Dirichlet parameters must be a positive vector")
    out = as_generator(rng).dirichlet(alpha, size=size)
    # renormalize so the simplex closes to rounding error
    return out / out.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# matrix samplers
# ---------------------------------------------------------------------------


def check_spd(S, name="matrix"):
    S = np.asarray(S, dtype=float)
    if S.ndim < 2 or S.shape[-1] != S.shape[-2]:
        raise InvalidArgumentError(f"{name} must be square")
    scale = np.max(np.abs(S)) or 1.0
    if np.max(np.abs(S - np.swapaxes(S, -1, -2))) > 1e-12 * scale:
        raise InvalidArgumentError(f"{name} is not symmetric")
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise InvalidArgumentError(f"{name} is not positive definite") from exc
    return S


def sample_inverse_wishart(df, scale, rng: RngLike, size=None):
    """Inverse-Wishart draws via the Bartlett decomposition.

    ``scale`` may be a single ``(m, m)`` matrix or a stack ``(J, m, m)``; in
    the stacked case ``df`` broadcasts against ``J`` and one draw is returned
    per matrix.
    """
    gen = as_generator(rng)
    scale = check_spd(scale, "scale")
    single = scale.ndim == 2
    if single:
        n = 1 if size is None else int(size)
        scale = np.broadcast_to(scale, (n, *scale.shape))
    J, m, _ = scale.shape
    df = np.broadcast_to(np.asarray(df, dtype=float), (J,))
    if np.any(df <= m - 1):
        raise InvalidArgumentError("inverse-Wishart requires df > dim - 1")
    # W ~ Wishart(df, scale^{-1}) = (C A)(C A)^T with C = chol(scale^{-1});
    # the returned draw is W^{-1}.
    C = np.linalg.cholesky(np.linalg.inv(scale))
    A = np.zeros((J, m, m))
    for i in range(m):
        A[:, i, i] = np.sqrt(gen.chisquare(df - i))
        if i:
            A[:, i, :i] = gen.standard_normal((J, i))
    CA = C @ A
    inv_CA = np.linalg.inv(CA)
    out = np.swapaxes(inv_CA, -1, -2) @ inv_CA
    out = 0.5 * (out + np.swapaxes(out, -1, -2))
    if single and size is None:
        return out[0]
    return out


def sample_truncated_mvn_hypercube(mu, Sigma, center, halfwidth, rng: RngLike,
                                   init=None, sweeps: int = 10):
    """N(mu, Sigma) restricted to the L-infinity ball around ``center``.

    Batched over a leading axis: ``mu`` and ``center`` of shape ``(J, m)``,
    ``Sigma`` of shape ``(J, m, m)`` and ``halfwidth`` of shape ``(J,)``.
    Unbatched inputs return a single vector.  Diagonal covariances are drawn
    exactly, coordinate by coordinate; otherwise a systematic-scan Gibbs
    sampler runs ``sweeps`` passes starting from ``init`` (or the projection
    of ``mu`` onto the box).
    """
    gen = as_generator(rng)
    mu = np.asarray(mu, dtype=float)
    single = mu.ndim == 1
    mu = np.atleast_2d(mu)
    J, m = mu.shape
    Sigma = np.asarray(Sigma, dtype=float)
    if Sigma.ndim == 2:
        Sigma = np.broadcast_to(Sigma, (J, m, m))
    center = np.broadcast_to(np.asarray(center, dtype=float), (J, m))
    halfwidth = np.broadcast_to(np.asarray(halfwidth, dtype=float), (J,))
    _check_finite(mu, Sigma, center, halfwidth)
    if np.any(halfwidth <= 0):
        raise InvalidArgumentError("halfwidth must be positive")
    lo = center - halfwidth[:, None]
    hi = center + halfwidth[:, None]
    sd = np.sqrt(np.diagonal(Sigma, axis1=-2, axis2=-1))
    logmass = truncated_normal_logmass(mu, sd, lo, hi)
    if np.any(logmass.sum(axis=-1) < MIN_LOG_MASS):
        raise NumericalMassError("hypercube carries negligible normal mass")

    off = Sigma - np.einsum("jd,de->jde", np.diagonal(Sigma, axis1=-2, axis2=-1), np.eye(m))
    if not np.any(off):
        x = sample_truncated_normal(mu, sd, lo, hi, gen)
    else:
        Q = np.linalg.inv(Sigma)
        x = np.clip(mu if init is None else np.asarray(init, dtype=float).reshape(J, m), lo, hi)
        cond_sd = 1.0 / np.sqrt(np.diagonal(Q, axis1=-2, axis2=-1))
        for _ in range(sweeps):
            for d in range(m):
                diff = x - mu
                diff[:, d] = 0.0
                cmean = mu[:, d] - np.einsum("je,je->j", Q[:, d, :], diff) / Q[:, d, d]
                x[:, d] = sample_truncated_normal(cmean, cond_sd[:, d], lo[:, d], hi[:, d], gen)
    x = np.clip(x, lo, hi)
    return x[0] if single else x
