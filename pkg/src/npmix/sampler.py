"""Slice sampler for mixtures of Dirichlet process mixtures.

One sweep runs, in order: atom extension, the map step (slice variables and
labels for every observation), mixture weights, the reduce step (atom
locations and scales from per-cluster sufficient statistics), stick
weights, slice auxiliaries, the repulsion auxiliary, region centres and
region halfwidths.

Randomness is drawn from counter-based substreams keyed by sweep, step and
block/component index, so a chain is reproducible for any thread count.
"""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special
from scipy.cluster.vq import kmeans2

from npmix import rngdist
from npmix._kernels import column_moments, map_block, pick_members
from npmix.errors import InvalidArgumentError, NumericalFailure, SliceDegenerateError
from npmix.model import (
    BACKGROUND,
    Atoms,
    ChainState,
    Dataset,
    Hyperparams,
    atom_logpdf,
    location_truncation_logmass,
    log_repulsion,
    region_gaps,
    sample_base,
    scale_interval,
    scale_truncation_logmass,
)
from npmix.rngdist import RngStream

log = logging.getLogger(__name__)

(STEP_EXTEND, STEP_MAP, STEP_W, STEP_ATOMS, STEP_BETA, STEP_SLICE, STEP_XI, STEP_C,
 STEP_R, STEP_INIT, STEP_SERIAL) = range(11)


def _substream(rng, *keys) -> np.random.Generator:
    """Child generator of an :class:`RngStream`; a bare generator is shared
    as is (steps run serially consume one stream in a fixed order)."""
    if isinstance(rng, RngStream):
        return rng.spawn(*keys).generator
    return rng

MAX_ATOMS = 1_000_000
C_REJECTION_TRIES = 1000


@dataclass
class SweepPlan:
    parallel: bool = False
    threads: int = 1
    mh_step: float = 0.3
    adapt_mh: bool = True
    block_size: int = 4096

    def __post_init__(self):
        if not self.mh_step > 0:
            raise InvalidArgumentError("mh_step must be positive")
        if self.threads < 1 or self.block_size < 1:
            raise InvalidArgumentError("threads and block_size must be positive")


@dataclass
class MHTuning:
    """Per-component random-walk scales and acceptance counters."""

    step_r: np.ndarray
    step_c: np.ndarray
    accepted: np.ndarray = None
    proposed: np.ndarray = None
    window_accepted: np.ndarray = None
    window_proposed: np.ndarray = None

    @classmethod
    def create(cls, K: int, step: float) -> "MHTuning":
        z = np.zeros(K)
        return cls(np.full(K, step), np.full(K, step), z.copy(), z.copy(), z.copy(), z.copy())

    def record(self, k: int, ok: bool):
        self.proposed[k] += 1
        self.window_proposed[k] += 1
        if ok:
            self.accepted[k] += 1
            self.window_accepted[k] += 1

    def adapt(self):
        """Nudge steps toward 25-40% acceptance; used during burn-in only."""
        with np.errstate(invalid="ignore", divide="ignore"):
            rate = self.window_accepted / self.window_proposed
        for k in range(rate.size):
            if not np.isfinite(rate[k]):
                continue
            if rate[k] < 0.25:
                self.step_r[k] *= 0.8
                self.step_c[k] *= 0.8
            elif rate[k] > 0.40:
                self.step_r[k] *= 1.25
                self.step_c[k] *= 1.25
        self.window_accepted[:] = 0
        self.window_proposed[:] = 0

    def reset_counts(self):
        self.accepted[:] = 0
        self.proposed[:] = 0

    @property
    def rate(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.accepted / self.proposed


def _available_cpus() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # not available on every platform
        return os.cpu_count() or 1


class _Pool:
    """Fork-join helper.  Never starts more workers than usable CPUs, since
    extra threads only add switching cost; with one worker it runs inline.
    Results do not depend on the worker count."""

    def __init__(self, threads: int):
        self.threads = max(1, min(int(threads), _available_cpus()))
        self._ex = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def map(self, fn, items):
        items = list(items)
        if self._ex is None or len(items) <= 1:
            return [fn(it) for it in items]
        # the caller works on the first item instead of idling
        futures = [self._ex.submit(fn, it) for it in items[1:]]
        first = fn(items[0])
        return [first] + [f.result() for f in futures]

    def close(self):
        if self._ex is not None:
            self._ex.shutdown()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


_SERIAL = _Pool(1)


# ---------------------------------------------------------------------------
# atom extension
# ---------------------------------------------------------------------------


def extend_atoms(state: ChainState, k: int, hp: Hyperparams, rng, max_atoms: int = MAX_ATOMS):
    """Stick-break new atoms for component ``k`` until the leftover mass is
    strictly below the slice threshold."""
    rho = state.rho_star
    if not 0 < rho <= 1:
        raise SliceDegenerateError(f"slice threshold {rho!r} outside (0, 1]")
    gen = rngdist.as_generator(rng)
    at = state.atoms[k]
    rest = at.rest
    new = []
    while rest >= rho:
        v = gen.beta(1.0, hp.dp_alpha)
        new.append(v * rest)
        rest = rest * (1.0 - v)
        if len(at) + len(new) > max_atoms:
            raise SliceDegenerateError(
                f"component {k} exceeded {max_atoms} atoms (slice threshold {rho:.3g})")
    if new:
        u, cov = sample_base(state.c[k], state.r[k], hp, gen, len(new))
        at.append(u, cov, np.asarray(new))
        at.rest = rest
    return state


# ---------------------------------------------------------------------------
# map step: slices and labels
# ---------------------------------------------------------------------------


@dataclass
class _FlatAtoms:
    u: np.ndarray
    cov: np.ndarray
    linv: np.ndarray  # inverse Cholesky factors of cov
    logdet: np.ndarray
    beta: np.ndarray  # (J+1,) with the background pseudo-atom last when enabled
    comp: np.ndarray
    rho: np.ndarray
    istar: np.ndarray
    offset: np.ndarray  # (K+1,)
    log_w: np.ndarray  # per column
    log_wb: np.ndarray  # per column, log w + log beta
    background: bool
    bg_logdens: float
    window: tuple


def _flatten(state: ChainState, hp: Hyperparams) -> _FlatAtoms:
    K, m = state.K, state.dim
    sizes = np.array([len(a) for a in state.atoms])
    offset = np.concatenate([[0], np.cumsum(sizes)])
    u = np.concatenate([a.u for a in state.atoms])
    cov = np.concatenate([a.cov for a in state.atoms])
    if m == 1:
        sd = np.sqrt(cov)
        linv = 1.0 / sd
        logdet = 2.0 * np.log(sd[:, 0, 0])
    else:
        L = np.linalg.cholesky(cov) if cov.shape[0] else cov.copy()
        linv = np.linalg.inv(L) if cov.shape[0] else cov.copy()
        logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    beta = np.concatenate([a.beta for a in state.atoms])
    comp = np.repeat(np.arange(K), sizes)
    rho = np.full(beta.size, np.nan)
    istar = np.full(beta.size, -1, dtype=np.int64)
    for k in range(K):
        nk = state.rho_star_kj[k].size if k < len(state.rho_star_kj) else 0
        if nk:
            rho[offset[k]:offset[k] + nk] = state.rho_star_kj[k]
            istar[offset[k]:offset[k] + nk] = state.i_star_kj[k]
    bg = hp.has_background
    if bg:
        beta = np.append(beta, 1.0)
        comp = np.append(comp, K)
        rho = np.append(rho, state.rho_star_bg)
        istar = np.append(istar, state.i_star_bg)
        window = hp.window
    else:
        window = (np.zeros(m), np.zeros(m))
    with np.errstate(divide="ignore"):
        log_w = np.log(state.w)[comp]
        log_wb = log_w + np.log(beta)
    return _FlatAtoms(u, cov, linv, logdet, beta, comp.astype(np.int64), rho, istar, offset,
                      log_w, log_wb, bg, hp.background_logdensity if bg else 0.0, window)


def _label_block_reference(x, cur, index, fa: _FlatAtoms, ncomp: int, u_slice, u_z, u_s):
    """Vectorized numpy version of the compiled map kernel (used in tests).

    Returns the component column (background is ``ncomp - 1`` when
    enabled), the flat atom column and the block log-likelihood.
    """
    b = x.shape[0]
    ll = atom_logpdf(x, fa.u, fa.cov)
    if fa.background:
        lo, hi = fa.window
        inside = np.all((x >= lo) & (x <= hi), axis=1)
        ll = np.concatenate([ll, np.where(inside, fa.bg_logdens, -np.inf)[:, None]], axis=1)
    lo_r = fa.rho[cur]
    rho = np.where(fa.istar[cur] == index, lo_r, lo_r + u_slice * (fa.beta[cur] - lo_r))

    active = fa.beta[None, :] > rho[:, None]
    score = np.where(active, ll + fa.log_w[None, :], -np.inf)
    top = score.max(axis=1)
    if not np.all(np.isfinite(top)):
        raise SliceDegenerateError("an observation has no atom above its slice")
    p = np.exp(score - top[:, None])
    onehot = np.zeros((p.shape[1], ncomp))
    onehot[np.arange(p.shape[1]), fa.comp] = 1.0
    per_comp = p @ onehot
    cum = np.cumsum(per_comp, axis=1)
    ok = (cum >= (u_z * cum[:, -1])[:, None]) & (per_comp > 0)
    zk = np.argmax(ok, axis=1)

    pz = np.where(fa.comp[None, :] == zk[:, None], p, 0.0)
    cum = np.cumsum(pz, axis=1)
    ok = (cum >= (u_s * cum[:, -1])[:, None]) & (pz > 0)
    col = np.argmax(ok, axis=1)

    loglik = float(special.logsumexp(ll + fa.log_wb[None, :], axis=1).sum())
    return zk, col, loglik


def _label_block(x, z, s, index0: int, fa: _FlatAtoms, K: int, gen, compiled: bool = True):
    """Slice reconstruction and (z, s) draws for one block of observations.

    Returns new ``z``, ``s``, the block's data log-likelihood under the
    represented mixture and each observation's flat column (background is
    the last column).
    """
    b = x.shape[0]
    J = fa.u.shape[0]
    ncomp = K + (1 if fa.background else 0)
    # one call yields the same stream as three consecutive draws of b
    u = gen.random(3 * b)
    if compiled:
        z_new = np.empty(b, dtype=np.int64)
        s_new = np.empty(b, dtype=np.int64)
        col = np.empty(b, dtype=np.int64)
        lo, hi = fa.window
        loglik, status = map_block(
            np.ascontiguousarray(x), index0, np.ascontiguousarray(z, dtype=np.int64),
            np.ascontiguousarray(s, dtype=np.int64), fa.offset, u, fa.u, fa.linv, fa.logdet,
            fa.background, lo, hi, fa.bg_logdens, fa.beta, fa.comp, fa.rho, fa.istar,
            fa.log_w, ncomp, z_new, s_new, col)
        if status:
            raise SliceDegenerateError(
                f"observation {index0 + status - 1} has no atom above its slice")
        if np.isnan(loglik):
            raise NumericalFailure("NaN in atom log densities")
        return z_new, s_new, loglik, col
    cur = np.where(z == BACKGROUND, J, fa.offset[np.maximum(z, 0)] + s).astype(np.int64)
    zk, col, loglik = _label_block_reference(x, cur, np.arange(index0, index0 + b), fa, ncomp,
                                             u[:b], u[b:2 * b], u[2 * b:])
    if np.isnan(loglik):
        raise NumericalFailure("NaN in atom log densities")
    s_new = col - fa.offset[np.minimum(zk, K - 1)]
    z_new = zk
    if fa.background:
        bgmask = zk == K
        z_new = np.where(bgmask, BACKGROUND, zk)
        s_new = np.where(bgmask, 0, s_new)
    return z_new, s_new, loglik, col


@dataclass
class _ColumnStats:
    """Per-observation flat columns with member counts and moment sums,
    shared by the updates that follow the map step."""

    col: np.ndarray  # (n,) flat column, background = J
    counts: np.ndarray  # (J+1,) int
    offset: np.ndarray  # (K+1,)
    sx: np.ndarray  # (J, m)
    sxx: np.ndarray  # (J, m, m)

    def cluster(self, k: int) -> "ClusterStats":
        a, b = self.offset[k], self.offset[k + 1]
        return ClusterStats(self.counts[a:b].astype(float), self.sx[a:b], self.sxx[a:b])


def _column_stats(x, col, offset) -> _ColumnStats:
    J = int(offset[-1])
    m = x.shape[1]
    counts = np.zeros(J + 1, dtype=np.int64)
    sx = np.zeros((J, m))
    sxx = np.zeros((J, m, m))
    column_moments(x, col, counts, sx, sxx)
    if m > 1:
        iu = np.triu_indices(m, 1)
        sxx[:, iu[1], iu[0]] = sxx[:, iu[0], iu[1]]
    return _ColumnStats(col, counts, offset, sx, sxx)


def draw_slice_and_labels(state: ChainState, data, hp: Hyperparams, rng: RngStream,
                          plan: SweepPlan | None = None, pool: _Pool = _SERIAL,
                          compiled: bool = True) -> float:
    """Map step over observation blocks.  Updates ``state.z``/``state.s`` in
    place and returns the data log-likelihood."""
    return _map_step(state, data, hp, rng, plan, pool, compiled)[0]


def _map_step(state, data, hp, rng, plan=None, pool=_SERIAL, compiled=True):
    x = data.x if isinstance(data, Dataset) else np.asarray(data, dtype=float).reshape(-1, state.dim)
    n = x.shape[0]
    if n == 0:
        return 0.0, None
    plan = plan or SweepPlan()
    fa = _flatten(state, hp)
    bs = plan.block_size
    starts = list(range(0, n, bs))

    def work(bi):
        a = starts[bi]
        sl = slice(a, min(a + bs, n))
        gen = rng.spawn(STEP_MAP, bi).generator
        return _label_block(x[sl], state.z[sl], state.s[sl], a, fa, state.K, gen, compiled)

    results = pool.map(work, range(len(starts)))
    if len(results) == 1:
        state.z, state.s, loglik, col = results[0]
    else:
        state.z = np.concatenate([r[0] for r in results])
        state.s = np.concatenate([r[1] for r in results])
        loglik = sum(r[2] for r in results)
        col = np.concatenate([r[3] for r in results])
    return loglik, _column_stats(x, col, fa.offset)


# ---------------------------------------------------------------------------
# weights and reduce step
# ---------------------------------------------------------------------------


def component_counts(state: ChainState, hp: Hyperparams, stats: _ColumnStats | None = None
                     ) -> np.ndarray:
    K = state.K
    if stats is not None:
        cs = np.concatenate([[0], np.cumsum(stats.counts)])
        counts = (cs[stats.offset[1:]] - cs[stats.offset[:-1]]).astype(float)
        if hp.has_background:
            counts = np.append(counts, float(stats.counts[-1]))
        return counts
    counts = np.bincount(state.z[state.z >= 0], minlength=K).astype(float)
    if hp.has_background:
        counts = np.append(counts, float(np.sum(state.z == BACKGROUND)))
    return counts


def weight_posterior_params(state: ChainState, hp: Hyperparams,
                            stats: _ColumnStats | None = None) -> np.ndarray:
    return hp.conc + component_counts(state, hp, stats)


def update_weights(state: ChainState, hp: Hyperparams, rng,
                   stats: _ColumnStats | None = None) -> np.ndarray:
    state.w = rngdist.sample_dirichlet(weight_posterior_params(state, hp, stats), rng)
    return state.w


@dataclass
class ClusterStats:
    n: np.ndarray  # (J,)
    sx: np.ndarray  # (J, m)
    sxx: np.ndarray  # (J, m, m)


def cluster_stats(x, s_k, J: int) -> ClusterStats:
    m = x.shape[1]
    n = np.bincount(s_k, minlength=J).astype(float)
    sx = np.stack([np.bincount(s_k, weights=x[:, a], minlength=J) for a in range(m)], axis=1)
    sxx = np.empty((J, m, m))
    for a in range(m):
        for b in range(a, m):
            v = np.bincount(s_k, weights=x[:, a] * x[:, b], minlength=J)
            sxx[:, a, b] = v
            sxx[:, b, a] = v
    return ClusterStats(n, sx, sxx)


def location_posterior(c, sigma0: float, sigma2, n, sx):
    """Conjugate normal update for an atom location (one dimension):
    returns the untruncated posterior mean and standard deviation."""
    mu = (c * sigma2 + sx * sigma0 ** 2) / (sigma2 + n * sigma0 ** 2)
    sd = 1.0 / np.sqrt(1.0 / sigma0 ** 2 + n / sigma2)
    return mu, sd


def variance_posterior(theta1: float, theta2: float, n, ss):
    """Inverse-gamma parameters for an atom variance given residual sum of squares."""
    return theta1 + 0.5 * n, theta2 + 0.5 * ss


def _reduce_component(k: int, st: ClusterStats, state: ChainState, hp: Hyperparams, gen):
    at = state.atoms[k]
    J = len(at)
    if J == 0:
        return
    c = state.c[k]
    r = float(state.r[k])
    m = hp.dim
    if m == 1:
        s2 = at.cov[:, 0, 0]
        n, sx, sxx = st.n, st.sx[:, 0], st.sxx[:, 0, 0]
        if hp.scale_axis:
            mu, sd = location_posterior(hp.mu0_vec[0], hp.sigma0, s2, n, sx)
            u = gen.normal(mu, sd)
        else:
            mu, sd = location_posterior(c[0], hp.sigma0, s2, n, sx)
            u = rngdist.sample_truncated_normal(mu, sd, c[0] - r, c[0] + r, gen)
        u = np.atleast_1d(u)
        ss = np.maximum(sxx - 2.0 * u * sx + n * u * u, 0.0)
        a, b = variance_posterior(hp.theta1, hp.theta2, n, ss)
        if hp.scale_axis:
            lo, hi = scale_interval(float(c[0]), r)
            s2_new = rngdist.sample_truncated_inverse_gamma(a, b, lo * lo, hi * hi, gen)
        else:
            s2_new = rngdist.sample_inverse_gamma(a, b, gen)
        at.u = u.reshape(J, 1)
        at.cov = np.asarray(s2_new, dtype=float).reshape(J, 1, 1)
        return
    # multivariate: truncated MVN location, inverse-Wishart covariance
    n = st.n
    prec_cov = np.linalg.inv(at.cov)  # (J, m, m)
    P = np.eye(m)[None] / hp.sigma0 ** 2 + n[:, None, None] * prec_cov
    Pinv = np.linalg.inv(P)
    Pinv = 0.5 * (Pinv + np.swapaxes(Pinv, -1, -2))
    rhs = c[None, :] / hp.sigma0 ** 2 + np.einsum("jab,jb->ja", prec_cov, st.sx)
    mean = np.einsum("jab,jb->ja", Pinv, rhs)
    u = rngdist.sample_truncated_mvn_hypercube(mean, Pinv, np.broadcast_to(c, (J, m)),
                                               np.full(J, r), gen, init=at.u)
    scatter = (st.sxx - np.einsum("ja,jb->jab", u, st.sx) - np.einsum("ja,jb->jab", st.sx, u)
               + n[:, None, None] * np.einsum("ja,jb->jab", u, u))
    scatter = 0.5 * (scatter + np.swapaxes(scatter, -1, -2))
    cov = rngdist.sample_inverse_wishart(hp.df + n, hp.psi[None] + scatter, gen)
    at.u = u
    at.cov = cov


def update_atoms(state: ChainState, data, hp: Hyperparams, rng: RngStream,
                 pool: _Pool = _SERIAL, stats: _ColumnStats | None = None):
    """Reduce step: conjugate draws for every instantiated atom, one task per
    component.  Atoms without members are redrawn from the base measure."""
    x = data.x if isinstance(data, Dataset) else np.asarray(data, dtype=float).reshape(-1, state.dim)

    def work(k):
        if stats is not None:
            st = stats.cluster(k)
        else:
            mask = state.z == k
            st = cluster_stats(x[mask], state.s[mask], len(state.atoms[k]))
        _reduce_component(k, st, state, hp, rng.spawn(STEP_ATOMS, k).generator)

    pool.map(work, range(state.K))
    return state


# ---------------------------------------------------------------------------
# stick weights and slice auxiliaries
# ---------------------------------------------------------------------------


def update_beta(state: ChainState, hp: Hyperparams, rng,
                stats: _ColumnStats | None = None):
    """Joint Dirichlet over occupied atoms plus leftover mass; unoccupied
    atoms receive zero mass and are dropped (labels are re-indexed).  When
    ``stats`` is given its columns and counts are re-indexed too."""
    if stats is not None:
        offset = stats.offset
        J = int(offset[-1])
        col = stats.col
        counts = stats.counts[:J]
    else:
        sizes = np.array([len(a) for a in state.atoms], dtype=np.int64)
        offset = np.concatenate([[0], np.cumsum(sizes)])
        J = int(offset[-1])
        col = np.where(state.z == BACKGROUND, J, offset[np.maximum(state.z, 0)] + state.s)
        counts = np.bincount(col, minlength=J + 1)[:J]
    keep = counts > 0
    for k in range(state.K):
        gen = _substream(rng, STEP_BETA, k)
        at = state.atoms[k]
        ck = counts[offset[k]:offset[k + 1]].astype(float)
        kk = keep[offset[k]:offset[k + 1]]
        g = gen.standard_gamma(ck[kk]) if kk.any() else np.zeros(0)
        g0 = gen.standard_gamma(hp.dp_alpha)
        total = g.sum() + g0
        new = at.take(kk)
        new.beta = g / total
        new.rest = g0 / total
        state.atoms[k] = new
    # dead-atom garbage collection: remap surviving indices within each
    # component; the background maps to the new last column and keeps s = 0
    ckeep = np.concatenate([[0], np.cumsum(keep)])
    new_col = ckeep[col]
    new_offset = ckeep[offset]
    if state.z.size:
        state.s = new_col - new_offset[state.z]
    if stats is not None:
        stats.col = new_col
        stats.counts = np.append(counts[keep], stats.counts[J])
        stats.offset = new_offset
        stats.sx = stats.sx[keep]
        stats.sxx = stats.sxx[keep]
    return state


def update_slice_aux(state: ChainState, hp: Hyperparams, rng,
                     stats: _ColumnStats | None = None):
    """Minimum slice value per occupied atom and the global threshold."""
    gen = rngdist.as_generator(rng)
    K = state.K
    n = state.z.size
    if stats is not None:
        offset = stats.offset
        J = int(offset[-1])
        gid = stats.col
        counts = stats.counts
    else:
        sizes = np.array([len(a) for a in state.atoms])
        offset = np.concatenate([[0], np.cumsum(sizes)])
        J = int(offset[-1])
        gid = np.where(state.z == BACKGROUND, J, offset[np.maximum(state.z, 0)] + state.s)
        counts = np.bincount(gid, minlength=J + 1)
    occupied = counts > 0
    b = np.ones(J + 1)
    b[occupied] = gen.beta(1.0, counts[occupied])
    # uniform member of each occupied column as its anchor
    target = np.floor(gen.random(J + 1) * counts).astype(np.int64)
    istar = np.full(J + 1, -1, dtype=np.int64)
    if n:
        pick_members(np.ascontiguousarray(gid, dtype=np.int64), target, istar)
    beta = np.concatenate([a.beta for a in state.atoms] + [np.ones(1)])
    rho = beta * b
    state.rho_star_kj = [rho[offset[k]:offset[k + 1]].copy() for k in range(K)]
    state.i_star_kj = [istar[offset[k]:offset[k + 1]].copy() for k in range(K)]
    state.rho_star_bg = float(rho[J])
    state.i_star_bg = int(istar[J])
    live = rho[:J][occupied[:J]]
    if hp.has_background and occupied[J]:
        live = np.append(live, rho[J])
    state.rho_star = float(live.min()) if live.size else 1.0
    return state


# ---------------------------------------------------------------------------
# regions
# ---------------------------------------------------------------------------


def _min_gap(state: ChainState, hp: Hyperparams, gen) -> float:
    """Draw the repulsion auxiliary and return the gap every region pair
    must exceed while it is held fixed."""
    if state.K == 1:
        state.xi = 0.0
        return -math.inf
    lz = log_repulsion(state.c, state.r, hp.tau, hp.nu)
    if not np.isfinite(lz):
        raise AssertionError("regions overlap; chain left the prior support")
    log_xi = lz + math.log(gen.random())
    state.xi = math.exp(log_xi)
    return (hp.tau / -log_xi) ** (1.0 / hp.nu)


def center_posterior(mu0, eta: float, sigma0: float, usum, J: int):
    mu = (mu0 * sigma0 ** 2 + usum * eta ** 2) / (sigma0 ** 2 + J * eta ** 2)
    sd = 1.0 / math.sqrt(1.0 / eta ** 2 + J / sigma0 ** 2)
    return mu, sd


def _subtract(lo: float, hi: float, holes):
    """``[lo, hi]`` minus a collection of open intervals, as closed pieces."""
    pieces = [(lo, hi)]
    for a, b in holes:
        nxt = []
        for p, q in pieces:
            if b <= p or a >= q:
                nxt.append((p, q))
                continue
            if a > p:
                nxt.append((p, a))
            if b < q:
                nxt.append((b, q))
        pieces = nxt
    return [(p, q) for p, q in pieces if q > p]


def sample_normal_on_union(mu: float, sd: float, pieces, gen) -> float:
    if len(pieces) == 1:
        return rngdist.sample_truncated_normal(mu, sd, pieces[0][0], pieces[0][1], gen)
    logm = np.array([float(rngdist.truncated_normal_logmass(mu, sd, p, q)) for p, q in pieces])
    if not np.any(np.isfinite(logm)):
        raise AssertionError("empty feasible set for a region centre")
    prob = np.exp(logm - logm.max())
    i = int(np.searchsorted(np.cumsum(prob), gen.random() * prob.sum(), side="right"))
    i = min(i, len(pieces) - 1)
    return rngdist.sample_truncated_normal(mu, sd, pieces[i][0], pieces[i][1], gen)


def _update_center_location(i: int, state: ChainState, hp: Hyperparams, gmin: float, gen):
    at = state.atoms[i]
    J = len(at)
    m = state.dim
    r = state.r[i]
    mu0 = hp.mu0_vec
    usum = at.u.sum(axis=0) if J else np.zeros(m)
    mu, sd = center_posterior(mu0, hp.eta, hp.sigma0, usum, J)
    lo = at.u.max(axis=0) - r if J else np.full(m, -np.inf)
    hi = at.u.min(axis=0) + r if J else np.full(m, np.inf)
    others = [j for j in range(state.K) if j != i]
    reach = {j: r + state.r[j] + max(gmin, 0.0) for j in others}
    if m == 1:
        holes = [(state.c[j, 0] - reach[j], state.c[j, 0] + reach[j]) for j in others]
        pieces = _subtract(float(lo[0]), float(hi[0]), holes)
        state.c[i, 0] = sample_normal_on_union(float(mu[0]), sd, pieces, gen)
        return
    for _ in range(C_REJECTION_TRIES):
        cand = np.asarray(rngdist.sample_truncated_normal(mu, sd, lo, hi, gen)).reshape(m)
        if all(np.max(np.abs(cand - state.c[j])) > reach[j] for j in others):
            state.c[i] = cand
            return
    log.debug("centre %d kept after %d rejected proposals", i, C_REJECTION_TRIES)


def _region_ok(i: int, c, r: float, state: ChainState, gmin: float) -> bool:
    floor = max(gmin, 0.0)
    if state.dim == 1:
        ci = float(c[0])
        for j in range(state.K):
            if j != i and not abs(ci - state.c[j, 0]) - r - state.r[j] > floor:
                return False
        return True
    for j in range(state.K):
        if j == i:
            continue
        gap = float(np.max(np.abs(c - state.c[j]))) - r - state.r[j]
        if not gap > floor:
            return False
    return True


def _log_target_r_location(i: int, r: float, state: ChainState, hp: Hyperparams, gmin: float):
    if not r > 0:
        return -math.inf
    at = state.atoms[i]
    c = state.c[i]
    if len(at) and np.max(np.abs(at.u - c)) > r:
        return -math.inf
    if not _region_ok(i, c, r, state, gmin):
        return -math.inf
    a, b = hp.gamma_shape, hp.gamma_rate
    log_prior = a * math.log(b) - math.lgamma(a) + (a - 1.0) * math.log(r) - b * r
    # m log(1 - 2 Phi(-r / sigma0)), with 2 Phi(-t) = erfc(t / sqrt 2)
    log_mass = hp.dim * math.log1p(-math.erfc(r / (hp.sigma0 * math.sqrt(2.0))))
    return log_prior - len(at) * log_mass


def _log_target_scale(i: int, c: float, r: float, state: ChainState, hp: Hyperparams,
                      gmin: float):
    """Centre-and-halfwidth target for a scale-axis region."""
    if not r > 0:
        return -math.inf
    lo, hi = scale_interval(c, r)
    if hi <= 0:
        return -math.inf
    at = state.atoms[i]
    if len(at):
        sd = np.sqrt(at.cov[:, 0, 0])
        if np.any(sd < lo) or np.any(sd > hi):
            return -math.inf
    if not _region_ok(i, np.array([c]), r, state, gmin):
        return -math.inf
    lm = scale_truncation_logmass(c, r, hp)
    if not np.isfinite(lm):
        return -math.inf
    return (float(rngdist.normal_logpdf(c, hp.scale_mu0, hp.scale_eta))
            + float(rngdist.gamma_logpdf(r, hp.gamma_shape, hp.gamma_rate))
            - len(at) * lm)


def update_regions(state: ChainState, hp: Hyperparams, rng,
                   tuning: MHTuning | None = None):
    """Repulsion auxiliary, then every centre, then every halfwidth."""
    if hp.regions_fixed:
        return state
    tuning = tuning or MHTuning.create(state.K, SweepPlan().mh_step)
    gmin = _min_gap(state, hp, _substream(rng, STEP_XI))
    gen_c = _substream(rng, STEP_C)
    gen_r = _substream(rng, STEP_R)
    K = state.K
    if hp.scale_axis:
        for i in range(K):
            c, r = float(state.c[i, 0]), float(state.r[i])
            cur = _log_target_scale(i, c, r, state, hp, gmin)
            prop = c + tuning.step_c[i] * r * gen_c.standard_normal()
            new = _log_target_scale(i, prop, r, state, hp, gmin)
            if math.log(gen_c.random()) < new - cur:
                state.c[i, 0] = prop
        for i in range(K):
            c, r = float(state.c[i, 0]), float(state.r[i])
            cur = _log_target_scale(i, c, r, state, hp, gmin)
            prop = r * math.exp(tuning.step_r[i] * gen_r.standard_normal())
            new = _log_target_scale(i, c, prop, state, hp, gmin)
            ok = math.log(gen_r.random()) < new - cur + math.log(prop) - math.log(r)
            if ok:
                state.r[i] = prop
            tuning.record(i, ok)
        return state
    for i in range(K):
        _update_center_location(i, state, hp, gmin, gen_c)
    for i in range(K):
        r = float(state.r[i])
        cur = _log_target_r_location(i, r, state, hp, gmin)
        prop = r * math.exp(tuning.step_r[i] * gen_r.standard_normal())
        new = _log_target_r_location(i, prop, state, hp, gmin)
        ok = math.log(gen_r.random()) < new - cur + math.log(prop) - math.log(r)
        if ok:
            state.r[i] = prop
        tuning.record(i, ok)
    return state


# ---------------------------------------------------------------------------
# sweep and run
# ---------------------------------------------------------------------------


def sweep(state: ChainState, data, hp: Hyperparams, plan: SweepPlan, rng: RngStream,
          tuning: MHTuning | None = None, pool: _Pool = _SERIAL) -> tuple[ChainState, float]:
    """One full pass of the sampler.  Mutates and returns ``state`` together
    with the data log-likelihood computed in the map step."""
    # steps that always run on the calling thread share one stream; the
    # map blocks and per-component reductions get their own
    serial = rng.spawn(STEP_SERIAL).generator
    for k in range(state.K):
        extend_atoms(state, k, hp, serial)
    loglik, stats = _map_step(state, data, hp, rng, plan, pool)
    update_weights(state, hp, serial, stats)
    # the reductions are short GIL-bound numpy calls, so threads only add
    # contention there; the compiled map step is where they pay off
    update_atoms(state, data, hp, rng, _SERIAL, stats)
    update_beta(state, hp, serial, stats)
    update_slice_aux(state, hp, serial, stats)
    update_regions(state, hp, serial, tuning)
    return state, loglik


def _shrink_overlaps(c, r, margin: float = 0.95):
    """Scale halfwidths down until every region pair is disjoint."""
    r = r.copy()
    K = c.shape[0]
    for _ in range(100):
        changed = False
        for i in range(K):
            for j in range(i + 1, K):
                d = float(np.max(np.abs(c[i] - c[j])))
                if r[i] + r[j] >= margin * d:
                    f = margin * d / (r[i] + r[j]) * 0.999
                    r[i] *= f
                    r[j] *= f
                    changed = True
        if not changed:
            break
    return r


def initialize(data, hp: Hyperparams, rng: RngStream) -> ChainState:
    """k-means start: one atom per component at its cluster mean."""
    x = data.x if isinstance(data, Dataset) else np.asarray(data, dtype=float).reshape(-1, hp.dim)
    n, m = x.shape
    K = hp.K
    gen = rng.spawn(STEP_INIT).generator
    if m != hp.dim:
        raise InvalidArgumentError(f"data have {m} columns but dim={hp.dim}")

    if hp.regions_fixed:
        c = np.asarray(hp.fixed_centers, dtype=float).reshape(K, m)
        r = np.asarray(hp.fixed_halfwidths, dtype=float).ravel().copy()
        if n:
            dist = np.max(np.abs(x[:, None, :] - c[None]), axis=2) / r[None, :]
            z = np.argmin(dist, axis=1)
        else:
            z = np.zeros(0, dtype=np.int64)
    elif hp.scale_axis:
        c, r, z = _init_scale(x, hp)
    elif n >= K:
        cent, z = kmeans2(x, K, seed=gen, minit="++")
        order = np.lexsort(cent.T[::-1])
        cent = cent[order]
        z = np.argsort(order)[z]
        c = cent.copy()
        r = np.empty(K)
        for k in range(K):
            pts = x[z == k]
            dev = np.max(np.abs(pts - c[k])) if pts.size else 1.0
            r[k] = max(1.5 * dev, 1e-3)
        r = _shrink_overlaps(c, r)
    else:
        c, r = _prior_regions(hp, gen)
        z = np.zeros(n, dtype=np.int64) if n else np.zeros(0, dtype=np.int64)

    z = np.asarray(z, dtype=np.int64)
    atoms = []
    for k in range(K):
        pts = x[z == k]
        if pts.shape[0] == 0:
            atoms.append(Atoms.empty(m))
            continue
        if hp.scale_axis:
            u0 = pts.mean(axis=0)
            sd = float(np.clip(np.sqrt(np.mean((pts - u0) ** 2)), *_open(scale_interval(c[k, 0], r[k]))))
            cov = np.array([[[sd * sd]]])
        else:
            u0 = np.clip(pts.mean(axis=0), c[k] - r[k], c[k] + r[k])
            if pts.shape[0] > m:
                cov = np.cov(pts.T).reshape(m, m) + 1e-6 * np.eye(m)
            else:
                cov = np.eye(m) * (hp.theta2 / (hp.theta1 + 1) if m == 1 else 1.0)
            if m == 1:
                cov = np.maximum(cov, 1e-8)
            cov = cov[None]
        nk = pts.shape[0]
        at = Atoms(u0.reshape(1, m), cov, np.array([nk / (nk + hp.dp_alpha)]),
                   hp.dp_alpha / (nk + hp.dp_alpha))
        atoms.append(at)
    counts = np.bincount(z, minlength=K).astype(float)
    w = hp.conc + counts
    if hp.has_background:
        w = np.append(w, hp.conc)
    w = w / w.sum()
    state = ChainState(w=w, c=np.asarray(c, dtype=float).reshape(K, m), r=np.asarray(r, dtype=float),
                       atoms=atoms, z=z, s=np.zeros(n, dtype=np.int64))
    update_slice_aux(state, hp, gen)
    if not hp.regions_fixed and K > 1 and not np.all(region_gaps(state.c, state.r) > 0):
        raise AssertionError("initial regions overlap")
    return state


def _open(interval):
    lo, hi = interval
    eps = 1e-9 * max(hi, 1.0)
    return lo + eps, hi - eps


def _prior_regions(hp: Hyperparams, gen):
    """Rejection draw of (c, r) from the repulsive prior."""
    K, m = hp.K, hp.dim
    mu0 = hp.mu0_vec if not hp.scale_axis else np.array([hp.scale_mu0])
    eta = hp.eta if not hp.scale_axis else hp.scale_eta
    for _ in range(100_000):
        c = gen.normal(mu0, eta, size=(K, m))
        r = gen.gamma(hp.gamma_shape, 1.0 / hp.gamma_rate, size=K)
        if math.log(gen.random()) < log_repulsion(c, r, hp.tau, hp.nu):
            if hp.scale_axis and np.any(c[:, 0] + r <= 0):
                continue
            order = np.lexsort(c.T[::-1])
            return c[order], r[order]
    raise SliceDegenerateError("could not draw initial regions from the prior")


def _init_scale(x, hp: Hyperparams):
    """Start for scale separation: split observations by distance to the
    median and give each group a narrow interval around its spread."""
    K = hp.K
    n = x.shape[0]
    if n < K:
        gen = np.random.default_rng(0)
        c, r = _prior_regions(hp, gen)
        return c, r, np.zeros(n, dtype=np.int64)
    dev = np.abs(x[:, 0] - np.median(x[:, 0]))
    ranks = np.argsort(np.argsort(dev))
    z = np.minimum(ranks * K // n, K - 1)
    sds = np.array([max(np.sqrt(np.mean((x[z == k, 0] - x[z == k, 0].mean()) ** 2)), 1e-3)
                    for k in range(K)])
    sds = np.maximum.accumulate(sds * (1 + 1e-6 * np.arange(K)))
    gaps = np.diff(sds)
    r = np.empty(K)
    for k in range(K):
        neigh = [g for g in (gaps[k - 1] if k > 0 else None, gaps[k] if k < K - 1 else None)
                 if g is not None]
        r[k] = min(0.5 * sds[k], 0.4 * min(neigh)) if neigh else 0.5 * sds[k]
    return sds.reshape(K, 1), r, z


@dataclass
class ChainOutput:
    snapshots: list
    loglik: np.ndarray
    acceptance: np.ndarray
    timing: dict
    final_state: ChainState
    label_counts: np.ndarray
    hp: Hyperparams
    seed: int
    iters: int
    burnin: int
    thin: int
    region_trace: dict = field(default_factory=dict)

    def weights(self) -> np.ndarray:
        return np.stack([s.w for s in self.snapshots])

    def allocation(self) -> np.ndarray:
        """Posterior modal label per observation (``-1`` for background)."""
        lab = np.argmax(self.label_counts, axis=1)
        return np.where(lab == self.hp.K, BACKGROUND, lab)


def _check_state(state: ChainState, it: int):
    for at in state.atoms:
        if np.isnan(at.u).any() or np.isnan(at.cov).any() or np.isnan(at.beta).any():
            raise NumericalFailure(f"NaN in atom parameters at iteration {it}")
    if np.isnan(state.c).any() or np.isnan(state.r).any() or np.isnan(state.w).any():
        raise NumericalFailure(f"NaN in region or weight parameters at iteration {it}")


def run(data, hp: Hyperparams, plan: SweepPlan | None = None, iters: int = 1000,
        burnin: int = 0, thin: int = 1, seed: int = 0, init: ChainState | None = None,
        callback=None, adapt_every: int = 50) -> ChainOutput:
    """Run one chain and keep every ``thin``-th post-burn-in state.

    ``callback(t, state)`` is invoked after every sweep when given.
    """
    if not iters > burnin >= 0:
        raise InvalidArgumentError("require iters > burnin >= 0")
    if thin < 1:
        raise InvalidArgumentError("thin must be at least 1")
    plan = plan or SweepPlan()
    data = data if isinstance(data, Dataset) else Dataset(np.asarray(data, dtype=float).reshape(-1, hp.dim))
    root = RngStream(seed)
    state = init.copy() if init is not None else initialize(data, hp, root)
    tuning = MHTuning.create(hp.K, plan.mh_step)
    ncol = hp.K + (1 if hp.has_background else 0)
    label_counts = np.zeros((data.n, ncol), dtype=np.int64)
    label_flat = label_counts.reshape(-1)
    row_base = np.arange(data.n) * ncol
    loglik = np.empty(iters)
    snaps = []
    r_trace = []
    c_trace = []
    threads = plan.threads if plan.parallel else 1
    t0 = time.perf_counter()
    t_burn = t0
    with _Pool(threads) as pool:
        for t in range(iters):
            rng_t = root.spawn(1, t)
            _, ll = sweep(state, data, hp, plan, rng_t, tuning, pool)
            if not np.isfinite(ll) and data.n:
                raise NumericalFailure(f"non-finite log-likelihood at iteration {t}")
            _check_state(state, t)
            loglik[t] = ll
            if t < burnin:
                if plan.adapt_mh and (t + 1) % adapt_every == 0:
                    tuning.adapt()
                if t + 1 == burnin:
                    tuning.reset_counts()
                    t_burn = time.perf_counter()
            else:
                if burnin == 0 and t == 0:
                    t_burn = t0
                if (t - burnin) % thin == 0:
                    snaps.append(state.snapshot(t))
                    r_trace.append(state.r.copy())
                    c_trace.append(state.c.copy())
                    if data.n:
                        zc = np.where(state.z == BACKGROUND, hp.K, state.z)
                        label_flat[row_base + zc] += 1
            if callback is not None:
                callback(t, state)
    t1 = time.perf_counter()
    timing = {"total_s": t1 - t0, "burnin_s": t_burn - t0, "sampling_s": t1 - t_burn,
              "per_sweep_ms": 1000.0 * (t1 - t0) / iters}
    return ChainOutput(
        snapshots=snaps, loglik=loglik, acceptance=tuning.rate, timing=timing,
        final_state=state, label_counts=label_counts, hp=hp, seed=seed, iters=iters,
        burnin=burnin, thin=thin,
        region_trace={"c": np.asarray(c_trace), "r": np.asarray(r_trace)},
    )
