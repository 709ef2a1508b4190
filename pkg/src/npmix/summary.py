"""Posterior summaries over retained snapshots.

Components are put in canonical order (ascending first coordinate of the
region centre) snapshot by snapshot before anything is averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special
from scipy.integrate import trapezoid

from npmix.errors import InvalidArgumentError
from npmix.model import Hyperparams, component_logpdf, mixture_logpdf, predictive_atoms

DEFAULT_POINTS = 512


@dataclass
class DensityGrid:
    grid: np.ndarray | tuple  # 1-D vector, or (gx, gy) for a lattice
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    band_level: float

    @property
    def ndim(self) -> int:
        return 2 if isinstance(self.grid, tuple) else 1


@dataclass
class WeightTable:
    labels: list
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float


def canonical_order(snapshot) -> np.ndarray:
    """Component permutation sorting region centres lexicographically."""
    c = np.asarray(snapshot.c)
    return np.lexsort(c.T[::-1])


def default_grid(x, points: int = DEFAULT_POINTS, pad_sd: float = 3.0):
    """Data range padded by ``pad_sd`` sample standard deviations per axis."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    axes = []
    for a in range(x.shape[1]):
        col = x[:, a]
        sd = col.std() if col.size > 1 else 1.0
        sd = sd if sd > 0 else 1.0
        axes.append(np.linspace(col.min() - pad_sd * sd, col.max() + pad_sd * sd, points))
    return axes[0] if len(axes) == 1 else tuple(axes)


def _grid_points(grid):
    if isinstance(grid, tuple):
        gx, gy = (np.asarray(g, dtype=float) for g in grid)
        for g in (gx, gy):
            if np.any(np.diff(g) <= 0):
                raise InvalidArgumentError("grid must be strictly increasing per axis")
        X, Y = np.meshgrid(gx, gy, indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel()]), (gx.size, gy.size)
    g = np.asarray(grid, dtype=float).ravel()
    if np.any(np.diff(g) <= 0):
        raise InvalidArgumentError("grid must be strictly increasing")
    return g[:, None], (g.size,)


def _snapshots(chain):
    snaps = chain.snapshots if hasattr(chain, "snapshots") else list(chain)
    if not snaps:
        raise InvalidArgumentError("chain has no snapshots")
    return snaps


def density_values(chain, target="mixture", grid=None, hp: Hyperparams | None = None,
                   weighted: bool = False) -> np.ndarray:
    """Density of every snapshot on the grid, shape ``(S, n_points)``.

    ``target`` is ``"mixture"`` or a canonical component index.  Weighted
    component densities are multiplied by that snapshot's weight.
    """
    snaps = _snapshots(chain)
    hp = hp if hp is not None else getattr(chain, "hp", None)
    pts, _ = _grid_points(grid)
    out = np.empty((len(snaps), pts.shape[0]))
    for i, sn in enumerate(snaps):
        if target == "mixture":
            out[i] = np.exp(mixture_logpdf(sn, pts, hp))
            continue
        k = int(canonical_order(sn)[int(target)])
        v = np.exp(component_logpdf(sn, k, pts, hp))
        out[i] = v * sn.w[k] if weighted else v
    return out


def density_band(chain, target="mixture", grid=None, level: float = 0.95,
                 hp: Hyperparams | None = None, weighted: bool = False) -> DensityGrid:
    """Posterior mean density with pointwise empirical quantile bands."""
    if not 0 <= level < 1:
        raise InvalidArgumentError("level must lie in [0, 1)")
    if grid is None:
        raise InvalidArgumentError("a grid is required (see default_grid)")
    vals = density_values(chain, target, grid, hp, weighted)
    _, shape = _grid_points(grid)
    q = (1.0 - level) / 2.0
    lo, hi = np.quantile(vals, [q, 1.0 - q], axis=0)
    # offset from the pointwise minimum so a constant chain reproduces its value exactly
    ref = vals.min(axis=0)
    mean = ref + (vals - ref).mean(axis=0)
    return DensityGrid(grid, mean.reshape(shape), lo.reshape(shape), hi.reshape(shape), level)


def weight_table(chain, level: float = 0.68) -> WeightTable:
    """Posterior mean weights with central ``level`` intervals
    (16%/84% quantiles by default); background weight is reported last."""
    snaps = _snapshots(chain)
    K = snaps[0].K
    rows = []
    for sn in snaps:
        order = canonical_order(sn)
        w = np.asarray(sn.w)
        rows.append(np.concatenate([w[order], w[K:]]))
    W = np.stack(rows)
    q = (1.0 - level) / 2.0
    lo, hi = np.quantile(W, [q, 1.0 - q], axis=0)
    labels = [str(k) for k in range(K)] + (["background"] if W.shape[1] > K else [])
    return WeightTable(labels, W.mean(axis=0), lo, hi, level)


# ---------------------------------------------------------------------------
# CDFs
# ---------------------------------------------------------------------------

_CLIP = 38.0


def bivariate_normal_cdf(h, k, rho):
    """``P(X <= h, Y <= k)`` for standard normals with correlation ``rho``,
    via Owen's T function."""
    h = np.clip(np.asarray(h, dtype=float), -_CLIP, _CLIP)
    k = np.clip(np.asarray(k, dtype=float), -_CLIP, _CLIP)
    rho = np.asarray(rho, dtype=float)
    h, k, rho = np.broadcast_arrays(h, k, rho)
    tiny = 1e-300
    hh = np.where(h == 0, tiny, h)
    kk = np.where(k == 0, tiny, k)
    s = np.sqrt(np.maximum(1.0 - rho * rho, 0.0))
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ah = (kk - rho * hh) / (hh * s)
        ak = (hh - rho * kk) / (kk * s)
    out = (0.5 * special.ndtr(h) + 0.5 * special.ndtr(k)
           - special.owens_t(hh, ah) - special.owens_t(kk, ak))
    # zeros were nudged positive, so a sign mismatch covers hk < 0 and the hk = 0, h + k < 0 case
    out = out - 0.5 * ((hh < 0) != (kk < 0))
    # perfectly correlated limits
    out = np.where(s == 0, np.where(rho > 0, special.ndtr(np.minimum(h, k)),
                                    np.maximum(special.ndtr(h) - special.ndtr(-k), 0.0)), out)
    return np.clip(out, 0.0, 1.0)


def _atoms_cdf(pts, u, cov):
    """``(n, J)`` CDF values of Gaussian atoms at ``pts``."""
    m = u.shape[1]
    sd = np.sqrt(np.diagonal(cov, axis1=-2, axis2=-1))  # (J, m)
    z = (pts[:, None, :] - u[None]) / sd[None]
    if m == 1:
        return special.ndtr(z[..., 0])
    if m != 2:
        raise InvalidArgumentError("CDF grids are available in one or two dimensions")
    rho = cov[:, 0, 1] / (sd[:, 0] * sd[:, 1])
    diag = np.abs(rho) < 1e-14
    out = special.ndtr(z[..., 0]) * special.ndtr(z[..., 1])
    if not np.all(diag):
        j = ~diag
        out[:, j] = bivariate_normal_cdf(z[:, j, 0], z[:, j, 1], rho[None, j])
    return out


def _snapshot_cdf(sn, pts, hp: Hyperparams | None):
    total = np.zeros(pts.shape[0])
    K = sn.K
    for k in range(K):
        at = sn.atoms[k]
        terms = []
        wts = []
        if len(at):
            terms.append(_atoms_cdf(pts, at.u, at.cov))
            wts.append(at.beta)
        if hp is not None and at.rest > 0:
            pu, pc = predictive_atoms(sn.c[k], sn.r[k], hp)
            terms.append(_atoms_cdf(pts, pu, pc))
            wts.append(np.full(pu.shape[0], at.rest / pu.shape[0]))
        if not terms:
            continue
        F = np.concatenate(terms, axis=1)
        wv = np.concatenate(wts)
        total += sn.w[k] * (F @ wv) / wv.sum()
    if hp is not None and hp.has_background and len(sn.w) > K:
        lo, hi = hp.window
        frac = np.clip((pts - lo) / (hi - lo), 0.0, 1.0)
        total += sn.w[K] * np.prod(frac, axis=1)
    return total


def cdf_grid(chain, grid, hp: Hyperparams | None = None) -> np.ndarray:
    """Posterior mean CDF on a 1-D grid or a ``(gx, gy)`` lattice."""
    snaps = _snapshots(chain)
    hp = hp if hp is not None else getattr(chain, "hp", None)
    pts, shape = _grid_points(grid)
    acc = np.zeros(pts.shape[0])
    for sn in snaps:
        acc += _snapshot_cdf(sn, pts, hp)
    return np.clip(acc / len(snaps), 0.0, 1.0).reshape(shape)


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------


def _integrate(values, grid):
    if isinstance(grid, tuple):
        gx, gy = grid
        return float(trapezoid(trapezoid(values, gy, axis=1), gx))
    return float(trapezoid(values, grid))


def density_distance(a, b, metric: str = "L1", grid=None) -> float:
    """L1 or Hellinger distance by trapezoid quadrature on a grid.

    ``a`` is a :class:`DensityGrid` (its mean is used) or an array with
    ``grid`` given; ``b`` is an array on the same grid or a callable taking
    the grid points.  Hellinger here is ``sqrt(int (sqrt f - sqrt g)^2)``,
    so that ``d^2 <= L1 <= 2 d``.
    """
    if isinstance(a, DensityGrid):
        grid = a.grid
        fa = np.asarray(a.mean, dtype=float)
    else:
        if grid is None:
            raise InvalidArgumentError("grid is required when a is an array")
        fa = np.asarray(a, dtype=float)
    pts, shape = _grid_points(grid)
    if callable(b):
        arg = pts[:, 0] if len(shape) == 1 else pts
        fb = np.asarray(b(arg), dtype=float).reshape(shape)
    else:
        fb = np.asarray(b, dtype=float).reshape(shape)
    fa = fa.reshape(shape)
    metric = metric.lower()
    if metric == "l1":
        return _integrate(np.abs(fa - fb), grid)
    if metric == "hellinger":
        d = np.sqrt(np.maximum(fa, 0.0)) - np.sqrt(np.maximum(fb, 0.0))
        return float(np.sqrt(_integrate(d * d, grid)))
    raise InvalidArgumentError(f"unknown metric {metric!r}")
