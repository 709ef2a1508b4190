"""Compiled inner loop of the map step.

Uniform variates are drawn by the caller so the compiled and reference
paths consume identical randomness.
"""

import math

import numpy as np
from numba import njit

_LOG_2PI = math.log(2.0 * math.pi)

# exp(-38) is below half an ulp of any sum that contains a 1, so terms that
# far under the running maximum cannot change it
_NEGLIGIBLE = -38.0


@njit(cache=True, nogil=True)
def map_block(x, index0, z_in, s_in, offset, u, mean, linv, logdet, bg, bg_lo, bg_hi,
              bg_logd, beta, comp, rho, istar, log_w, ncomp, z_out, s_out, col_out):
    """Labels for one block.

    ``u`` holds three uniforms per row: slice, component, then atom draws,
    each as a contiguous run of ``b``.  Writes the new component (-1 for the
    background), the atom index within it and the flat column.  Returns
    ``(loglik, status)``; a nonzero status is the 1-based row of an
    observation with no atom above its slice.
    """
    b, m = x.shape
    J = mean.shape[0]
    ncol = beta.shape[0]
    K = ncomp - 1 if bg else ncomp
    ll = np.empty(ncol)
    p = np.empty(ncol)
    pc = np.empty(ncomp)
    d = np.empty(m)
    # per-column constant part of log w_k + log N(x | u, cov)
    const = np.empty(J)
    for j in range(J):
        const[j] = log_w[j] - 0.5 * (m * _LOG_2PI + logdet[j])
    total = 0.0
    for i in range(b):
        g = J if z_in[i] < 0 else offset[z_in[i]] + s_in[i]
        lo = rho[g]
        if istar[g] == index0 + i:
            r = lo
        else:
            r = lo + u[i] * (beta[g] - lo)

        mx = -np.inf
        if m == 1:
            xi = x[i, 0]
            for j in range(J):
                t = (xi - mean[j, 0]) * linv[j, 0, 0]
                v = const[j] - 0.5 * t * t
                ll[j] = v
                if v > mx:
                    mx = v
        else:
            for j in range(J):
                for a in range(m):
                    d[a] = x[i, a] - mean[j, a]
                q = 0.0
                for a in range(m):
                    acc = 0.0
                    for c in range(a + 1):
                        acc += linv[j, a, c] * d[c]
                    q += acc * acc
                v = const[j] - 0.5 * q
                ll[j] = v
                if v > mx:
                    mx = v
        if bg:
            inside = True
            for a in range(m):
                if x[i, a] < bg_lo[a] or x[i, a] > bg_hi[a]:
                    inside = False
            v = bg_logd + log_w[J] if inside else -np.inf
            ll[J] = v
            if v > mx:
                mx = v
        if not mx > -np.inf:
            return total - np.inf, i + 1

        # one exponential per column serves both the mixture term and the
        # slice-restricted label probabilities
        mix = 0.0
        live = 0.0
        for j in range(ncol):
            e = ll[j] - mx
            q = math.exp(e) if e > _NEGLIGIBLE else 0.0
            mix += q * beta[j]
            if beta[j] > r:
                p[j] = q
                live += q
            else:
                p[j] = 0.0
        total += mx + math.log(mix)
        if not live > 0.0:
            # every eligible term is negligible; rescale by the eligible maximum
            top = -np.inf
            for j in range(ncol):
                if beta[j] > r and ll[j] > top:
                    top = ll[j]
            if not top > -np.inf:
                return total, i + 1
            for j in range(ncol):
                p[j] = math.exp(ll[j] - top) if beta[j] > r else 0.0
        for k in range(ncomp):
            pc[k] = 0.0
        for j in range(ncol):
            pc[comp[j]] += p[j]

        tot = 0.0
        for k in range(ncomp):
            tot += pc[k]
        t = u[b + i] * tot
        acc = 0.0
        zk = ncomp - 1
        for k in range(ncomp):
            acc += pc[k]
            if acc >= t and pc[k] > 0.0:
                zk = k
                break
        t = u[2 * b + i] * pc[zk]
        acc = 0.0
        col = -1
        for j in range(ncol):
            if comp[j] == zk and p[j] > 0.0:
                col = j
                acc += p[j]
                if acc >= t:
                    break
        col_out[i] = col
        if zk == K:
            z_out[i] = -1
            s_out[i] = 0
        else:
            z_out[i] = zk
            s_out[i] = col - offset[zk]
    return total, 0


@njit(cache=True, nogil=True)
def column_moments(x, col, counts, sx, sxx):
    """Accumulate member counts and first and second moment sums per flat
    column.  Columns past ``sx.shape[0]`` (the background) are only counted.
    Only the upper triangle of ``sxx`` is filled."""
    n, m = x.shape
    J = sx.shape[0]
    for i in range(n):
        g = col[i]
        counts[g] += 1
        if g < J:
            for a in range(m):
                xa = x[i, a]
                sx[g, a] += xa
                for c in range(a, m):
                    sxx[g, a, c] += xa * x[i, c]


@njit(cache=True, nogil=True)
def pick_members(col, target, out):
    """``out[g]`` becomes the index of the ``target[g]``-th member (in index
    order) of column ``g``; columns without that many members are untouched."""
    seen = np.zeros(target.size, dtype=np.int64)
    for i in range(col.size):
        g = col[i]
        if seen[g] == target[g]:
            out[g] = i
        seen[g] += 1
