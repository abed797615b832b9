"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen at import time: numba is used when it imports
successfully and the environment variable ``SEMIVCAM_NUMBA`` is not set to
``0``/``false``/``no``/``off``.  The pure-numpy twins are always available
under the ``*_np`` names so the two paths can be benchmarked and
cross-checked against each other (see ``semivcam.bench``).

All kernels use the Epanechnikov kernel k(u) = 0.75(1-u^2) on [-1, 1].
"""

import os

import numpy as np

_env = os.environ.get("SEMIVCAM_NUMBA", "1").strip().lower()
_want_numba = _env not in ("0", "false", "no", "off")

NUMBA_ENABLED = False
if _want_numba:
    try:
        from numba import njit

        NUMBA_ENABLED = True
    except ImportError:
        NUMBA_ENABLED = False

BACKEND = "numba" if NUMBA_ENABLED else "numpy"


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------

def bspline_design_np(x, knots, order):
    """All B-spline basis functions of ``order`` on the full clamped knot
    vector ``knots`` (length J + order), evaluated at the points ``x``.

    Returns an (len(x), J) design matrix.  ``x`` is clamped to the knot
    range; out-of-range handling is the caller's job.
    """
    x = np.asarray(x, dtype=np.float64)
    knots = np.asarray(knots, dtype=np.float64)
    j_dim = knots.size - order
    lo, hi = knots[order - 1], knots[j_dim]
    xc = np.clip(x, lo, hi)

    # order-1 (piecewise constant) seed; right-closed top interval
    b = np.zeros((x.size, knots.size - 1))
    for i in range(j_dim + order - 1):
        left, right = knots[i], knots[i + 1]
        if right > left:
            b[:, i] = (xc >= left) & (xc < right)
    top = knots.searchsorted(hi, side="left") - 1
    b[xc == hi, top] = 1.0

    for k in range(2, order + 1):
        nb = b.shape[1] - 1
        bn = np.zeros((x.size, nb))
        for i in range(nb):
            d1 = knots[i + k - 1] - knots[i]
            d2 = knots[i + k] - knots[i + 1]
            term = 0.0
            if d1 > 0:
                term = (xc - knots[i]) / d1 * b[:, i]
            if d2 > 0:
                term = term + (knots[i + k] - xc) / d2 * b[:, i + 1]
            bn[:, i] = term
        b = bn
    return b[:, :j_dim]


def ll_moments_np(s, f, y, w, targets, h):
    """Normal-equation blocks of a local linear fit at each target.

    Observation r contributes weight w[r] * k((s[r]-t)/h) / h with design
    row (f[r], f[r]*(s[r]-t)).  Returns (a, b, wsum, cnt) where a has shape
    (G, 2d, 2d), b (G, 2d), wsum is the sum of raw kernel values per target
    and cnt the count of in-window observations.
    """
    s = np.asarray(s, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    g, d = targets.size, f.shape[1]

    u = (s[None, :] - targets[:, None]) / h           # (G, N)
    kv = np.where(np.abs(u) < 1.0, 0.75 * (1.0 - u * u), 0.0)
    kw = kv * (w[None, :] / h)
    du = s[None, :] - targets[:, None]

    a = np.empty((g, 2 * d, 2 * d))
    b = np.empty((g, 2 * d))
    s0 = np.einsum("gn,nd,ne->gde", kw, f, f)
    s1 = np.einsum("gn,nd,ne->gde", kw * du, f, f)
    s2 = np.einsum("gn,nd,ne->gde", kw * du * du, f, f)
    fy = f * y[:, None]
    b0 = kw @ fy
    b1 = (kw * du) @ fy
    a[:, :d, :d] = s0
    a[:, :d, d:] = s1
    a[:, d:, :d] = s1
    a[:, d:, d:] = s2
    b[:, :d] = b0
    b[:, d:] = b1
    wsum = kv.sum(axis=1)
    cnt = (kv > 0).sum(axis=1)
    return a, b, wsum, cnt.astype(np.int64)


def ll_sandwich_np(s, f, r, w, starts, targets, h):
    """Cluster sandwich pieces of the local linear solve at each target.

    With per-observation score rows p = w k(u/h)/h * r * (f, f*u), returns
    (a, v_diag, v_cross) where a is the normal-equation matrix, v_diag the
    sum of per-observation outer products, and v_cross the between-
    observation within-subject cross terms, so that
    A^-1 (v_diag + v_cross) A^-1 is the exact WLS covariance under
    within-subject dependence.
    """
    s = np.asarray(s, dtype=np.float64)
    f = np.asarray(f, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    starts = np.asarray(starts, dtype=np.int64)
    g, d = targets.size, f.shape[1]
    a = np.empty((g, 2 * d, 2 * d))
    v_diag = np.empty((g, 2 * d, 2 * d))
    v_cross = np.empty((g, 2 * d, 2 * d))
    for gi in range(g):
        du = s - targets[gi]
        u = du / h
        kv = np.where(np.abs(u) < 1.0, 0.75 * (1.0 - u * u), 0.0)
        kw = kv * w / h
        rows = np.concatenate([f, f * du[:, None]], axis=1)
        wrows = rows * kw[:, None]
        a[gi] = wrows.T @ rows
        p = wrows * r[:, None]
        v_diag[gi] = p.T @ p
        gsub = np.add.reduceat(p, starts[:-1], axis=0)
        v_cross[gi] = gsub.T @ gsub - v_diag[gi]
    return a, v_diag, v_cross


def pair_quad_blocks_np(t, x, e, starts, h_c, h_a):
    """Between-subject quadratic-form blocks.

    c[i, j] = sum_{l, v} e_il * w_ij^{(l,v)} * e_jv over observations of
    subjects i and j, and d2[i, j] = sum (e_il * e_jv * w)^2, for i != j;
    w is the unnormalized product Epanechnikov weight.  Diagonal is zero.
    """
    t = np.asarray(t, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    n = starts.size - 1
    c = np.zeros((n, n))
    d2 = np.zeros((n, n))
    for i in range(n):
        si, ei = starts[i], starts[i + 1]
        for j in range(i + 1, n):
            sj, ej = starts[j], starts[j + 1]
            ut = (t[si:ei, None] - t[None, sj:ej]) / h_c
            w = np.where(np.abs(ut) < 1.0, 0.75 * (1.0 - ut * ut), 0.0)
            for k in range(x.shape[1]):
                ux = (x[si:ei, k, None] - x[None, sj:ej, k]) / h_a
                w = w * np.where(np.abs(ux) < 1.0, 0.75 * (1.0 - ux * ux), 0.0)
            ew = e[si:ei, None] * w * e[None, sj:ej]
            c[i, j] = c[j, i] = ew.sum()
            d2[i, j] = d2[j, i] = (ew * ew).sum()
    return c, d2


def nw_surface_2d_np(ta, tb, val, wt, lo, step, g, h):
    """Product-kernel Nadaraya-Watson sums on a g x g grid.

    Returns (num, den) with num[a, b] = sum_r K_a K_b wt[r] val[r] where
    K_a = k((ta[r]-grid[a])/h).
    """
    grid = lo + step * np.arange(g)
    num = np.zeros((g, g))
    den = np.zeros((g, g))
    chunk = 4096
    for s0 in range(0, ta.size, chunk):
        s1 = min(s0 + chunk, ta.size)
        ua = (ta[s0:s1, None] - grid[None, :]) / h
        ub = (tb[s0:s1, None] - grid[None, :]) / h
        ka = np.where(np.abs(ua) < 1.0, 0.75 * (1.0 - ua * ua), 0.0)
        kb = np.where(np.abs(ub) < 1.0, 0.75 * (1.0 - ub * ub), 0.0)
        num += np.einsum("ca,cb,c->ab", ka, kb, wt[s0:s1] * val[s0:s1])
        den += np.einsum("ca,cb,c->ab", ka, kb, wt[s0:s1])
    return num, den


def nw_diag_outer_np(t, f, ia, ib, wt, lo, step, g, h):
    """Diagonal 2D smooth of outer products f[ia] f[ib]^T over pairs.

    Returns (num, den): num[g] is the (d, d) kernel-weighted sum at grid
    point g, den[g] the weight sum.
    """
    grid = lo + step * np.arange(g)
    d = f.shape[1]
    num = np.zeros((g, d, d))
    den = np.zeros(g)
    chunk = 4096
    for s0 in range(0, ia.size, chunk):
        s1 = min(s0 + chunk, ia.size)
        a, b = ia[s0:s1], ib[s0:s1]
        ua = (t[a][:, None] - grid[None, :]) / h
        ub = (t[b][:, None] - grid[None, :]) / h
        ka = np.where(np.abs(ua) < 1.0, 0.75 * (1.0 - ua * ua), 0.0)
        kb = np.where(np.abs(ub) < 1.0, 0.75 * (1.0 - ub * ub), 0.0)
        kk = ka * kb * wt[s0:s1, None]
        num += np.einsum("cg,cd,ce->gde", kk, f[a], f[b])
        den += kk.sum(axis=0)
    return num, den


# ---------------------------------------------------------------------------
# numba fast path
# ---------------------------------------------------------------------------

if NUMBA_ENABLED:

    @njit(cache=True)
    def _bspline_design_nb(x, knots, order):
        j_dim = knots.size - order
        # skip zero-width end spans (knot multiplicity can exceed `order`
        # when lower-order bases are evaluated on a clamped vector)
        lo_i = order - 1
        while lo_i < j_dim - 1 and knots[lo_i] == knots[lo_i + 1]:
            lo_i += 1
        hi_i = j_dim - 1
        while hi_i > lo_i and knots[hi_i] == knots[hi_i + 1]:
            hi_i -= 1
        lo = knots[lo_i]
        hi = knots[hi_i + 1]
        out = np.zeros((x.size, j_dim))
        nvals = np.empty(order)
        left = np.empty(order)
        right = np.empty(order)
        for r in range(x.size):
            xv = x[r]
            if xv < lo:
                xv = lo
            elif xv > hi:
                xv = hi
            # knot span index i: knots[i] <= xv < knots[i+1]
            i = lo_i
            while i < hi_i and xv >= knots[i + 1]:
                i += 1
            nvals[0] = 1.0
            for j in range(1, order):
                left[j] = xv - knots[i + 1 - j]
                right[j] = knots[i + j] - xv
                saved = 0.0
                for rr in range(j):
                    temp = nvals[rr] / (right[rr + 1] + left[j - rr])
                    nvals[rr] = saved + right[rr + 1] * temp
                    saved = left[j - rr] * temp
                nvals[j] = saved
            for rr in range(order):
                out[r, i - order + 1 + rr] = nvals[rr]
        return out

    @njit(cache=True)
    def _ll_moments_nb(s, f, y, w, targets, h):
        g = targets.size
        n, d = f.shape
        a = np.zeros((g, 2 * d, 2 * d))
        b = np.zeros((g, 2 * d))
        wsum = np.zeros(g)
        cnt = np.zeros(g, dtype=np.int64)
        for gi in range(g):
            t0 = targets[gi]
            for r in range(n):
                du = s[r] - t0
                u = du / h
                if u <= -1.0 or u >= 1.0:
                    continue
                kv = 0.75 * (1.0 - u * u)
                wsum[gi] += kv
                cnt[gi] += 1
                kw = kv * w[r] / h
                kwu = kw * du
                kwu2 = kwu * du
                yr = y[r]
                for p1 in range(d):
                    fp = f[r, p1]
                    b[gi, p1] += kw * fp * yr
                    b[gi, d + p1] += kwu * fp * yr
                    for p2 in range(p1, d):
                        fq = f[r, p2]
                        a[gi, p1, p2] += kw * fp * fq
                        a[gi, p1, d + p2] += kwu * fp * fq
                        a[gi, d + p1, d + p2] += kwu2 * fp * fq
                        if p2 > p1:
                            a[gi, p2, d + p1] += kwu * fp * fq
            # mirror symmetric halves
            for p1 in range(d):
                for p2 in range(p1 + 1, d):
                    a[gi, p2, p1] = a[gi, p1, p2]
                    a[gi, d + p2, d + p1] = a[gi, d + p1, d + p2]
            for p1 in range(d):
                for p2 in range(d):
                    a[gi, d + p1, p2] = a[gi, p2, d + p1]
        return a, b, wsum, cnt

    @njit(cache=True)
    def _ll_sandwich_nb(s, f, r, w, starts, targets, h):
        g = targets.size
        n, d = f.shape
        d2 = 2 * d
        nsub = starts.size - 1
        a = np.zeros((g, d2, d2))
        v_diag = np.zeros((g, d2, d2))
        v_cross = np.zeros((g, d2, d2))
        row = np.empty(d2)
        gsub = np.empty(d2)
        for gi in range(g):
            t0 = targets[gi]
            for i in range(nsub):
                for p1 in range(d2):
                    gsub[p1] = 0.0
                any_row = False
                for j in range(starts[i], starts[i + 1]):
                    du = s[j] - t0
                    u = du / h
                    if u <= -1.0 or u >= 1.0:
                        continue
                    any_row = True
                    kw = 0.75 * (1.0 - u * u) * w[j] / h
                    for p1 in range(d):
                        row[p1] = f[j, p1]
                        row[d + p1] = f[j, p1] * du
                    for p1 in range(d2):
                        wr = kw * row[p1]
                        for p2 in range(p1, d2):
                            a[gi, p1, p2] += wr * row[p2]
                        pr = wr * r[j]
                        gsub[p1] += pr
                        for p2 in range(p1, d2):
                            v_diag[gi, p1, p2] += pr * kw * row[p2] * r[j]
                if any_row:
                    for p1 in range(d2):
                        for p2 in range(p1, d2):
                            v_cross[gi, p1, p2] += gsub[p1] * gsub[p2]
            for p1 in range(d2):
                for p2 in range(p1 + 1, d2):
                    a[gi, p2, p1] = a[gi, p1, p2]
                    v_diag[gi, p2, p1] = v_diag[gi, p1, p2]
                    v_cross[gi, p2, p1] = v_cross[gi, p1, p2]
            for p1 in range(d2):
                for p2 in range(d2):
                    v_cross[gi, p1, p2] -= v_diag[gi, p1, p2]
        return a, v_diag, v_cross

    @njit(cache=True)
    def _pair_quad_blocks_nb(t, x, e, starts, h_c, h_a):
        n = starts.size - 1
        p = x.shape[1]
        c = np.zeros((n, n))
        d2 = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                acc = 0.0
                acc2 = 0.0
                for l in range(starts[i], starts[i + 1]):
                    for v in range(starts[j], starts[j + 1]):
                        ut = (t[l] - t[v]) / h_c
                        if ut <= -1.0 or ut >= 1.0:
                            continue
                        w = 0.75 * (1.0 - ut * ut)
                        ok = True
                        for k in range(p):
                            ux = (x[l, k] - x[v, k]) / h_a
                            if ux <= -1.0 or ux >= 1.0:
                                ok = False
                                break
                            w *= 0.75 * (1.0 - ux * ux)
                        if not ok:
                            continue
                        ew = e[l] * w * e[v]
                        acc += ew
                        acc2 += ew * ew
                c[i, j] = acc
                c[j, i] = acc
                d2[i, j] = acc2
                d2[j, i] = acc2
        return c, d2

    @njit(cache=True)
    def _nw_surface_2d_nb(ta, tb, val, wt, lo, step, g, h):
        num = np.zeros((g, g))
        den = np.zeros((g, g))
        for r in range(ta.size):
            a0 = int(np.ceil((ta[r] - h - lo) / step))
            a1 = int(np.floor((ta[r] + h - lo) / step))
            b0 = int(np.ceil((tb[r] - h - lo) / step))
            b1 = int(np.floor((tb[r] + h - lo) / step))
            if a0 < 0:
                a0 = 0
            if b0 < 0:
                b0 = 0
            if a1 > g - 1:
                a1 = g - 1
            if b1 > g - 1:
                b1 = g - 1
            for ga in range(a0, a1 + 1):
                ua = (ta[r] - (lo + step * ga)) / h
                ka = 0.75 * (1.0 - ua * ua)
                if ka <= 0.0:
                    continue
                for gb in range(b0, b1 + 1):
                    ub = (tb[r] - (lo + step * gb)) / h
                    kb = 0.75 * (1.0 - ub * ub)
                    if kb <= 0.0:
                        continue
                    kk = ka * kb * wt[r]
                    num[ga, gb] += kk * val[r]
                    den[ga, gb] += kk
        return num, den

    @njit(cache=True)
    def _nw_diag_outer_nb(t, f, ia, ib, wt, lo, step, g, h):
        d = f.shape[1]
        num = np.zeros((g, d, d))
        den = np.zeros(g)
        for r in range(ia.size):
            a = ia[r]
            b = ib[r]
            tlo = t[a] if t[a] > t[b] else t[b]
            thi = t[a] if t[a] < t[b] else t[b]
            g0 = int(np.ceil((tlo - h - lo) / step))
            g1 = int(np.floor((thi + h - lo) / step))
            if g0 < 0:
                g0 = 0
            if g1 > g - 1:
                g1 = g - 1
            for gi in range(g0, g1 + 1):
                gp = lo + step * gi
                ua = (t[a] - gp) / h
                ub = (t[b] - gp) / h
                ka = 0.75 * (1.0 - ua * ua)
                kb = 0.75 * (1.0 - ub * ub)
                if ka <= 0.0 or kb <= 0.0:
                    continue
                kk = ka * kb * wt[r]
                den[gi] += kk
                for p1 in range(d):
                    fa = kk * f[a, p1]
                    for p2 in range(d):
                        num[gi, p1, p2] += fa * f[b, p2]
        return num, den

    def bspline_design(x, knots, order):
        return _bspline_design_nb(
            np.ascontiguousarray(x, dtype=np.float64),
            np.ascontiguousarray(knots, dtype=np.float64),
            order,
        )

    def ll_moments(s, f, y, w, targets, h):
        return _ll_moments_nb(
            np.ascontiguousarray(s, dtype=np.float64),
            np.ascontiguousarray(f, dtype=np.float64),
            np.ascontiguousarray(y, dtype=np.float64),
            np.ascontiguousarray(w, dtype=np.float64),
            np.ascontiguousarray(targets, dtype=np.float64),
            float(h),
        )

    def ll_sandwich(s, f, r, w, starts, targets, h):
        return _ll_sandwich_nb(
            np.ascontiguousarray(s, dtype=np.float64),
            np.ascontiguousarray(f, dtype=np.float64),
            np.ascontiguousarray(r, dtype=np.float64),
            np.ascontiguousarray(w, dtype=np.float64),
            np.ascontiguousarray(starts, dtype=np.int64),
            np.ascontiguousarray(targets, dtype=np.float64),
            float(h),
        )

    def pair_quad_blocks(t, x, e, starts, h_c, h_a):
        return _pair_quad_blocks_nb(
            np.ascontiguousarray(t, dtype=np.float64),
            np.ascontiguousarray(x, dtype=np.float64),
            np.ascontiguousarray(e, dtype=np.float64),
            np.ascontiguousarray(starts, dtype=np.int64),
            float(h_c),
            float(h_a),
        )

    def nw_surface_2d(ta, tb, val, wt, lo, step, g, h):
        return _nw_surface_2d_nb(
            np.ascontiguousarray(ta, dtype=np.float64),
            np.ascontiguousarray(tb, dtype=np.float64),
            np.ascontiguousarray(val, dtype=np.float64),
            np.ascontiguousarray(wt, dtype=np.float64),
            float(lo), float(step), int(g), float(h),
        )

    def nw_diag_outer(t, f, ia, ib, wt, lo, step, g, h):
        return _nw_diag_outer_nb(
            np.ascontiguousarray(t, dtype=np.float64),
            np.ascontiguousarray(f, dtype=np.float64),
            np.ascontiguousarray(ia, dtype=np.int64),
            np.ascontiguousarray(ib, dtype=np.int64),
            np.ascontiguousarray(wt, dtype=np.float64),
            float(lo), float(step), int(g), float(h),
        )

else:
    bspline_design = bspline_design_np
    ll_moments = ll_moments_np
    ll_sandwich = ll_sandwich_np

    def pair_quad_blocks(t, x, e, starts, h_c, h_a):
        return pair_quad_blocks_np(t, x, e, np.asarray(starts), h_c, h_a)

    nw_surface_2d = nw_surface_2d_np
    nw_diag_outer = nw_diag_outer_np
