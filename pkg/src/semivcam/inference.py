"""Plug-in nuisance estimation and pointwise confidence bands.

The unified variance of the coefficient curves at an interior time t is

    Gamma_C(t) = kappa / (n Nbar_H h_C f_T(t)) * Sigma_S(t)
               + (1/n) (1 - 1/Nbar_H) * Sigma_D(t)

with Sigma_S = Xi^-1 (gamma(t,t) + sigma^2(t)) and
Sigma_D = Xi^-1 gamma(t,t) G(t,t) Xi^-1; the additive analogue replaces the
matrix pieces by the scalar moments psi_{k,1}, psi_{k,2}, mu_k.  Regime
variants keep one of the two terms (sparse keeps the first, ultra-dense the
second) while the dense variant substitutes the observed sampling ratio for
the unknown limit constant.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from . import _accel, splines
from .errors import BoundaryDensityError, PairsUnavailableError
from .dataset import summarize
from .smoothing import boundary_kernel_constants, kde, kernel_constants, solve_gram

SURFACE_GRID = 41
DENSITY_FLOOR = 1e-6
REGIME_THRESHOLDS = (0.5, 2.0)
SMOOTHNESS_ORDER = 2


@dataclass(frozen=True)
class RegimeReport:
    r: int
    ratio: float
    label: str
    thresholds: tuple


@dataclass(frozen=True)
class ConfidenceBand:
    name: str
    grid: np.ndarray
    center: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    method: str


@dataclass(frozen=True)
class NuisanceEstimates:
    tgrid: np.ndarray
    xi: np.ndarray            # (G, d, d)
    xi_inv: np.ndarray        # (G, d, d)
    g_diag: np.ndarray        # (G, d, d)
    gamma_diag: np.ndarray    # (G,)
    sigma2: np.ndarray        # (G,)
    f_t: np.ndarray           # (G,)
    surf_grid: np.ndarray
    gamma_surface: np.ndarray  # (Gs, Gs)
    rho1: np.ndarray          # (G, d)
    d2_vc: np.ndarray         # (G, d) curve second derivatives
    xgrids: tuple             # per-k evaluation grids
    f_x: tuple                # per-k densities on xgrids
    d2_beta: tuple            # per-k second derivatives on xgrids
    mu: np.ndarray            # (p,)
    psi1: np.ndarray          # (p,)
    psi2: np.ndarray          # (p,)
    h_time: float
    h_x: float
    # exact WLS cluster covariance of the two local linear stages, split
    # into the within-observation (sparse-type) and within-subject
    # cross-observation (dense-type) terms
    sand_vc_t1: np.ndarray = None   # (G, d, d)
    sand_vc_t2: np.ndarray = None   # (G, d, d)
    sand_a_t1: tuple = ()           # per-k (Gx,)
    sand_a_t2: tuple = ()
    d2_vc_var: np.ndarray = None    # (G, d) variance of d2_vc
    d2_beta_var: tuple = ()         # per-k variance of d2_beta
    transfer_var: np.ndarray = None  # (p,) centering-constant variance
    truncations: dict = field(default_factory=dict)
    pairs_available: bool = True

    def xi_inv_at(self, t):
        return _interp_table(t, self.tgrid, self.xi_inv)

    def g_diag_at(self, t):
        return _interp_table(t, self.tgrid, self.g_diag)

    def gamma_diag_at(self, t):
        return np.interp(t, self.tgrid, self.gamma_diag)

    def sigma2_at(self, t):
        return np.interp(t, self.tgrid, self.sigma2)

    def f_t_at(self, t):
        return np.interp(t, self.tgrid, self.f_t)

    def rho1_at(self, t):
        return _interp_table(t, self.tgrid, self.rho1)

    def gamma_at(self, t, tp):
        return _bilinear(self.surf_grid, self.gamma_surface, t, tp)

    def f_x_at(self, k, x):
        return np.interp(x, self.xgrids[k], self.f_x[k])

    def d2_beta_at(self, k, x):
        return np.interp(x, self.xgrids[k], self.d2_beta[k])


def _interp_table(t, grid, table):
    """Entrywise linear interpolation of a (G, ...) tabulation."""
    tq = np.atleast_1d(np.asarray(t, dtype=np.float64))
    flat = table.reshape(grid.size, -1)
    cols = np.stack([np.interp(tq, grid, flat[:, j]) for j in range(flat.shape[1])], axis=-1)
    out = cols.reshape((tq.size,) + table.shape[1:])
    return out[0] if np.ndim(t) == 0 else out


def _bilinear(grid, surf, ta, tb):
    ta = np.clip(np.asarray(ta, dtype=np.float64), grid[0], grid[-1])
    tb = np.clip(np.asarray(tb, dtype=np.float64), grid[0], grid[-1])
    step = grid[1] - grid[0]
    ia = np.clip(((ta - grid[0]) / step).astype(np.int64), 0, grid.size - 2)
    ib = np.clip(((tb - grid[0]) / step).astype(np.int64), 0, grid.size - 2)
    ua = (ta - grid[ia]) / step
    ub = (tb - grid[ib]) / step
    return ((1 - ua) * (1 - ub) * surf[ia, ib]
            + ua * (1 - ub) * surf[ia + 1, ib]
            + (1 - ua) * ub * surf[ia, ib + 1]
            + ua * ub * surf[ia + 1, ib + 1])


def _window_counts(s, targets, h):
    u = np.abs(s[None, :] - np.asarray(targets)[:, None]) / h
    return (u < 1.0).sum(axis=1)


def _obs_mass(values, grid):
    """Fraction of observations allocated to each grid point by linear
    interpolation weights."""
    idx = np.clip(np.searchsorted(grid, values) - 1, 0, grid.size - 2)
    frac = np.clip((values - grid[idx]) / (grid[idx + 1] - grid[idx]), 0.0, 1.0)
    mass = np.zeros(grid.size)
    np.add.at(mass, idx, 1.0 - frac)
    np.add.at(mass, idx + 1, frac)
    return mass / values.size


def _within_pairs(fd):
    """Ordered within-subject pair indices and SUBJ pair weights."""
    ia, ib, wt = [], [], []
    for i in range(fd.m.size):
        s, e = fd.starts[i], fd.starts[i + 1]
        mi = e - s
        if mi < 2:
            continue
        idx = np.arange(s, e)
        aa = np.repeat(idx, mi)
        bb = np.tile(idx, mi)
        keep = aa != bb
        ia.append(aa[keep])
        ib.append(bb[keep])
        wt.append(np.full(keep.sum(), 1.0 / (mi * (mi - 1))))
    if not ia:
        return (np.zeros(0, dtype=np.int64),) * 2 + (np.zeros(0),)
    return np.concatenate(ia), np.concatenate(ib), np.concatenate(wt)


def _silverman(values, nobs):
    iqr = np.subtract(*np.percentile(values, [75, 25]))
    spread = min(float(np.std(values)), iqr / 1.34 if iqr > 0 else np.inf)
    return max(0.9 * spread * nobs ** (-0.2), 1e-8)


D2_REFIT_KNOTS = 4


def _sandwich_blocks(a_s, vd, vx, d, dof=None):
    """Level-block covariance terms A^-1 V A^-1 per grid point.

    ``dof`` holds per-target in-window counts for the small-sample
    n_w/(n_w - 2d) residual-deflation correction.
    """
    g = a_s.shape[0]
    t1 = np.zeros((g, d, d))
    t2 = np.zeros((g, d, d))
    for i in range(g):
        try:
            inv, _ = solve_gram(a_s[i], np.eye(a_s.shape[1]))
        except np.linalg.LinAlgError:
            inv = np.linalg.pinv(a_s[i])
        scale = 1.0
        if dof is not None and dof[i] > 2 * d + 1:
            scale = dof[i] / (dof[i] - 2.0 * d)
        t1[i] = scale * (inv @ vd[i] @ inv)[:d, :d]
        t2[i] = scale * (inv @ vx[i] @ inv)[:d, :d]
    return t1, t2


def _kernel_overlap_corr(delta):
    """Correlation of two interior local linear fits whose targets are
    ``delta`` bandwidths apart (Epanechnikov overlap integral over kappa).

    Uses (1-u^2)(1-(u-d)^2) = 1-d^2 + 2du - (2-d^2)u^2 - 2du^3 + u^4
    integrated over the window overlap [d-1, 1].
    """
    d = np.abs(np.asarray(delta, dtype=np.float64))

    def antider(u, dd):
        return ((1 - dd ** 2) * u + dd * u ** 2 - (2 - dd ** 2) * u ** 3 / 3
                - dd * u ** 4 / 2 + u ** 5 / 5)

    val = np.where(
        d < 2.0,
        0.5625 * (antider(1.0, d) - antider(np.clip(d - 1.0, -1.0, 1.0), d)) / 0.6,
        0.0,
    )
    return float(val) if np.ndim(delta) == 0 else val


def _curve_d2(grid, values, eval_at, var_values=None, h=None,
              knots=D2_REFIT_KNOTS):
    """Analytic second derivative of a least-squares cubic spline fit to a
    tabulated curve.

    When the pointwise variance of the curve and its smoothing bandwidth
    are given, also propagates that uncertainty through the refit (curve
    errors are kernel-correlated at scale h) and returns the variance of
    the derivative estimate.
    """
    k = min(knots, max(grid.size - 8, 0))
    basis = splines.make_basis(grid, k, 4)
    design = splines.basis_design(basis, grid)
    gram_inv = np.linalg.pinv(design.T @ design)
    proj = gram_inv @ design.T
    coef = proj @ values
    d2row = splines.basis_design_d2(basis, np.clip(eval_at, grid[0], grid[-1]))
    d2 = d2row @ coef
    if var_values is None:
        return d2, None
    sd = np.sqrt(np.clip(var_values, 0.0, None))
    corr = _kernel_overlap_corr(np.abs(grid[:, None] - grid[None, :]) / h)
    cov_curve = corr * np.outer(sd, sd)
    m = d2row @ proj
    d2_var = np.einsum("eg,gh,eh->e", m, cov_curve, m)
    return d2, np.clip(d2_var, 0.0, None)


def estimate_nuisance(ds, fit, bw=None, grid_size=None):
    """All plug-in pieces of the asymptotic bias and variance formulas.

    Conditional-moment smooths against time use the fit's h_C inflated by
    N^(1/20); the densities f_T and f_{X_k} use Silverman reference
    bandwidths (regression bandwidths grossly oversmooth a density, which
    deflates the sparse variance term at the support edges).  Negative
    variance pieces are truncated at zero with counters in
    ``truncations``.
    """
    fd = ds.flat()
    n, nobs = ds.n, fd.t.size
    d = ds.q + 1 + ds.p
    bw = bw or {}
    infl = nobs ** (1.0 / 20.0)
    h_t = bw.get("h_time", fit.h_c * infl)
    h_ft = bw.get("h_ft", _silverman(fd.t, nobs))
    if "h_x" in bw:
        h_xs = [float(bw["h_x"])] * ds.p
    else:
        h_xs = [_silverman(fd.x[:, k], nobs) for k in range(ds.p)]
    g = grid_size or fit.vc_curves[0].grid.size
    lo, hi = ds.time_support
    tgrid = np.linspace(lo, hi, g)
    trunc = {"gamma_diag": 0, "sigma2": 0, "psi2": 0, "xi_ridge": 0}

    fmat = np.hstack([fd.z] + (
        [fit.beta_matrix(fd.x)] if ds.p else []
    ))
    resid = fd.y - fit.mean_at(fd.t, fd.z, fd.x)

    # Nadaraya-Watson smooths against time, SUBJ-weighted
    u = (fd.t[None, :] - tgrid[:, None]) / h_t
    kw = np.where(np.abs(u) < 1, 0.75 * (1 - u * u), 0.0) * fd.wobs[None, :]
    den = kw.sum(axis=1)
    den = np.where(den > 0, den, np.nan)
    xi = np.einsum("gn,nd,ne->gde", kw, fmat, fmat) / den[:, None, None]
    r2_smooth = (kw @ (resid * resid)) / den

    ia, ib, wt = _within_pairs(fd)
    pairs_available = ia.size > 0
    if not pairs_available:
        raise PairsUnavailableError(
            "all subjects have one observation; within-subject covariance, "
            "dense variance terms and psi_2 are unavailable -- use the "
            "sparse-variant intervals"
        )

    # gamma surface (coarse) and diagonal pieces (fine)
    sg = np.linspace(lo, hi, SURFACE_GRID)
    step = sg[1] - sg[0]
    num_s, den_s = _accel.nw_surface_2d(
        fd.t[ia], fd.t[ib], resid[ia] * resid[ib], wt, lo, step, SURFACE_GRID, h_t
    )
    gamma_surf = np.where(den_s > 0, num_s / np.where(den_s > 0, den_s, 1.0), 0.0)

    tstep = tgrid[1] - tgrid[0]
    num_gd, den_gd = _accel.nw_diag_outer(
        fd.t, resid[:, None], ia, ib, wt, lo, tstep, g, h_t
    )
    den_gd = np.where(den_gd > 0, den_gd, np.nan)
    gamma_diag = num_gd[:, 0, 0] / den_gd
    trunc["gamma_diag"] = int(np.sum(gamma_diag < 0))
    gamma_diag = np.clip(np.nan_to_num(gamma_diag), 0.0, None)

    sigma2 = r2_smooth - gamma_diag
    trunc["sigma2"] = int(np.sum(sigma2 < 0))
    sigma2 = np.clip(np.nan_to_num(sigma2), 0.0, None)

    num_g, den_g = _accel.nw_diag_outer(fd.t, fmat, ia, ib, wt, lo, tstep, g, h_t)
    den_g = np.where(den_g > 0, den_g, np.nan)
    g_diag = np.nan_to_num(num_g / den_g[:, None, None])

    f_t = kde(fd.t, h_ft, tgrid)

    xi_inv = np.empty_like(xi)
    eye = np.eye(d)
    for i in range(g):
        a = np.nan_to_num(xi[i])
        try:
            inv, ridged = solve_gram(a, eye)
        except np.linalg.LinAlgError:
            inv = np.linalg.pinv(a)
            ridged = True
        xi_inv[i] = inv
        trunc["xi_ridge"] += int(ridged)

    # exact WLS cluster covariances at the tabulation grids
    a_s, vd, vx = _accel.ll_sandwich(fd.t, fmat, resid, fd.wobs, fd.starts,
                                     tgrid, fit.h_c)
    cnt_t = _window_counts(fd.t, tgrid, fit.h_c)
    sand_vc_t1, sand_vc_t2 = _sandwich_blocks(a_s, vd, vx, d, cnt_t)
    sand_a_t1, sand_a_t2 = [], []
    for k in range(ds.p):
        amult = fit.vc_curves[ds.q + 1 + k](fd.t)[:, None]
        xgrid_k = fit.additive_curves[k].grid
        a_s, vd, vx = _accel.ll_sandwich(
            fd.x[:, k], amult, resid, fd.wobs, fd.starts, xgrid_k, fit.h_a,
        )
        b1, b2 = _sandwich_blocks(a_s, vd, vx, 1,
                                  _window_counts(fd.x[:, k], xgrid_k, fit.h_a))
        sand_a_t1.append(b1[:, 0, 0])
        sand_a_t2.append(b2[:, 0, 0])

    # Second derivatives of every component curve, from an analytic
    # differentiation of a least-squares cubic spline refit of the
    # tabulated (already kernel-smoothed) curves.  A data-level pilot
    # either misses the curvature (few knots) or injects noise straight
    # into the bias correction (many knots); the curve-level spline is
    # deterministic and stable.  The refit also propagates the curves'
    # sampling variance into a variance for each derivative, feeding the
    # correction-uncertainty term of the bands.
    d2_vc = np.zeros((g, d))
    d2_vc_var = np.zeros((g, d))
    for j in range(d):
        curve = fit.vc_curves[j]
        cvar = np.interp(curve.grid, tgrid,
                         sand_vc_t1[:, j, j] + sand_vc_t2[:, j, j])
        d2_vc[:, j], dvar = _curve_d2(curve.grid, curve.values, tgrid,
                                      cvar, fit.h_c)
        d2_vc_var[:, j] = dvar
    rho1 = np.einsum("gde,ge->gd", xi, d2_vc)

    xgrids, f_x, d2_beta, d2_beta_var = [], [], [], []
    transfer_var = np.zeros(ds.p)
    for k in range(ds.p):
        curve = fit.additive_curves[k]
        xg = curve.grid
        xgrids.append(xg)
        f_x.append(kde(fd.x[:, k], h_xs[k], xg))
        d2b, d2bv = _curve_d2(xg, curve.values, xg,
                              sand_a_t1[k] + sand_a_t2[k], fit.h_a)
        d2_beta.append(d2b)
        d2_beta_var.append(d2bv)
        # variance of the additive curve's empirical centering constant:
        # the trend absorbs the mismatch between the estimated and true
        # location, a global error mode along the coefficient curve.
        # Short-range errors are kernel-correlated; the dense-type term is
        # common across x.
        wmass = _obs_mass(fd.x[:, k], xg)
        sd1 = np.sqrt(np.clip(sand_a_t1[k], 0.0, None))
        corr = _kernel_overlap_corr(np.abs(xg[:, None] - xg[None, :]) / fit.h_a)
        cov_short = corr * np.outer(sd1, sd1)
        sd2 = np.sqrt(np.clip(sand_a_t2[k], 0.0, None))
        transfer_var[k] = float(wmass @ cov_short @ wmass
                                + (wmass @ sd2) ** 2)

    # scalar moments of the coefficient curves
    mu = np.zeros(ds.p)
    psi1 = np.zeros(ds.p)
    psi2 = np.zeros(ds.p)
    gd_at_t = np.interp(fd.t, tgrid, gamma_diag)
    s2_at_t = np.interp(fd.t, tgrid, sigma2)
    n2 = int(np.sum(fd.m >= 2))
    for k in range(ds.p):
        ak = fit.vc_curves[ds.q + 1 + k](fd.t)
        mu[k] = float(np.sum(fd.wobs * ak * ak) / n)
        psi1[k] = float(np.sum(fd.wobs * ak * ak * (gd_at_t + s2_at_t)) / n)
        gpair = _bilinear(sg, gamma_surf, fd.t[ia], fd.t[ib])
        val = float(np.sum(wt * ak[ia] * ak[ib] * gpair) / max(n2, 1))
        if val < 0:
            trunc["psi2"] += 1
            val = 0.0
        psi2[k] = val

    return NuisanceEstimates(
        tgrid=tgrid, xi=np.nan_to_num(xi), xi_inv=xi_inv, g_diag=g_diag,
        gamma_diag=gamma_diag, sigma2=sigma2, f_t=f_t,
        surf_grid=sg, gamma_surface=gamma_surf, rho1=rho1, d2_vc=d2_vc,
        xgrids=tuple(xgrids), f_x=tuple(f_x), d2_beta=tuple(d2_beta),
        mu=mu, psi1=psi1, psi2=psi2, h_time=float(h_t),
        h_x=float(h_xs[0]) if ds.p else 0.0,
        sand_vc_t1=sand_vc_t1, sand_vc_t2=sand_vc_t2,
        sand_a_t1=tuple(sand_a_t1), sand_a_t2=tuple(sand_a_t2),
        d2_vc_var=d2_vc_var, d2_beta_var=tuple(d2_beta_var),
        transfer_var=transfer_var,
        truncations=trunc, pairs_available=pairs_available,
    )


def gamma_c_parts(t, ne, s, h_c, rho=1.0):
    """Sparse-type and dense-type terms of the unified coefficient-curve
    variance matrix at t (both symmetrized).

    ``rho`` is the distance to the nearer support edge in bandwidths; with
    the default (interior) the sparse term carries the printed constant
    kappa, otherwise the boundary-adjusted equivalent-kernel constant.
    """
    var_const, _ = boundary_kernel_constants(rho)
    ft = float(ne.f_t_at(t))
    if ft <= DENSITY_FLOOR:
        raise BoundaryDensityError(f"time density {ft:.2e} at t={t}")
    xi_inv = ne.xi_inv_at(t)
    gd = float(ne.gamma_diag_at(t))
    s2 = float(ne.sigma2_at(t))
    gmat = ne.g_diag_at(t)
    sig_s = xi_inv * (gd + s2)
    sig_d = xi_inv @ (gd * gmat) @ xi_inv
    t1 = var_const / (s.n * s.nbar_h * h_c * ft) * sig_s
    t2 = (1.0 / s.n) * (1.0 - 1.0 / s.nbar_h) * sig_d
    return _sym(t1), _sym(t2)


def gamma_c(t, ne, s, h_c):
    """Unified plug-in variance matrix of the coefficient curves at t."""
    t1, t2 = gamma_c_parts(t, ne, s, h_c)
    return t1 + t2


def gamma_a_parts(k, x, ne, s, h_a, rho=1.0):
    """Sparse-type and dense-type variance terms for additive component k."""
    var_const, _ = boundary_kernel_constants(rho)
    fx = float(ne.f_x_at(k, x))
    if fx <= DENSITY_FLOOR:
        raise BoundaryDensityError(f"covariate density {fx:.2e} at x={x}")
    t1 = var_const * ne.psi1[k] / (s.n * s.nbar_h * h_a * fx)
    t2 = (1.0 / s.n) * (1.0 - 1.0 / s.nbar_h) * ne.psi2[k] / ne.mu[k] ** 2
    return t1, t2


def gamma_a(k, x, ne, s, h_a):
    t1, t2 = gamma_a_parts(k, x, ne, s, h_a)
    return t1 + t2


def _sym(mat):
    return 0.5 * (mat + mat.T)


def _sqrtm_psd(mat):
    vals, vecs = np.linalg.eigh(_sym(mat))
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _ratio(s, r):
    return s.nbar_h / s.n ** (1.0 / (2 * r))


def _rho(t, lo, hi, h):
    return float(np.clip(min(t - lo, hi - t) / h, 0.0, 1.0))


def _method_variance(t1, t2, s, h, method, r):
    """Regime-variant combination of the sparse-type and dense-type terms."""
    if method == "unified":
        return t1 + t2
    if method == "sparse":
        return t1
    if method == "ultradense":
        return t2
    if method == "dense":
        # corollary form; the observed sampling ratio stands in for the
        # unknown limit constant, so the first term is rescaled from
        # 1/(n Nbar_H h) to 1/(n C_1)
        c1 = _ratio(s, r)
        first = t1 * (s.nbar_h * h / c1)
        second = t2 / (1.0 - 1.0 / s.nbar_h) if s.nbar_h > 1 else 0.0 * t2
        return first + second
    raise ValueError(f"unknown method {method!r}")


def _vc_variance(t, ne, s, h_c, method, r, rho=1.0):
    if ne.sand_vc_t1 is not None:
        t1 = _interp_table(t, ne.tgrid, ne.sand_vc_t1)
        t2 = _interp_table(t, ne.tgrid, ne.sand_vc_t2)
    else:
        t1, t2 = gamma_c_parts(t, ne, s, h_c, rho)
    return _sym(_method_variance(t1, t2, s, h_c, method, r))


def ci_vc(fit, ne, s, t, level, method="unified", r=SMOOTHNESS_ORDER):
    """Bias-corrected pointwise interval for every coefficient curve at t.

    Returns (center, lower, upper) arrays of length q+1+p.  Within one
    bandwidth of the support edges the kernel constants switch to their
    boundary-adjusted values.
    """
    z = norm.ppf(0.5 + level / 2.0)
    rho = _rho(t, ne.tgrid[0], ne.tgrid[-1], fit.h_c)
    _, bias_const = boundary_kernel_constants(rho)
    est = fit.vc_matrix(t)[0]
    bscale = 0.5 * fit.h_c ** 2 * bias_const
    bias = bscale * (ne.xi_inv_at(t) @ ne.rho1_at(t))
    center = est - bias
    var = _vc_variance(t, ne, s, fit.h_c, method, r, rho)
    diag = np.diag(_sqrtm_psd(var)) ** 2
    if ne.d2_vc_var is not None:
        diag = diag + bscale ** 2 * _interp_table(t, ne.tgrid, ne.d2_vc_var)
    if ne.transfer_var is not None and fit.p:
        # the trend absorbs each additive curve's centering error
        diag = diag.copy()
        for k in range(fit.p):
            ak = float(fit.vc_curves[fit.q + 1 + k](t))
            diag[0] += ak * ak * ne.transfer_var[k]
    half = z * np.sqrt(diag)
    return center, center - half, center + half


def ci_additive(fit, ne, s, k, x, level, method="unified", r=SMOOTHNESS_ORDER):
    """Bias-corrected pointwise interval for additive component k at x."""
    z = norm.ppf(0.5 + level / 2.0)
    grid = ne.xgrids[k]
    rho = _rho(x, grid[0], grid[-1], fit.h_a)
    var_const, bias_const = boundary_kernel_constants(rho)
    est = float(fit.additive_curves[k](x))
    bscale = 0.5 * fit.h_a ** 2 * bias_const / ne.mu[k]
    bias = float(ne.d2_beta_at(k, x)) * bscale
    center = est - bias
    if ne.sand_a_t1:
        t1 = float(np.interp(x, grid, ne.sand_a_t1[k]))
        t2 = float(np.interp(x, grid, ne.sand_a_t2[k]))
    else:
        t1, t2 = gamma_a_parts(k, x, ne, s, fit.h_a, rho)
    var = _method_variance(t1, t2, s, fit.h_a, method, r)
    if len(ne.d2_beta_var):
        var = var + bscale ** 2 * float(np.interp(x, grid, ne.d2_beta_var[k]))
    half = z * np.sqrt(max(var, 0.0))
    return center, center - half, center + half


def vc_bands(fit, ne, s, grid, level, method="unified"):
    """ConfidenceBand per coefficient curve over a grid of times."""
    grid = np.asarray(grid, dtype=np.float64)
    d = fit.q + 1 + fit.p
    center = np.empty((grid.size, d))
    lower = np.empty_like(center)
    upper = np.empty_like(center)
    for i, t in enumerate(grid):
        center[i], lower[i], upper[i] = ci_vc(fit, ne, s, t, level, method)
    return tuple(
        ConfidenceBand(fit.vc_curves[j].name, grid, center[:, j],
                       lower[:, j], upper[:, j], level, method)
        for j in range(d)
    )


def additive_bands(fit, ne, s, k, grid, level, method="unified"):
    grid = np.asarray(grid, dtype=np.float64)
    rows = np.array([ci_additive(fit, ne, s, k, x, level, method) for x in grid])
    return ConfidenceBand(fit.additive_curves[k].name, grid, rows[:, 0],
                          rows[:, 1], rows[:, 2], level, method)


def classify_regime(s, r=SMOOTHNESS_ORDER, thresholds=REGIME_THRESHOLDS):
    """Sparse/dense/ultra-dense label from the sampling ratio
    Nbar_H / n^(1/2r); the middle interval is closed."""
    if r < 1:
        raise ValueError("smoothness order must be >= 1")
    ratio = _ratio(s, r)
    lo, hi = thresholds
    if ratio < lo:
        label = "sparse"
    elif ratio > hi:
        label = "ultradense"
    else:
        label = "dense"
    return RegimeReport(r=r, ratio=float(ratio), label=label, thresholds=(lo, hi))


def write_band_csv(path, bands):
    """Export bands as ``grid,center,lower,upper,method,level`` rows."""
    bands = [bands] if isinstance(bands, ConfidenceBand) else list(bands)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["grid", "center", "lower", "upper", "method", "level"])
        for band in bands:
            for i in range(band.grid.size):
                writer.writerow([
                    repr(float(band.grid[i])), repr(float(band.center[i])),
                    repr(float(band.lower[i])), repr(float(band.upper[i])),
                    band.method, band.level,
                ])
