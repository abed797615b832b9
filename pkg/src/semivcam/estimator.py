"""Two-stage local linear estimation of the semi varying-coefficient
additive model.

Pipeline: tensor-spline pilot fit, a varying-coefficient local linear step
on the time grid using the centered pilot additive components, an additive
local linear step per continuous covariate using the refreshed coefficient
curves, then renormalization enforcing mean-one coefficient curves and
mean-zero additive curves, and (by default) one final coefficient refit so
constants absorbed by the centering return to the trend.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from . import _accel, splines
from .errors import ExtrapolationError, FitError, SelectionError, SingularFitError
from .smoothing import solve_gram

VC_REFIT_DEFAULT = True
MAX_SINGULAR_FRACTION = 0.05


@dataclass(frozen=True)
class ComponentCurve:
    """Tabulated estimate with local-linear slopes and bandwidth metadata.

    ``boundary_mask`` flags grid points within one bandwidth of the support
    ends, where the interior asymptotics do not apply.
    """

    name: str
    grid: np.ndarray
    values: np.ndarray
    slope_values: np.ndarray
    bandwidth: float

    @property
    def boundary_mask(self):
        lo, hi = self.grid[0], self.grid[-1]
        return (self.grid < lo + self.bandwidth) | (self.grid > hi - self.bandwidth)

    def __call__(self, s):
        """Clamped linear interpolation (predict() enforces bounds)."""
        return np.interp(np.asarray(s, dtype=np.float64), self.grid, self.values)

    def scaled(self, factor):
        return ComponentCurve(self.name, self.grid, self.values * factor,
                              self.slope_values * factor, self.bandwidth)

    def shifted(self, delta):
        return ComponentCurve(self.name, self.grid, self.values + delta,
                              self.slope_values, self.bandwidth)


@dataclass
class FitConfig:
    h_c: object = "auto"
    h_a: object = "auto"
    k_c: object = "auto"
    k_a: object = "auto"
    order: int = splines.DEFAULT_ORDER
    grid_size: int = 101
    vc_refit_after_additive: bool = VC_REFIT_DEFAULT
    cv_grid_c: object = None   # None -> geometric grid relative to support
    cv_grid_a: object = None
    bic_grid: tuple = (1, 2, 3, 4, 5)

    def __post_init__(self):
        for name in ("h_c", "h_a"):
            v = getattr(self, name)
            if v != "auto" and (not np.isfinite(v) or v <= 0):
                raise ValueError(f"{name} must be positive or 'auto'")
        if self.grid_size < 5:
            raise ValueError("grid_size too small")


@dataclass(frozen=True)
class SemiVcamFit:
    vc_curves: tuple          # q+1+p curves over the time support
    additive_curves: tuple    # p curves over the covariate supports
    h_c: float
    h_a: float
    k_c: int
    k_a: int
    pilot: splines.PilotFit
    normalization_report: dict
    p: int
    q: int
    time_support: tuple
    covariate_supports: tuple
    n_singular: int = 0
    n_ridged: int = 0
    notes: tuple = ()

    def vc_matrix(self, t):
        """(len(t), q+1+p) coefficient curves interpolated at t."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        return np.column_stack([c(t) for c in self.vc_curves])

    def beta_matrix(self, x):
        """(len(x), p) additive curves interpolated at x (columnwise)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if self.p == 0:
            return np.zeros((x.shape[0], 0))
        return np.column_stack(
            [self.additive_curves[k](x[:, k]) for k in range(self.p)]
        )

    def mean_at(self, t, z, x):
        """Fitted mean at observation arrays (clamped interpolation)."""
        vc = self.vc_matrix(t)
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        out = np.einsum("nj,nj->n", z, vc[:, : self.q + 1])
        if self.p:
            bx = self.beta_matrix(x)
            out = out + np.einsum("nk,nk->n", vc[:, self.q + 1 :], bx)
        return out

    def to_json(self):
        doc = {
            "p": self.p,
            "q": self.q,
            "time_support": list(self.time_support),
            "covariate_supports": [list(s) for s in self.covariate_supports],
            "bandwidths": {"h_c": self.h_c, "h_a": self.h_a},
            "knots": {"k_c": self.k_c, "k_a": self.k_a,
                      "order": self.pilot.basis_c.order},
            "normalization": self.normalization_report,
            "n_singular": self.n_singular,
            "n_ridged": self.n_ridged,
            "notes": list(self.notes),
            "vc_curves": [_curve_doc(c) for c in self.vc_curves],
            "additive_curves": [_curve_doc(c) for c in self.additive_curves],
            "pilot": self.pilot.to_dict(),
        }
        return json.dumps(doc, sort_keys=True, indent=1)


def _curve_doc(c):
    return {
        "name": c.name,
        "grid": c.grid.tolist(),
        "values": c.values.tolist(),
        "slopes": c.slope_values.tolist(),
        "bandwidth": c.bandwidth,
        "boundary_mask": c.boundary_mask.astype(int).tolist(),
    }


def _vc_names(q, p):
    return (["alpha0"] + [f"alpha0_z{l}" for l in range(1, q + 1)]
            + [f"alpha_x{k}" for k in range(1, p + 1)])


def _solve_targets(a, b, wsum, cnt, dim):
    """Per-target symmetric solves; returns levels, slopes, kept mask and
    ridge count.  Targets with too few in-window rows are dropped."""
    g = a.shape[0]
    levels = np.zeros((g, dim))
    slopes = np.zeros((g, dim))
    kept = np.zeros(g, dtype=bool)
    ridged = 0
    for i in range(g):
        if cnt[i] < 2 * dim:
            continue
        try:
            c, r = solve_gram(a[i], b[i])
        except np.linalg.LinAlgError:
            continue
        if not np.all(np.isfinite(c)):
            continue
        levels[i] = c[:dim]
        slopes[i] = c[dim:]
        kept[i] = True
        ridged += int(r)
    return levels, slopes, kept, ridged


def _vc_design(fd, betas):
    """Per-observation regressors (Z, beta_1(X_1), ..., beta_p(X_p))."""
    cols = [fd.z]
    for k, beta in enumerate(betas):
        cols.append(np.asarray(beta(fd.x[:, k]), dtype=np.float64)[:, None])
    return np.hstack(cols) if len(cols) > 1 else fd.z


def vc_step(ds, betas, h_c, t):
    """Coefficient-curve local linear solve at a single time point.

    Returns the intercept block (length q+1+p).  Raises
    ``SingularFitError`` carrying the target when the window is deficient.
    """
    fd = ds.flat()
    fmat = _vc_design(fd, betas)
    dim = fmat.shape[1]
    a, b, wsum, cnt = _accel.ll_moments(
        fd.t, fmat, fd.y, fd.wobs, np.array([float(t)]), h_c
    )
    levels, _, kept, _ = _solve_targets(a, b, wsum, cnt, dim)
    if not kept[0]:
        raise SingularFitError(f"singular coefficient fit at t={t}", target=t)
    return levels[0]


def additive_step(ds, vc, betas_other, h_a, k, x):
    """Additive-component local linear solve at a single covariate value.

    ``vc`` is a sequence of q+1+p callables, ``betas_other`` maps l != k to
    callables.  Returns (level, slope).
    """
    fd = ds.flat()
    resid, mult = _partial_residual(ds, fd, vc, betas_other, k)
    a, b, wsum, cnt = _accel.ll_moments(
        fd.x[:, k], mult[:, None], resid, fd.wobs, np.array([float(x)]), h_a
    )
    levels, slopes, kept, _ = _solve_targets(a, b, wsum, cnt, 1)
    if not kept[0]:
        raise SingularFitError(f"singular additive fit at x={x}", target=x)
    return float(levels[0, 0]), float(slopes[0, 0])


def _partial_residual(ds, fd, vc, betas_other, k):
    vcm = np.column_stack([np.asarray(c(fd.t), dtype=np.float64) for c in vc])
    resid = fd.y - np.einsum("nj,nj->n", fd.z, vcm[:, : ds.q + 1])
    for l in range(ds.p):
        if l == k:
            continue
        bl = betas_other[l]
        resid = resid - vcm[:, ds.q + 1 + l] * np.asarray(bl(fd.x[:, l]), dtype=np.float64)
    mult = vcm[:, ds.q + 1 + k]
    return resid, mult


def _vc_curves_on_grid(ds, fd, betas, h_c, tgrid, names):
    fmat = _vc_design(fd, betas)
    dim = fmat.shape[1]
    a, b, wsum, cnt = _accel.ll_moments(fd.t, fmat, fd.y, fd.wobs, tgrid, h_c)
    levels, slopes, kept, ridged = _solve_targets(a, b, wsum, cnt, dim)
    grid = tgrid[kept]
    curves = tuple(
        ComponentCurve(names[j], grid, levels[kept, j], slopes[kept, j], h_c)
        for j in range(dim)
    )
    return curves, int((~kept).sum()), ridged


def _additive_curve_on_grid(ds, fd, vc, betas_other, h_a, k, xgrid, name):
    resid, mult = _partial_residual(ds, fd, vc, betas_other, k)
    a, b, wsum, cnt = _accel.ll_moments(
        fd.x[:, k], mult[:, None], resid, fd.wobs, xgrid, h_a
    )
    levels, slopes, kept, ridged = _solve_targets(a, b, wsum, cnt, 1)
    curve = ComponentCurve(name, xgrid[kept], levels[kept, 0], slopes[kept, 0], h_a)
    return curve, int((~kept).sum()), ridged


def fit(ds, cfg=None):
    """Full estimation pipeline; see module docstring for the stages."""
    cfg = cfg or FitConfig()
    if ds.n < 2:
        raise FitError("need at least two subjects")
    k_c, k_a = _resolve_knots(ds, cfg)
    h_c, h_a = _resolve_bandwidths(ds, cfg, k_c, k_a)
    return _fit_with(ds, cfg, k_c, k_a, h_c, h_a)


def _resolve_knots(ds, cfg):
    if cfg.k_c == "auto" or cfg.k_a == "auto":
        grid = list(cfg.bic_grid)
        return splines.select_knots_bic(ds, grid, grid, cfg.order)
    return int(cfg.k_c), int(cfg.k_a)


def default_cv_grids(ds, cfg=None):
    """Geometric bandwidth grids spanning 4.5%..28% of each support width."""
    cfg = cfg or FitConfig()
    rel = np.geomspace(0.045, 0.28, 5)
    wt = ds.time_support[1] - ds.time_support[0]
    grid_c = cfg.cv_grid_c if cfg.cv_grid_c is not None else rel * wt
    if cfg.cv_grid_a is not None:
        grid_a = cfg.cv_grid_a
    elif ds.p:
        wx = max(hi - lo for lo, hi in ds.covariate_supports)
        grid_a = rel * wx
    else:
        grid_a = [1.0]
    return np.asarray(grid_c, dtype=np.float64), np.asarray(grid_a, dtype=np.float64)


def _resolve_bandwidths(ds, cfg, k_c, k_a):
    if cfg.h_c != "auto" and cfg.h_a != "auto":
        return float(cfg.h_c), float(cfg.h_a)
    grid_c, grid_a = default_cv_grids(ds, cfg)
    if cfg.h_c != "auto":
        grid_c = np.array([float(cfg.h_c)])
    if cfg.h_a != "auto":
        grid_a = np.array([float(cfg.h_a)])
    return cv_bandwidths(ds, grid_c, grid_a, cfg, knots=(k_c, k_a))


def _fit_with(ds, cfg, k_c, k_a, h_c, h_a):
    fd = ds.flat()
    a0, b0 = ds.time_support
    tgrid = np.linspace(a0, b0, cfg.grid_size)
    names = _vc_names(ds.q, ds.p)

    pilot = splines.fit_pilot(ds, k_c, k_a, cfg.order)
    xgrids = [np.linspace(lo, hi, cfg.grid_size) for lo, hi in ds.covariate_supports]
    betas_p = [splines.pilot_beta(pilot, ds, k, xgrids[k]) for k in range(ds.p)]

    vc_curves, n_fail, n_ridge = _vc_curves_on_grid(ds, fd, betas_p, h_c, tgrid, names)
    total_targets = cfg.grid_size
    failures = n_fail
    ridged = n_ridge

    additive = []
    for k in range(ds.p):
        others = {l: betas_p[l] for l in range(ds.p) if l != k}
        curve, nf, nr = _additive_curve_on_grid(
            ds, fd, vc_curves, others, h_a, k, xgrids[k], f"beta_x{k + 1}"
        )
        additive.append(curve)
        failures += nf
        ridged += nr
        total_targets += cfg.grid_size

    if failures > MAX_SINGULAR_FRACTION * total_targets:
        raise FitError(
            f"{failures}/{total_targets} grid targets singular; widen bandwidths"
        )

    centers, scales = [], []
    for k in range(ds.p):
        c_k = float(np.mean(additive[k](fd.x[:, k])))
        additive[k] = additive[k].shifted(-c_k)
        centers.append(c_k)
        s_k = float(np.mean(vc_curves[ds.q + 1 + k](fd.t)))
        if abs(s_k) < 1e-12:
            raise FitError(f"coefficient curve {k + 1} has near-zero mean; "
                           "scale normalization impossible")
        vc_curves = _replace(vc_curves, ds.q + 1 + k,
                             vc_curves[ds.q + 1 + k].scaled(1.0 / s_k))
        additive[k] = additive[k].scaled(s_k)
        scales.append(s_k)

    refit_scales = []
    if cfg.vc_refit_after_additive and ds.p:
        vc_curves, nf, nr = _vc_curves_on_grid(ds, fd, additive, h_c, tgrid, names)
        failures += nf
        ridged += nr
        for k in range(ds.p):
            s2 = float(np.mean(vc_curves[ds.q + 1 + k](fd.t)))
            if abs(s2) < 1e-12:
                raise FitError("refit scale normalization impossible")
            vc_curves = _replace(vc_curves, ds.q + 1 + k,
                                 vc_curves[ds.q + 1 + k].scaled(1.0 / s2))
            additive[k] = additive[k].scaled(s2)
            refit_scales.append(s2)

    report = {"centers": centers, "scales": scales, "refit_scales": refit_scales}
    notes = []
    if any(s.m == 1 for s in ds.subjects):
        notes.append("subjects with a single observation contribute nothing "
                     "to within-subject pair statistics")
    return SemiVcamFit(
        vc_curves=tuple(vc_curves),
        additive_curves=tuple(additive),
        h_c=float(h_c),
        h_a=float(h_a),
        k_c=int(k_c),
        k_a=int(k_a),
        pilot=pilot,
        normalization_report=report,
        p=ds.p,
        q=ds.q,
        time_support=ds.time_support,
        covariate_supports=ds.covariate_supports,
        n_singular=failures,
        n_ridged=ridged,
        notes=tuple(notes),
    )


def _replace(curves, idx, new):
    out = list(curves)
    out[idx] = new
    return tuple(out)


def cv_bandwidths(ds, grid_c, grid_a, cfg=None, knots=None):
    """Leave-one-subject-out bandwidth selection over a grid.

    The held-out subject is removed from every stage including the pilot
    fit.  Held-out predictions clamp to the training grids (a held-out
    subject may carry the extreme covariate values).  Ties break toward
    larger bandwidths.
    """
    cfg = cfg or FitConfig()
    grid_c = np.atleast_1d(np.asarray(grid_c, dtype=np.float64))
    grid_a = np.atleast_1d(np.asarray(grid_a, dtype=np.float64))
    if grid_c.size == 0 or grid_a.size == 0:
        raise SelectionError("empty bandwidth grids")
    if knots is None:
        knots = _resolve_knots(ds, cfg)
    k_c, k_a = knots

    loo = [ds.drop_subject(i) for i in range(ds.n)]
    best = None
    for h_c in grid_c:
        for h_a in grid_a:
            score = 0.0
            ok = True
            for i in range(ds.n):
                rec = ds.subjects[i]
                try:
                    f = _fit_with(loo[i], cfg, k_c, k_a, h_c, h_a)
                except Exception:
                    ok = False
                    break
                zfull = np.column_stack([np.ones(rec.m), rec.z]) if ds.q else np.ones((rec.m, 1))
                pred = f.mean_at(rec.times, zfull, rec.x)
                score += float(np.sum((rec.responses - pred) ** 2)) / rec.m
            if not ok:
                continue
            key = (score, -(h_c + h_a))
            if best is None or key < best[0]:
                best = (key, (float(h_c), float(h_a)))
    if best is None:
        raise SelectionError("every bandwidth cell failed")
    return best[1]


def cv_score(ds, h_c, h_a, cfg=None, knots=None):
    """CV objective at one bandwidth pair (used by diagnostics/tests)."""
    cfg = cfg or FitConfig()
    if knots is None:
        knots = _resolve_knots(ds, cfg)
    k_c, k_a = knots
    score = 0.0
    for i in range(ds.n):
        rec = ds.subjects[i]
        f = _fit_with(ds.drop_subject(i), cfg, k_c, k_a, h_c, h_a)
        zfull = np.column_stack([np.ones(rec.m), rec.z]) if ds.q else np.ones((rec.m, 1))
        pred = f.mean_at(rec.times, zfull, rec.x)
        score += float(np.sum((rec.responses - pred) ** 2)) / rec.m
    return score


def predict(fit_result, t, z, x):
    """Model mean at a single (t, z, x); z excludes the intercept.

    Raises ``ExtrapolationError`` outside the tabulated grids.
    """
    t = float(t)
    lo, hi = fit_result.vc_curves[0].grid[0], fit_result.vc_curves[0].grid[-1]
    if not lo <= t <= hi:
        raise ExtrapolationError(f"t={t} outside [{lo}, {hi}]")
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    if z.size != fit_result.q:
        raise ValueError(f"expected {fit_result.q} discrete covariates")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64)) if fit_result.p else np.zeros(0)
    if x.size != fit_result.p:
        raise ValueError(f"expected {fit_result.p} continuous covariates")
    for k in range(fit_result.p):
        g = fit_result.additive_curves[k].grid
        if not g[0] <= x[k] <= g[-1]:
            raise ExtrapolationError(f"x_{k + 1}={x[k]} outside [{g[0]}, {g[-1]}]")
    zfull = np.concatenate([[1.0], z])
    vc = fit_result.vc_matrix(t)[0]
    out = float(zfull @ vc[: fit_result.q + 1])
    for k in range(fit_result.p):
        out += float(vc[fit_result.q + 1 + k] * fit_result.additive_curves[k](x[k]))
    return out
