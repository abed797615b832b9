"""Specification tests: time-invariance of the coefficient curves and
linearity of the additive components.

Both tests compare null-model residuals across subjects through a
kernel-weighted quadratic form over between-subject observation pairs,
standardize it with the printed variance estimator, and calibrate by a
subject-level wild bootstrap: each replicate multiplies a subject's whole
null-fit residual vector by an independent Rademacher sign, which preserves
the within-subject covariance that the mixed-effects errors induce.
Rejection is one-sided (large standardized values), matching the direction
in which both alternatives inflate the statistic.
"""

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from . import _accel, estimator
from .dataset import summarize
from .errors import DegenerateStatisticError, SingularFitError
from .smoothing import solve_gram

#: test bandwidths default to the estimation bandwidths times N^(-1/20)
TEST_BANDWIDTH_EXPONENT = -1.0 / 20.0


@dataclass(frozen=True)
class NullFitC:
    """Constant-coefficient null fit (ordinary least squares on the
    regressors (Z, beta_hat(X)))."""

    a_tilde: np.ndarray
    design: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray


@dataclass(frozen=True)
class NullFitA:
    """Varying-coefficient null fit (local linear with regressors (Z, X))."""

    vc_tilde: tuple
    fitted: np.ndarray
    residuals: np.ndarray
    grid: np.ndarray
    levels: np.ndarray   # (G, d) curve values on grid
    _design: np.ndarray  # (N, d)
    _wdesign: np.ndarray  # (G, 2d, N) kernel-weighted design rows
    _ainv: np.ndarray    # (G, 2d, 2d)


@dataclass(frozen=True)
class TestResult:
    which: str
    stat: float
    z: float
    sigma1: float
    p_asymptotic: float
    p_bootstrap: float
    boot_stats: np.ndarray
    h_c: float
    h_a: float
    B: int
    seed: object
    n_dropped: int = 0

    def to_json(self):
        doc = {
            "which": self.which,
            "stat": self.stat,
            "z": self.z,
            "sigma1": self.sigma1,
            "p_asymptotic": self.p_asymptotic,
            "p_bootstrap": self.p_bootstrap,
            "B": self.B,
            "seed": self.seed,
            "bandwidths": {"h_c": self.h_c, "h_a": self.h_a},
            "n_dropped": self.n_dropped,
            "boot_stats": [float(v) for v in self.boot_stats],
        }
        return json.dumps(doc, sort_keys=True, indent=1)


def fit_null_constant(ds, betas):
    """OLS of the responses on rows (Z_ij, beta_1(X_ij1), ..., beta_p(X_ijp)).

    ``betas`` are the fitted additive curves of the full model; they stay
    fixed here and across bootstrap replicates.
    """
    fd = ds.flat()
    cols = [fd.z] + [
        np.asarray(betas[k](fd.x[:, k]), dtype=np.float64)[:, None]
        for k in range(ds.p)
    ]
    design = np.hstack(cols)
    try:
        a_tilde, _ = solve_gram(design.T @ design, design.T @ fd.y)
    except np.linalg.LinAlgError:
        raise SingularFitError("null-fit cross-product singular") from None
    fitted = design @ a_tilde
    return NullFitC(a_tilde, design, fitted, fd.y - fitted)


def fit_null_vcm(ds, h_c, grid_size=101):
    """Local linear varying-coefficient fit with linear covariate effects.

    Precomputes per-target inverses and weighted designs so bootstrap
    replicates only refresh the right-hand side.
    """
    fd = ds.flat()
    design = np.hstack([fd.z, fd.x]) if ds.p else fd.z
    d = design.shape[1]
    lo, hi = float(fd.t.min()), float(fd.t.max())
    tgrid = np.linspace(lo, hi, grid_size)
    a, b, wsum, cnt = _accel.ll_moments(fd.t, design, fd.y, fd.wobs, tgrid, h_c)
    kept = np.zeros(grid_size, dtype=bool)
    ainv = np.zeros_like(a)
    for g in range(grid_size):
        if cnt[g] < 2 * d:
            continue
        try:
            inv, _ = solve_gram(a[g], np.eye(2 * d))
        except np.linalg.LinAlgError:
            continue
        ainv[g] = inv
        kept[g] = True
    if kept.sum() < 2:
        raise SingularFitError("null varying-coefficient fit failed everywhere")

    grid = tgrid[kept]
    ainv = ainv[kept]
    # kernel-weighted design rows per kept target: rows (R, R*(T-t)) * w
    u = (fd.t[None, :] - grid[:, None]) / h_c
    kv = np.where(np.abs(u) < 1, 0.75 * (1 - u * u), 0.0)
    kw = kv * fd.wobs[None, :] / h_c
    du = fd.t[None, :] - grid[:, None]
    wdesign = np.empty((grid.size, 2 * d, fd.t.size))
    wdesign[:, :d, :] = kw[:, None, :] * design.T[None, :, :]
    wdesign[:, d:, :] = (kw * du)[:, None, :] * design.T[None, :, :]

    coef0 = np.einsum("gde,ge->gd", ainv, wdesign @ fd.y)
    levels = coef0[:, :d]
    fitted, resid = _vcm_values(fd, design, grid, levels)
    curves = tuple(
        estimator.ComponentCurve(
            estimator._vc_names(ds.q, ds.p)[j].replace("alpha", "alpha_null"),
            grid, levels[:, j], np.zeros(grid.size), h_c)
        for j in range(d)
    )
    return NullFitA(curves, fitted, resid, grid, levels, design, wdesign, ainv)


def _vcm_values(fd, design, grid, levels):
    vals = np.column_stack(
        [np.interp(fd.t, grid, levels[:, j]) for j in range(design.shape[1])]
    )
    fitted = np.einsum("nd,nd->n", design, vals)
    return fitted, fd.y - fitted


def _vcm_refit(fd, nf, y):
    """Levels for a new response vector using the precomputed factors."""
    d = nf._design.shape[1]
    b = nf._wdesign @ y
    coef = np.einsum("gde,ge->gd", nf._ainv, b)
    levels = coef[:, :d]
    return _vcm_values(fd, nf._design, nf.grid, levels)


def pair_weight(obs_a, obs_b, h_c, h_a):
    """Unnormalized product kernel weight between two observations
    (t, x-vector); the statistic's 1/|H| factor carries the normalization."""
    ta, xa = obs_a
    tb, xb = obs_b
    ut = (ta - tb) / h_c
    w = 0.75 * (1 - ut * ut) if abs(ut) < 1 else 0.0
    for a, b in zip(np.atleast_1d(xa), np.atleast_1d(xb)):
        ux = (a - b) / h_a
        w *= 0.75 * (1 - ux * ux) if abs(ux) < 1 else 0.0
    return float(w)


def stat_quadratic(ds, residuals, h_c, h_a, s=None):
    """Quadratic-form statistic over between-subject pairs, its variance
    estimate, and the standardized value.

    Per-pair block sums are accumulated exactly (math.fsum), so the result
    is bit-identical under subject relabeling.
    """
    if ds.n < 2:
        raise ValueError("need at least two subjects")
    s = s or summarize(ds)
    fd = ds.flat()
    resid = np.asarray(residuals, dtype=np.float64)
    c, d2 = _accel.pair_quad_blocks(fd.t, fd.x, resid, fd.starts, h_c, h_a)
    h_vol = h_c * h_a ** ds.p
    j_raw = math.fsum(c.ravel())
    v_raw = math.fsum(d2.ravel())
    stat = j_raw / (s.n ** 2 * s.nbar_h ** 2 * h_vol)
    sigma1_sq = v_raw / (s.n ** 2 * s.nbar_h * h_vol)
    if sigma1_sq <= 0:
        raise DegenerateStatisticError(
            "all cross-subject pair weights vanished; increase the test bandwidths"
        )
    sigma1 = math.sqrt(sigma1_sq)
    scale = s.n ** 2 * s.nbar_h ** 2 / math.sqrt(s.N ** 2 - s.n * s.nbar_2)
    z = scale * math.sqrt(h_vol) * stat / sigma1
    return stat, z, sigma1


def test_bandwidths(ds, h_c_est, h_a_est, scale=True):
    """Default test bandwidths: estimation bandwidths times N^(-1/20)."""
    if not scale:
        return float(h_c_est), float(h_a_est)
    f = ds.N ** TEST_BANDWIDTH_EXPONENT
    return float(h_c_est * f), float(h_a_est * f)


def bootstrap_test(ds, which, h_c=None, h_a=None, B=300, seed=0,
                   fit_cfg=None, fit_result=None, scale_bandwidths=True,
                   grid_size=101):
    """Wild-bootstrap p-value for one of the two specification tests.

    ``which`` is ``"time_varying"`` or ``"linearity"``.  ``h_c``/``h_a``
    are the estimation bandwidths (selected by CV when omitted); the pair
    weights use them scaled by N^(-1/20).  Replicate b uses the RNG stream
    spawned from (seed, b), so results do not depend on scheduling.
    """
    if which not in ("time_varying", "linearity"):
        raise ValueError(f"unknown test {which!r}")
    if B < 99:
        raise ValueError("bootstrap needs B >= 99")
    s = summarize(ds)
    fd = ds.flat()

    if h_c is None or h_a is None:
        if fit_result is not None:
            h_c, h_a = fit_result.h_c, fit_result.h_a
        else:
            fit_result = estimator.fit(ds, fit_cfg or estimator.FitConfig())
            h_c, h_a = fit_result.h_c, fit_result.h_a
    h_c_test, h_a_test = test_bandwidths(ds, h_c, h_a, scale_bandwidths)

    if which == "time_varying":
        if fit_result is None:
            import dataclasses

            cfg = dataclasses.replace(fit_cfg or estimator.FitConfig(),
                                      h_c=h_c, h_a=h_a)
            fit_result = estimator.fit(ds, cfg)
        nf = fit_null_constant(ds, fit_result.additive_curves)
        gram_inv, _ = solve_gram(nf.design.T @ nf.design,
                                 np.eye(nf.design.shape[1]))
        proj = gram_inv @ nf.design.T

        def refit(y_star):
            fitted = nf.design @ (proj @ y_star)
            return y_star - fitted

        fitted0, resid0 = nf.fitted, nf.residuals
    else:
        nf = fit_null_vcm(ds, h_c, grid_size)

        def refit(y_star):
            _, resid = _vcm_refit(fd, nf, y_star)
            return resid

        fitted0, resid0 = nf.fitted, nf.residuals

    stat, z, sigma1 = stat_quadratic(ds, resid0, h_c_test, h_a_test, s)

    boot = np.empty(B)
    dropped = 0
    for b in range(B):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(b,))
        )
        signs = rng.integers(0, 2, ds.n) * 2.0 - 1.0
        y_star = fitted0 + np.repeat(signs, fd.m) * resid0
        try:
            _, zb, _ = stat_quadratic(ds, refit(y_star), h_c_test, h_a_test, s)
        except DegenerateStatisticError:
            zb = np.nan
        boot[b] = zb
    finite = np.isfinite(boot)
    dropped = int(B - finite.sum())
    if dropped > 0.1 * B:
        raise DegenerateStatisticError(
            f"{dropped}/{B} bootstrap replicates degenerate"
        )
    kept = boot[finite]
    p_boot = (1.0 + float(np.sum(kept >= z))) / (kept.size + 1.0)
    p_asym = float(1.0 - norm.cdf(z))
    return TestResult(
        which=which, stat=float(stat), z=float(z), sigma1=float(sigma1),
        p_asymptotic=p_asym, p_bootstrap=float(p_boot), boot_stats=kept,
        h_c=h_c_test, h_a=h_a_test, B=B, seed=seed, n_dropped=dropped,
    )
