"""B-spline bases, the tensor-product pilot fit, and BIC knot selection.

The pilot stage approximates each multiplicative pair alpha_k(t) beta_k(x)
by an unconstrained bivariate tensor-spline surface and recovers a centered
additive component by averaging the surface over the observed times.  The
tensor block of each covariate overlaps the intercept block (both contain
pure functions of t), so the pilot design is structurally rank deficient by
p * J_C; the minimum-norm least-squares solve plus centering makes every
downstream quantity well defined.
"""

from dataclasses import dataclass

import numpy as np

from . import _accel
from .errors import DomainError, KnotPlacementError, PilotSingularError, SelectionError

DEFAULT_ORDER = 4  # cubic


@dataclass(frozen=True)
class SplineBasis:
    order: int
    interior_knots: np.ndarray
    boundary: tuple

    @property
    def dimension(self):
        return self.order + self.interior_knots.size

    @property
    def knots(self):
        """Full clamped knot vector of length dimension + order."""
        lo, hi = self.boundary
        return np.concatenate(
            [np.full(self.order, lo), self.interior_knots, np.full(self.order, hi)]
        )


def make_basis(values, k, order=DEFAULT_ORDER, boundary=None):
    """Basis with ``k`` interior knots at equispaced quantiles of ``values``
    and boundary knots at the observed min/max (or an explicit interval
    enclosing the values, e.g. a dataset's declared support)."""
    if k < 0:
        raise ValueError("interior knot count must be >= 0")
    vals = np.asarray(values, dtype=np.float64)
    distinct = np.unique(vals)
    if distinct.size < k + 2:
        raise KnotPlacementError(
            f"{distinct.size} distinct values cannot support {k} interior knots"
        )
    if boundary is None:
        lo, hi = float(vals.min()), float(vals.max())
    else:
        lo, hi = float(boundary[0]), float(boundary[1])
        lo, hi = min(lo, float(vals.min())), max(hi, float(vals.max()))
    if k:
        interior = np.quantile(vals, np.arange(1, k + 1) / (k + 1))
        inside = (interior > lo) & (interior < hi)
        if not inside.all() or np.unique(interior).size < k:
            raise KnotPlacementError("quantile knots collide with each other or the boundary")
    else:
        interior = np.empty(0)
    return SplineBasis(order, interior, (lo, hi))


def _check_domain(basis, x):
    lo, hi = basis.boundary
    slack = 1e-12 * max(1.0, hi - lo)
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < lo - slack) or np.any(x > hi + slack):
        raise DomainError(
            f"evaluation outside [{lo}, {hi}] beyond slack"
        )


def basis_design(basis, xs):
    """(len(xs), J) matrix of basis values; domain-checked then clamped."""
    xs = np.atleast_1d(np.asarray(xs, dtype=np.float64))
    _check_domain(basis, xs)
    return _accel.bspline_design(xs, basis.knots, basis.order)


def basis_eval(basis, x):
    """Basis vector of length J at a single point."""
    return basis_design(basis, [x])[0]


def _deriv_factors(knots, order):
    """Knot-difference reciprocals used by the derivative recurrences,
    with the 0/0 -> 0 convention for repeated knots."""
    def recip(i, span):
        d = knots[i + span] - knots[i]
        return 1.0 / d if d > 0 else 0.0
    return recip


def basis_design_d2(basis, xs):
    """Second derivatives of every basis function at ``xs``.

    Uses the two-step derivative recurrence: B''_{j,k} is a three-term
    combination of order-(k-2) bases.
    """
    order = basis.order
    if order < 3:
        return np.zeros((np.atleast_1d(xs).size, basis.dimension))
    xs = np.atleast_1d(np.asarray(xs, dtype=np.float64))
    _check_domain(basis, xs)
    knots = basis.knots
    j_dim = basis.dimension
    low = _accel.bspline_design(xs, knots, order - 2)  # (M, j_dim + 2)
    recip = _deriv_factors(knots, order)
    out = np.zeros((xs.size, j_dim))
    c = (order - 1) * (order - 2)
    for j in range(j_dim):
        r1 = recip(j, order - 1)
        r2 = recip(j + 1, order - 1)
        out[:, j] = c * (
            low[:, j] * r1 * recip(j, order - 2)
            - low[:, j + 1] * (r1 + r2) * recip(j + 1, order - 2)
            + low[:, j + 2] * r2 * recip(j + 2, order - 2)
        )
    return out


def tensor_basis(b_t, b_x):
    """Kronecker product, additive basis major: kron(b_x, b_t)."""
    return np.kron(np.asarray(b_x, dtype=np.float64),
                   np.asarray(b_t, dtype=np.float64))


@dataclass(frozen=True)
class PilotFit:
    gamma0: np.ndarray      # (q+1, J_C) coefficient block for Z (x) b_C
    gamma: np.ndarray       # (p, J_A, J_C) tensor coefficients per covariate
    basis_c: SplineBasis
    bases_a: tuple          # p bases over the covariate supports
    rss: float              # SUBJ-weighted residual sum of squares
    rank: int
    bbar_c: np.ndarray      # (1/N) sum of b_C(T_ij), drives the beta average

    def g_surface(self, k, t, x):
        """Fitted bivariate surface for covariate k at (t, x) arrays."""
        bt = basis_design(self.basis_c, np.atleast_1d(t))
        bx = basis_design(self.bases_a[k], np.atleast_1d(x))
        return np.einsum("ia,ac,ic->i", bx, self.gamma[k], bt)

    def to_dict(self):
        return {
            "gamma0": self.gamma0.tolist(),
            "gamma": self.gamma.tolist(),
            "rss": self.rss,
            "rank": self.rank,
            "order": self.basis_c.order,
            "knots_c": self.basis_c.interior_knots.tolist(),
            "boundary_c": list(self.basis_c.boundary),
            "knots_a": [b.interior_knots.tolist() for b in self.bases_a],
            "boundary_a": [list(b.boundary) for b in self.bases_a],
            "bbar_c": self.bbar_c.tolist(),
        }


@dataclass(frozen=True)
class PilotAdditive:
    """Centered pilot additive component: a spline in x with coefficients
    ``coef`` on ``basis``, shifted by ``centering_constant``."""

    k: int
    basis: SplineBasis
    coef: np.ndarray
    centering_constant: float
    grid: np.ndarray
    values: np.ndarray

    def __call__(self, x):
        lo, hi = self.basis.boundary
        xc = np.clip(np.asarray(x, dtype=np.float64), lo, hi)
        return basis_design(self.basis, np.atleast_1d(xc)) @ self.coef - self.centering_constant


def _pilot_design(ds, basis_c, bases_a):
    fd = ds.flat()
    bt = basis_design(basis_c, fd.t)                      # (N, J_C)
    blocks = [(fd.z[:, :, None] * bt[:, None, :]).reshape(fd.t.size, -1)]
    for k in range(ds.p):
        bx = basis_design(bases_a[k], fd.x[:, k])         # (N, J_A)
        blocks.append((bx[:, :, None] * bt[:, None, :]).reshape(fd.t.size, -1))
    return np.hstack(blocks), bt


def fit_pilot(ds, k_c, k_a, order=DEFAULT_ORDER):
    """Tensor-spline least squares under SUBJ weights (minimum-norm).

    Raises ``PilotSingularError`` when the design rank drops below the
    structural expectation (columns minus the p * J_C basis overlap).
    """
    fd = ds.flat()
    basis_c = make_basis(fd.t, k_c, order, boundary=ds.time_support)
    bases_a = tuple(
        make_basis(fd.x[:, k], k_a, order, boundary=ds.covariate_supports[k])
        for k in range(ds.p)
    )
    design, bt = _pilot_design(ds, basis_c, bases_a)
    ncols = design.shape[1]
    if ncols > fd.t.size:
        raise PilotSingularError(
            f"{ncols} design columns exceed {fd.t.size} observations",
            nullity=ncols - fd.t.size,
        )
    j_c = basis_c.dimension
    sw = np.sqrt(fd.wobs)
    coef, _, rank, _ = np.linalg.lstsq(design * sw[:, None], fd.y * sw, rcond=None)
    structural = ds.p * j_c
    if rank < ncols - structural:
        raise PilotSingularError(
            f"pilot design rank {rank} below structural rank {ncols - structural}",
            nullity=ncols - rank,
        )
    resid = fd.y - design @ coef
    rss = float(np.sum(fd.wobs * resid * resid))
    gamma0 = coef[: (ds.q + 1) * j_c].reshape(ds.q + 1, j_c)
    j_a = bases_a[0].dimension if ds.p else 0
    gamma = coef[(ds.q + 1) * j_c :].reshape(ds.p, j_a, j_c) if ds.p else np.zeros((0, 0, j_c))
    return PilotFit(gamma0, gamma, basis_c, bases_a, rss, int(rank), bt.mean(axis=0))


def pilot_beta(fit, ds, k, grid):
    """Centered pilot additive estimator on ``grid``.

    Averages the fitted surface over all observed times (pooled 1/N) and
    subtracts the empirical mean over the observed covariate values so the
    mean-zero identification holds exactly.
    """
    fd = ds.flat()
    coef = fit.gamma[k] @ fit.bbar_c                     # (J_A,)
    bx_obs = basis_design(fit.bases_a[k], fd.x[:, k])
    center = float(np.mean(bx_obs @ coef))
    grid = np.asarray(grid, dtype=np.float64)
    values = basis_design(fit.bases_a[k], grid) @ coef - center
    return PilotAdditive(k, fit.bases_a[k], coef, center, grid, values)


def pilot_trend_coef(fit, ds):
    """b_C-space coefficients of the pilot trend in the centered
    convention.

    The tensor block of each covariate overlaps the intercept block, so
    part of the trend can sit inside the fitted surfaces g_k as a pure
    function of t.  Averaging each surface over the observed covariate
    values recovers that component (the centered additive part averages
    to zero) and returns it to the trend.
    """
    fd = ds.flat()
    coef = fit.gamma0[0].copy()
    for k in range(ds.p):
        bbar_a = basis_design(fit.bases_a[k], fd.x[:, k]).mean(axis=0)
        coef += fit.gamma[k].T @ bbar_a
    return coef


def pilot_alpha_coef(fit, ds, k, beta_p):
    """b_C-space coefficients of a pilot time profile for covariate k.

    Projects the fitted surface onto the centered pilot additive component:
    averaging g_k(t, X) beta(X) over observations isolates alpha_k(t) times
    the empirical second moment of beta.
    """
    fd = ds.flat()
    bx_obs = basis_design(fit.bases_a[k], fd.x[:, k])
    bvals = bx_obs @ (fit.gamma[k] @ fit.bbar_c) - beta_p.centering_constant
    eta = float(np.mean(bvals * bvals))
    if eta <= 0:
        return np.zeros(fit.basis_c.dimension)
    u = (bx_obs * bvals[:, None]).mean(axis=0)           # (J_A,)
    return fit.gamma[k].T @ u / eta


def select_knots_bic(ds, grid_c, grid_a, order=DEFAULT_ORDER):
    """Exhaustive BIC search over interior-knot counts.

    BIC = log(RSS) + #params * log(n)/n with RSS the SUBJ-weighted mean
    residual sum of squares; ties break toward fewer parameters.
    """
    if not len(grid_c) or not len(grid_a):
        raise SelectionError("empty knot grids")
    n = ds.n
    best = None
    for k_c in grid_c:
        for k_a in grid_a:
            j_c, j_a = order + k_c, order + k_a
            nparams = (ds.q + 1) * j_c + ds.p * j_c * j_a
            try:
                pf = fit_pilot(ds, k_c, k_a, order)
            except (PilotSingularError, KnotPlacementError):
                continue
            rss = max(pf.rss / n, 1e-300)
            bic = np.log(rss) + nparams * np.log(n) / n
            key = (bic, nparams)
            if best is None or key < best[0]:
                best = (key, (k_c, k_a))
    if best is None:
        raise SelectionError("all candidate pilot fits failed")
    return best[1]
