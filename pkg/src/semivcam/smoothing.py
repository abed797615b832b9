"""Kernel primitives, local polynomial weights, and density estimation.

All smoothing in the package runs through the Epanechnikov kernel
k(u) = 0.75(1 - u^2) on [-1, 1].  Bandwidths are always on the raw scale
of the smoothing variable.
"""

from dataclasses import dataclass

import numpy as np

from .errors import SingularFitError

#: condition-number estimate above which the symmetric solve falls back to
#: a small ridge; boundary windows with few points make this routine.
COND_LIMIT = 1e12
RIDGE_SCALE = 1e-8


@dataclass(frozen=True)
class KernelSpec:
    family: str = "epanechnikov"
    support_radius: float = 1.0


@dataclass(frozen=True)
class KernelConstants:
    kappa: float    # int k^2
    kappa2: float   # int u^2 k
    kappa4: float   # int u^4 k
    kappa22: float  # int u^2 k^2


@dataclass(frozen=True)
class LocalFitResult:
    coefficients: np.ndarray  # intercept block first
    gram: np.ndarray          # weighted normal-equation matrix
    effective_n: float        # sum of raw kernel values
    ridged: bool = False


def kernel_eval(u):
    """Epanechnikov kernel, elementwise on scalars or arrays."""
    u = np.asarray(u, dtype=np.float64)
    out = np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    return float(out) if out.ndim == 0 else out


def kernel_constants(spec=KernelSpec()):
    """Closed-form moments of the kernel."""
    if spec.family != "epanechnikov":
        raise ValueError(f"unsupported kernel family {spec.family!r}")
    return KernelConstants(
        kappa=3.0 / 5.0,
        kappa2=1.0 / 5.0,
        kappa4=3.0 / 35.0,
        kappa22=3.0 / 35.0,
    )


def boundary_kernel_constants(rho):
    """Local-linear equivalent-kernel variance and bias constants at a
    point whose distance to the nearer support edge is ``rho`` bandwidths.

    For rho >= 1 these are the interior constants (kappa, kappa2); closer
    to the edge the one-sided window inflates the variance constant and
    shifts the bias constant.  Closed forms for the Epanechnikov kernel
    via the truncated moments S_j = int_{-rho}^1 u^j k(u) du and
    Q_j = int_{-rho}^1 u^j k(u)^2 du.
    """
    r = np.clip(np.asarray(rho, dtype=np.float64), 0.0, 1.0)

    def ev(coeffs):
        # integral of the polynomial antiderivative from -r to 1
        tot = np.zeros_like(r)
        one = np.zeros_like(r)
        for power, c in coeffs:
            tot += c * (-r) ** power
            one += c * 1.0 ** power
        return one - tot

    s0 = 0.75 * ev([(1, 1.0), (3, -1.0 / 3.0)])
    s1 = 0.75 * ev([(2, 0.5), (4, -0.25)])
    s2 = 0.75 * ev([(3, 1.0 / 3.0), (5, -0.2)])
    s3 = 0.75 * ev([(4, 0.25), (6, -1.0 / 6.0)])
    q0 = 0.5625 * ev([(1, 1.0), (3, -2.0 / 3.0), (5, 0.2)])
    q1 = 0.5625 * ev([(2, 0.5), (4, -0.5), (6, 1.0 / 6.0)])
    q2 = 0.5625 * ev([(3, 1.0 / 3.0), (5, -0.4), (7, 1.0 / 7.0)])
    det = s0 * s2 - s1 * s1
    var_const = (s2 * s2 * q0 - 2.0 * s1 * s2 * q1 + s1 * s1 * q2) / (det * det)
    bias_const = (s2 * s2 - s1 * s3) / det
    if np.ndim(rho) == 0:
        return float(var_const), float(bias_const)
    return var_const, bias_const


def solve_gram(a, b, cond_limit=COND_LIMIT):
    """Solve the symmetric system a c = b, adding ridge
    RIDGE_SCALE * trace/dim when the condition estimate exceeds the limit.

    Returns (c, ridged).  Raises ``numpy.linalg.LinAlgError`` if even the
    ridged system is singular; callers translate to their own error types.
    """
    a = np.asarray(a, dtype=np.float64)
    ridged = False
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > cond_limit:
        a = a + np.eye(a.shape[0]) * (RIDGE_SCALE * np.trace(a) / a.shape[0])
        ridged = True
    return np.linalg.solve(a, b), ridged


def local_linear_fit(targets, responses, distances, h, weights=None):
    """Weighted local polynomial solve at a single location.

    ``targets`` are the design rows (already including any slope columns
    built from the distances), ``distances`` the signed offsets fed to the
    kernel.  Minimizes sum_r weights_r (y_r - row_r c)^2 k(dist_r/h)/h.
    """
    rows = np.atleast_2d(np.asarray(targets, dtype=np.float64))
    y = np.asarray(responses, dtype=np.float64)
    d = np.asarray(distances, dtype=np.float64)
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    if rows.shape[0] != y.size:
        raise ValueError("row count must equal response count")
    w = np.ones(y.size) if weights is None else np.asarray(weights, dtype=np.float64)

    kv = kernel_eval(d / h)
    kw = kv * w / h
    live = kw > 0
    if live.sum() < rows.shape[1]:
        raise SingularFitError(
            f"only {int(live.sum())} in-window rows for "
            f"{rows.shape[1]} design columns"
        )
    a = (rows * kw[:, None]).T @ rows
    b = (rows * kw[:, None]).T @ y
    try:
        c, ridged = solve_gram(a, b)
    except np.linalg.LinAlgError:
        raise SingularFitError("local normal equations singular") from None
    return LocalFitResult(c, a, float(kv.sum()), ridged)


def kde(points, h, x):
    """Kernel density estimate N^-1 sum k((x - p)/h)/h at scalar or array x."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.size == 0:
        raise ValueError("kde needs at least one point")
    if h <= 0:
        raise ValueError("bandwidth must be positive")
    xs = np.atleast_1d(np.asarray(x, dtype=np.float64))
    u = (xs[:, None] - pts[None, :]) / h
    vals = kernel_eval(u).sum(axis=1) / (pts.size * h)
    return float(vals[0]) if np.isscalar(x) or np.ndim(x) == 0 else vals
