"""Data-generating processes, evaluation metrics, and Monte Carlo studies.

Three balanced designs are provided: the estimation benchmark
(``example1``), a time-invariance alternative family (``dgp1``), and a
linearity alternative family (``dgp2``).  All randomness flows from a
single seed through counter-based stream splitting: replicate r of cell c
uses SeedSequence((seed, c, r)) and each subject draws from its own
spawned child stream, so results are identical under any parallel
schedule.

Study bandwidth/knot policy: each (n, m) cell runs one pilot replication
on which BIC selects the knot counts and leave-one-subject-out CV the
bandwidths; all Q replications then reuse them.  Per-replication CV is
available by flag.
"""

import csv
import math
import multiprocessing
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import estimator, inference, testing
from .dataset import from_arrays, summarize

PILOT_REP_INDEX = 1 << 20
GRID20 = 20

_EX1_WEIGHTS = (0.6, 0.2, 0.2)


@dataclass(frozen=True)
class DgpSpec:
    kind: str            # example1 | dgp1 | dgp2
    n: int
    m: int
    theta: float = 0.0
    seed: object = 0

    def __post_init__(self):
        if self.kind not in ("example1", "dgp1", "dgp2"):
            raise ValueError(f"unknown DGP {self.kind!r}")
        if self.n < 1 or self.m < 1:
            raise ValueError("n and m must be positive")


@dataclass(frozen=True)
class TruthBundle:
    alpha0: tuple    # q+1 callables (trend first)
    alpha: tuple     # p callables
    beta: tuple      # p callables
    gamma: object    # covariance function of the random trajectory
    sigma2: object   # noise variance function

    def mean_rows(self, t, z, x):
        t = np.asarray(t, dtype=np.float64)
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = self.alpha0[0](t)
        for l in range(1, len(self.alpha0)):
            out = out + z[:, l - 1] * self.alpha0[l](t)
        for k in range(len(self.alpha)):
            out = out + self.alpha[k](t) * self.beta[k](x[:, k])
        return out


def _beta_example1(x):
    # E[4.5 sin(0.4 pi X)] = 0: X is symmetric about zero under this design
    return 4.5 * np.sin(0.4 * np.pi * np.asarray(x, dtype=np.float64))


def _truth(kind, theta):
    gamma = lambda t, s: 0.6 + 0.4 * np.cos(2 * np.pi * (np.asarray(t) - np.asarray(s)))
    sigma2 = lambda t: np.ones_like(np.asarray(t, dtype=np.float64))
    if kind == "example1":
        return TruthBundle(
            alpha0=(lambda t: 6.0 * np.asarray(t, dtype=np.float64),
                    lambda t: 2.5 * np.cos(2 * np.pi * np.asarray(t))),
            alpha=(lambda t: 6.0 * np.asarray(t) * (1.0 - np.asarray(t)),),
            beta=(_beta_example1,),
            gamma=gamma, sigma2=sigma2,
        )
    if kind == "dgp1":
        return TruthBundle(
            alpha0=(lambda t: 6.0 + theta * np.asarray(t, dtype=np.float64),
                    lambda t: 2.5 + theta * np.cos(2 * np.pi * np.asarray(t))),
            alpha=(lambda t: 1.0 + theta * np.asarray(t) * (1.0 - np.asarray(t)),),
            beta=(_beta_example1,),
            gamma=gamma, sigma2=sigma2,
        )
    # dgp2: linear-in-x null plus a sine deviation scaled by theta
    return TruthBundle(
        alpha0=(lambda t: 6.0 * np.asarray(t, dtype=np.float64),
                lambda t: 2.5 * np.cos(2 * np.pi * np.asarray(t))),
        alpha=(lambda t: 0.5 * np.pi * np.sin(np.pi * np.asarray(t)),),
        beta=(lambda x: np.asarray(x, dtype=np.float64)
              + 1.5 * theta * np.sin(np.pi * np.asarray(x)),),
        gamma=gamma, sigma2=sigma2,
    )


def generate(spec):
    """Simulate one dataset; returns (dataset, truth bundle).

    Subject i draws from the i-th child stream of SeedSequence(spec.seed).
    """
    truth = _truth(spec.kind, spec.theta)
    u_half = 0.5 if spec.kind == "dgp2" else 0.4
    meas_sd = 1.0 if spec.kind == "dgp2" else 0.2
    ss = np.random.SeedSequence(spec.seed)
    children = ss.spawn(spec.n)
    ids, times, ys, zs, xs = [], [], [], [], []
    w_sd = np.sqrt(_EX1_WEIGHTS)
    for i in range(spec.n):
        rng = np.random.default_rng(children[i])
        t = rng.uniform(0.0, 1.0, spec.m)
        z = rng.integers(0, 2, spec.m).astype(np.float64)
        u_i = rng.uniform(-u_half, u_half)
        x = u_i * (1.0 + t) + rng.normal(0.0, meas_sd, spec.m)
        eta = rng.normal(0.0, 1.0, 3) * w_sd
        nu = (eta[0] + math.sqrt(2.0) * eta[1] * np.sin(2 * np.pi * t)
              + math.sqrt(2.0) * eta[2] * np.cos(2 * np.pi * t))
        eps = rng.normal(0.0, 1.0, spec.m)
        y = truth.mean_rows(t, z[:, None], x[:, None]) + nu + eps
        ids.append(f"s{i + 1}")
        times.append(t)
        ys.append(y)
        zs.append(z[:, None])
        xs.append(x[:, None])
    ds = from_arrays(ids, times, ys, zs, xs)
    return ds, truth


def ise_curve(estimate, truth_fn, grid):
    """Trapezoid integral of the squared error on a grid (orientation-free)."""
    grid = np.asarray(grid, dtype=np.float64)
    vals = np.asarray(estimate(grid) if callable(estimate) else estimate,
                      dtype=np.float64)
    err = (vals - truth_fn(grid)) ** 2
    return float(abs(np.trapezoid(err, grid)))


def mpise_accumulate(estimates, truth, grid20):
    """Mean integrated squared error over replications on a shared grid.

    Returns (mpise, per-replication ISE array).
    """
    ises = np.array([ise_curve(e, truth, grid20) for e in estimates])
    return float(ises.mean()), ises


def ase(fit, truth, ds):
    """SUBJ-weighted squared discrepancy between the fitted and true mean
    structures at the observation points."""
    fd = ds.flat()
    vc = fit.vc_matrix(fd.t)
    a0_true = np.column_stack([f(fd.t) for f in truth.alpha0])
    diff = np.einsum("nj,nj->n", fd.z, a0_true - vc[:, : ds.q + 1])
    for k in range(ds.p):
        diff = diff + truth.alpha[k](fd.t) * truth.beta[k](fd.x[:, k])
        diff = diff - vc[:, ds.q + 1 + k] * fit.additive_curves[k](fd.x[:, k])
    return float(np.sum(fd.wobs * diff * diff))


@dataclass
class SimReport:
    study: str
    rows: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    n_failed: int = 0

    def add(self, **kw):
        self.rows.append(kw)

    def value(self, **match):
        hits = [r for r in self.rows
                if all(r.get(k) == v for k, v in match.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {match}")
        return hits[0]["value"]

    def to_csv(self, path):
        keys = sorted({k for r in self.rows for k in r})
        front = [k for k in ("study", "n", "m", "component", "method",
                             "level", "theta", "value", "mcse") if k in keys]
        keys = front + [k for k in keys if k not in front]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(keys)
            for r in self.rows:
                writer.writerow([_csv_cell(r.get(k, "")) for k in keys])


def _csv_cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _run_tasks(fn, tasks, threads):
    if threads <= 1:
        return [fn(t) for t in tasks]
    ctx = multiprocessing.get_context("fork")
    chunk = max(1, len(tasks) // (threads * 4))
    with ProcessPoolExecutor(max_workers=threads, mp_context=ctx) as ex:
        return list(ex.map(fn, tasks, chunksize=chunk))


def calibrate_cell(kind, n, m, seed, cell_idx=0, cfg=None, theta=0.0):
    """Knots by BIC and bandwidths by CV on one pilot replication."""
    cfg = cfg or estimator.FitConfig()
    ds, _ = generate(DgpSpec(kind, n, m, theta=theta,
                             seed=(seed, cell_idx, PILOT_REP_INDEX)))
    from .splines import select_knots_bic

    grid = list(cfg.bic_grid)
    k_c, k_a = select_knots_bic(ds, grid, grid, cfg.order)
    grid_c, grid_a = estimator.default_cv_grids(ds, cfg)
    h_c, h_a = estimator.cv_bandwidths(ds, grid_c, grid_a, cfg, knots=(k_c, k_a))
    return {"k_c": k_c, "k_a": k_a, "h_c": h_c, "h_a": h_a}


def _component_truths(truth):
    names = ["alpha0", "alpha0_z1", "alpha_x1", "beta_x1"]
    fns = [truth.alpha0[0], truth.alpha0[1], truth.alpha[0], truth.beta[0]]
    return dict(zip(names, fns))


def aligned_truths(truth, ds):
    """True component curves expressed in the sample's identification
    convention.

    The estimator enforces the empirical constraints (mean-one coefficient
    curves, mean-zero additive curves at the observed points), so the
    estimand of replication q is the unique representation of the true mean
    structure satisfying those sample constraints: beta gets centered by
    its sample mean (trend absorbing the compensation) and each pair gets
    rescaled by the sample mean of the coefficient curve.
    """
    fd = ds.flat()
    cs = [float(np.mean(truth.beta[k](fd.x[:, k]))) for k in range(len(truth.beta))]
    ss = [float(np.mean(truth.alpha[k](fd.t))) for k in range(len(truth.alpha))]

    def trend(t, _c=tuple(cs)):
        out = truth.alpha0[0](t)
        for k, ck in enumerate(_c):
            out = out + ck * truth.alpha[k](t)
        return out

    out = {"alpha0": trend}
    for l in range(1, len(truth.alpha0)):
        out[f"alpha0_z{l}"] = truth.alpha0[l]
    for k in range(len(truth.alpha)):
        out[f"alpha_x{k + 1}"] = (
            lambda t, _k=k, _s=ss[k]: truth.alpha[_k](t) / _s
        )
        out[f"beta_x{k + 1}"] = (
            lambda x, _k=k, _s=ss[k], _c=cs[k]: (truth.beta[_k](x) - _c) * _s
        )
    return out


def study_time_grid(values, g=GRID20):
    """Equispaced points strictly inside the observed time range (the exact
    endpoints are boundary points where local linear variance explodes)."""
    lo, hi = float(np.min(values)), float(np.max(values))
    i = np.arange(1, g + 1)
    return lo + (hi - lo) * i / (g + 1.0)


def study_x_grid(values, g=GRID20):
    """Equispaced points spanning the central 99% of the observed covariate
    values; the extreme order statistics of the noise-tailed covariate are
    not stable evaluation points."""
    lo, hi = np.quantile(values, [0.005, 0.995])
    return np.linspace(lo, hi, g)


def _table1_rep(task):
    (seed, cell_idx, rep, n, m, cal, per_rep_cv) = task
    spec = DgpSpec("example1", n, m, seed=(seed, cell_idx, rep))
    ds, truth = generate(spec)
    try:
        if per_rep_cv:
            cfg = estimator.FitConfig(k_c=cal["k_c"], k_a=cal["k_a"])
            f = estimator.fit(ds, cfg)
        else:
            cfg = estimator.FitConfig(h_c=cal["h_c"], h_a=cal["h_a"],
                                      k_c=cal["k_c"], k_a=cal["k_a"])
            f = estimator.fit(ds, cfg)
    except Exception as exc:  # failed replication: counted by the driver
        return ("fail", repr(exc))
    truths = aligned_truths(truth, ds)
    fd = ds.flat()
    tgrid = study_time_grid(fd.t)
    out = {}
    for curve in f.vc_curves:
        out[curve.name] = ise_curve(curve, truths[curve.name], tgrid)
    for k, curve in enumerate(f.additive_curves):
        out[curve.name] = ise_curve(curve, truths[curve.name],
                                    study_x_grid(fd.x[:, k]))
    return ("ok", out)


def table1_study(cells, q_reps, seed=0, threads=1, cfg=None, per_rep_cv=False):
    """MPISE of the four component curves per (n, m) cell."""
    report = SimReport("table1", config={"Q": q_reps, "seed": seed})
    for cell_idx, (n, m) in enumerate(cells):
        cal = calibrate_cell("example1", n, m, seed, cell_idx, cfg)
        report.config[f"cell_{n}x{m}"] = cal
        tasks = [(seed, cell_idx, r, n, m, cal, per_rep_cv)
                 for r in range(q_reps)]
        results = _run_tasks(_table1_rep, tasks, threads)
        oks = [r[1] for r in results if r[0] == "ok"]
        report.n_failed += len(results) - len(oks)
        if len(oks) < 0.95 * q_reps:
            raise RuntimeError(f"cell ({n},{m}): too many failed replications")
        for comp in ("alpha0", "alpha0_z1", "alpha_x1", "beta_x1"):
            vals = np.array([r[comp] for r in oks])
            report.add(study="table1", n=n, m=m, component=comp,
                       value=float(vals.mean()),
                       mcse=float(vals.std(ddof=1) / math.sqrt(vals.size)),
                       sd=float(vals.std(ddof=1)))
    return report


def _coverage_rep(task):
    (seed, cell_idx, rep, n, m, cal, levels, methods) = task
    spec = DgpSpec("example1", n, m, seed=(seed, cell_idx, rep))
    ds, truth = generate(spec)
    try:
        cfg = estimator.FitConfig(h_c=cal["h_c"], h_a=cal["h_a"],
                                  k_c=cal["k_c"], k_a=cal["k_a"])
        f = estimator.fit(ds, cfg)
        s = summarize(ds)
        ne = inference.estimate_nuisance(ds, f)
        truths = aligned_truths(truth, ds)
        out = {}
        fd = ds.flat()
        tgrid = study_time_grid(fd.t)
        xgrid = study_x_grid(fd.x[:, 0])
        for method in methods:
            for level in levels:
                bands = inference.vc_bands(f, ne, s, tgrid, level, method)
                for band in bands:
                    tv = truths[band.name](band.grid)
                    out[(band.name, method, level)] = (
                        float(np.mean((band.lower <= tv) & (tv <= band.upper))),
                        float(np.mean(band.upper - band.lower)),
                    )
                aband = inference.additive_bands(f, ne, s, 0, xgrid, level, method)
                tv = truths[aband.name](aband.grid)
                out[(aband.name, method, level)] = (
                    float(np.mean((aband.lower <= tv) & (tv <= aband.upper))),
                    float(np.mean(aband.upper - aband.lower)),
                )
        return ("ok", out)
    except Exception as exc:
        return ("fail", repr(exc))


def coverage_study(cells, q_reps, levels=(0.90, 0.95), methods=("unified",),
                   seed=0, threads=1, cfg=None):
    """Average empirical coverage percentage and band length per component,
    method, and level."""
    report = SimReport("coverage", config={
        "Q": q_reps, "seed": seed, "levels": list(levels),
        "methods": list(methods),
    })
    for cell_idx, (n, m) in enumerate(cells):
        cal = calibrate_cell("example1", n, m, seed, cell_idx, cfg)
        report.config[f"cell_{n}x{m}"] = cal
        tasks = [(seed, cell_idx, r, n, m, cal, tuple(levels), tuple(methods))
                 for r in range(q_reps)]
        results = _run_tasks(_coverage_rep, tasks, threads)
        oks = [r[1] for r in results if r[0] == "ok"]
        nfail = len(results) - len(oks)
        report.n_failed += nfail
        if nfail > 0.05 * len(results):
            raise RuntimeError(f"cell ({n},{m}): {nfail} failed replications")
        for key in oks[0]:
            comp, method, level = key
            cov = np.array([r[key][0] for r in oks])
            wid = np.array([r[key][1] for r in oks])
            report.add(study="coverage", n=n, m=m, component=comp,
                       method=method, level=level,
                       value=float(100.0 * cov.mean()),
                       mcse=float(100.0 * cov.std(ddof=1) / math.sqrt(cov.size)),
                       ael=float(wid.mean()))
    return report


def _power_rep(task):
    (seed, cell_idx, rep, n, m, kind, theta, cal, b_boot, levels) = task
    spec = DgpSpec(kind, n, m, theta=theta, seed=(seed, cell_idx, rep))
    ds, _ = generate(spec)
    which = "time_varying" if kind == "dgp1" else "linearity"
    try:
        fit_result = None
        if which == "time_varying":
            cfg = estimator.FitConfig(h_c=cal["h_c"], h_a=cal["h_a"],
                                      k_c=cal["k_c"], k_a=cal["k_a"])
            fit_result = estimator.fit(ds, cfg)
        res = testing.bootstrap_test(
            ds, which, h_c=cal["h_c"], h_a=cal["h_a"], B=b_boot,
            seed=(seed, cell_idx, rep, 7), fit_result=fit_result,
        )
        return ("ok", {lv: res.p_bootstrap <= lv for lv in levels})
    except Exception as exc:
        return ("fail", repr(exc))


def power_study(kind, cells, thetas, q_reps, b_boot, levels=(0.05, 0.10),
                seed=0, threads=1, cfg=None):
    """Bootstrap rejection rates per (cell, theta, level)."""
    if kind not in ("dgp1", "dgp2"):
        raise ValueError("power studies use dgp1 or dgp2")
    report = SimReport("power", config={
        "Q": q_reps, "B": b_boot, "seed": seed, "dgp": kind,
        "levels": list(levels),
    })
    for cell_idx, (n, m) in enumerate(cells):
        cal = calibrate_cell(kind, n, m, seed, cell_idx, cfg)
        report.config[f"cell_{n}x{m}"] = cal
        for theta in thetas:
            tasks = [(seed, cell_idx, r, n, m, kind, float(theta), cal,
                      b_boot, tuple(levels)) for r in range(q_reps)]
            results = _run_tasks(_power_rep, tasks, threads)
            oks = [r[1] for r in results if r[0] == "ok"]
            nfail = len(results) - len(oks)
            report.n_failed += nfail
            if nfail > 0.05 * len(results):
                raise RuntimeError(
                    f"cell ({n},{m}) theta={theta}: {nfail} failures"
                )
            for lv in levels:
                rej = np.array([r[lv] for r in oks], dtype=np.float64)
                p = float(rej.mean())
                report.add(study="power", n=n, m=m, dgp=kind,
                           theta=float(theta), level=lv, value=p,
                           mcse=float(math.sqrt(max(p * (1 - p), 1e-12)
                                                / rej.size)))
    return report
