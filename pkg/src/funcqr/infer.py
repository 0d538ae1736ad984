"""Prediction targets and bootstrap inference.

Two targets are supported, both linear in the fixed coefficients ``(a, delta)``:

* ``linear_predictor``: ``alpha(t) + int beta(s, t) X(s) ds`` for a typical
  cluster (``u = 0``);
* ``difference``: the same quantity for ``X_A`` minus that for ``X_B``, in
  which ``alpha`` and ``u`` cancel.

Standard deviations come from resampling whole clusters; bias comes from a
model-based scheme that redraws random intercepts and applies wild weights to
absolute residuals while keeping covariates and times fixed. Replicate ``b``
draws from a stream seeded by ``(seed, scheme, b)`` only, so results do not
depend on how replicates are scheduled.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .design import assemble_design, beta_block, functional_scores
from .fdbasis import eval_basis
from .fitter import FitError, penalized_fit

log = logging.getLogger(__name__)

BLOCK_STREAM = 1
WILD_STREAM = 2
MAX_FAIL_FRACTION = 0.2


@dataclass
class TargetSpec:
    kind: str  # linear_predictor | difference
    t_points: np.ndarray
    X: np.ndarray | None = None
    X_A: np.ndarray | None = None
    X_B: np.ndarray | None = None

    def __post_init__(self):
        self.t_points = np.atleast_1d(np.asarray(self.t_points, dtype=float))
        if self.kind == "linear_predictor":
            if self.X is None:
                raise ValueError("linear_predictor target needs a curve X")
            self.X = np.asarray(self.X, dtype=float)
        elif self.kind == "difference":
            if self.X_A is None or self.X_B is None:
                raise ValueError("difference target needs curves X_A and X_B")
            self.X_A = np.asarray(self.X_A, dtype=float)
            self.X_B = np.asarray(self.X_B, dtype=float)
        else:
            raise ValueError(f"unknown target kind {self.kind!r}")

    @classmethod
    def difference(cls, x_a, x_b, t_points):
        return cls("difference", t_points, X_A=x_a, X_B=x_b)

    @classmethod
    def linear_predictor(cls, x, t_points):
        return cls("linear_predictor", t_points, X=x)


@dataclass
class BootstrapSummary:
    t_points: np.ndarray
    estimate: np.ndarray
    bias: np.ndarray
    sd: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    B_bias: int
    B_sd: int
    seed: int
    alpha: float
    model_se: np.ndarray | None = None
    replicates_bias: np.ndarray | None = field(default=None, repr=False)
    replicates_sd: np.ndarray | None = field(default=None, repr=False)

    @property
    def adjusted(self):
        return self.estimate - self.bias


def _check_t(fit, t_points):
    bt = fit.basis_t
    tol = 1e-10 * (bt.hi - bt.lo)
    if t_points.size and (t_points.min() < bt.lo - tol or t_points.max() > bt.hi + tol):
        raise ValueError(f"t points outside the fitted t domain [{bt.lo}, {bt.hi}]")


def _rows(fit, x, t_points):
    """Design rows (alpha block, beta block) for curve ``x`` at ``t_points``."""
    if fit.grid is None:
        raise ValueError("fit has no curve grid attached")
    x = np.asarray(x, dtype=float).reshape(1, -1)
    if x.shape[1] != fit.grid.size:
        raise ValueError(f"curve has {x.shape[1]} points, fit grid has {fit.grid.size}")
    psi = eval_basis(fit.basis_t, t_points)
    xi = np.repeat(functional_scores(x, fit.grid, fit.basis_s), t_points.size, axis=0)
    return psi, beta_block(psi, xi, fit.variant)


def target_weights(fit, target):
    """Matrix ``W`` with ``target(t) = W @ (a, delta)``, one row per t point."""
    t = target.t_points
    _check_t(fit, t)
    if target.kind == "linear_predictor":
        psi, b = _rows(fit, target.X, t)
        return np.hstack([psi, b])
    psi, b_a = _rows(fit, target.X_A, t)
    _, b_b = _rows(fit, target.X_B, t)
    return np.hstack([np.zeros_like(psi), b_a - b_b])


def predict_quantile(fit, x, t_points):
    """Quantile for a typical cluster (``u = 0``) with curve ``x``."""
    t = np.atleast_1d(np.asarray(t_points, dtype=float))
    _check_t(fit, t)
    psi, b = _rows(fit, x, t)
    return psi @ fit.a + b @ fit.delta


def quantile_difference(fit, x_a, x_b, t_points):
    return predict_quantile(fit, x_a, t_points) - predict_quantile(fit, x_b, t_points)


def evaluate_target(fit, target):
    if target.kind == "linear_predictor":
        return predict_quantile(fit, target.X, target.t_points)
    return quantile_difference(fit, target.X_A, target.X_B, target.t_points)


def model_based_se(fit, target):
    w = target_weights(fit, target)
    var = np.einsum("ij,jk,ik->i", w, fit.Vp, w)
    return np.sqrt(np.clip(var, 0.0, None))


def bootstrap_ci(estimate, bias, sd, alpha=0.05):
    """Pointwise ``estimate - bias -/+ z_{1-alpha/2} * sd``."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    q = stats.norm.ppf(1 - alpha / 2)
    centre = np.asarray(estimate, dtype=float) - np.asarray(bias, dtype=float)
    half = q * np.asarray(sd, dtype=float)
    return centre - half, centre + half


def replicate_rng(seed, stream, b):
    return np.random.default_rng(np.random.SeedSequence([int(seed), stream, int(b)]))


def wild_weights(rng, n, tau):
    """``2(1 - tau)`` with probability ``1 - tau``, ``-2 tau`` with probability ``tau``."""
    return np.where(rng.random(n) < tau, -2.0 * tau, 2.0 * (1.0 - tau))


def _column_sd(reps):
    if reps.shape[0] < 2:
        return np.zeros(reps.shape[1])
    sd = np.std(reps, axis=0, ddof=1)
    sd[np.ptp(reps, axis=0) == 0] = 0.0
    return sd


def _run_replicates(job, B, threads):
    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, range(B)))
    else:
        results = [job(b) for b in range(B)]
    ok = [r for r in results if r is not None]
    failed = B - len(ok)
    if failed:
        log.warning("%d of %d bootstrap replicates failed and were dropped", failed, B)
    if failed > MAX_FAIL_FRACTION * B:
        raise FitError(f"{failed} of {B} bootstrap replicates failed")
    return np.array(ok)


def block_bootstrap_sd(dataset, spec, smoothing, target, B=100, seed=0, fit=None, h=None, threads=1):
    """Cluster-resampling standard deviation of the target.

    Smoothing parameters, bandwidth and bases are held at their full-data
    values. Returns ``(sd, replicates)``.
    """
    if B < 2:
        raise ValueError("need at least 2 bootstrap replicates")
    if fit is None:
        design = assemble_design(dataset, spec)
        fit = penalized_fit(design, dataset.y, spec, smoothing, h=h, grid=dataset.grid)
    bases = (fit.basis_t, fit.basis_s)
    h = fit.h if h is None else h
    weights = target_weights(fit, target)
    n_clusters = dataset.n_clusters

    def job(b):
        rng = replicate_rng(seed, BLOCK_STREAM, b)
        picks = rng.integers(0, n_clusters, n_clusters)
        boot = dataset.resample_clusters(picks)
        design = assemble_design(boot, spec, bases=bases)
        init = np.concatenate([fit.a, fit.delta, fit.u[picks]]) if fit.u.size == n_clusters else None
        try:
            refit = penalized_fit(design, boot.y, spec, smoothing, h=h, init=init)
        except (FitError, np.linalg.LinAlgError, ValueError) as exc:
            log.warning("block replicate %d failed: %s", b, exc)
            return None
        if not refit.converged:
            return None
        return weights @ refit.fixed_coef

    reps = _run_replicates(job, B, threads)
    return _column_sd(reps), reps


def wild_bootstrap_bias(dataset, fit, spec, smoothing, target, B=100, seed=0, h=None, threads=1):
    """Bias of the target from intercept resampling plus wild residuals.

    ``fit`` must come from ``dataset``. Returns ``(bias, replicates)`` with
    ``bias = mean(replicates) - estimate``.
    """
    if B < 2:
        raise ValueError("need at least 2 bootstrap replicates")
    design = assemble_design(dataset, spec, bases=(fit.basis_t, fit.basis_s))
    y = dataset.y
    eta0 = fit.linear_predictor(design, include_u=False)
    cidx = design.cluster_index
    resid = np.abs(y - eta0 - fit.u[cidx])
    h = fit.h if h is None else h
    weights = target_weights(fit, target)
    estimate = weights @ fit.fixed_coef
    n_clusters = fit.u.size
    tau = spec.tau

    def job(b):
        rng = replicate_rng(seed, WILD_STREAM, b)
        u_star = fit.u[rng.integers(0, n_clusters, n_clusters)]
        eps_star = wild_weights(rng, y.size, tau) * resid
        y_star = eta0 + eps_star + u_star[cidx]
        try:
            refit = penalized_fit(design, y_star, spec, smoothing, h=h, init=fit.theta)
        except (FitError, np.linalg.LinAlgError, ValueError) as exc:
            log.warning("wild replicate %d failed: %s", b, exc)
            return None
        if not refit.converged:
            return None
        return weights @ refit.fixed_coef

    reps = _run_replicates(job, B, threads)
    return np.mean(reps - estimate, axis=0), reps


def bootstrap_summary(dataset, fit, spec, target, B_bias=100, B_sd=100, alpha=0.05, seed=0, threads=1):
    """Estimate, wild-bootstrap bias, block-bootstrap sd and combined intervals."""
    smoothing = fit.smoothing
    estimate = evaluate_target(fit, target)
    bias, reps_bias = wild_bootstrap_bias(dataset, fit, spec, smoothing, target, B_bias, seed, threads=threads)
    sd, reps_sd = block_bootstrap_sd(dataset, spec, smoothing, target, B_sd, seed, fit=fit, threads=threads)
    lo, hi = bootstrap_ci(estimate, bias, sd, alpha)
    return BootstrapSummary(
        t_points=target.t_points,
        estimate=estimate,
        bias=bias,
        sd=sd,
        ci_lo=lo,
        ci_hi=hi,
        B_bias=B_bias,
        B_sd=B_sd,
        seed=seed,
        alpha=alpha,
        model_se=model_based_se(fit, target),
        replicates_bias=reps_bias,
        replicates_sd=reps_sd,
    )
