"""Penalized smoothed quantile regression with random intercepts.

The objective over ``theta = (a, delta, u)`` is

    F = sum_r rho_h(y_r - eta_r)
        + lambda_alpha a'P_t a + lambda_beta_s delta'P_s delta
        + lambda_beta_t delta'P_t delta + lambda_u |u|^2

and is minimized by Newton's method with step halving. The random-intercept
block of the Hessian is diagonal, so each Newton step eliminates ``u`` through
a Schur complement and only factors a matrix the size of ``(a, delta)``.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, sparse
from scipy.linalg import blas

from .design import assemble_design, model_bases
from .fdbasis import basis_penalty, tensor_penalties
from .qloss import (
    SmoothLossParams,
    check_loss,
    default_bandwidth,
    smooth_loss,
    smooth_loss_grad,
    smooth_loss_hess,
    sparsity,
)

log = logging.getLogger(__name__)

DEFAULT_GRID = tuple(np.logspace(-4, 4, 7))
MAX_HALVINGS = 60
CONTINUATION = (64.0, 16.0, 4.0)
WARM_ITER = 40
CV_REL_TOL = 1e-7


class FitError(RuntimeError):
    """Numerical failure that no choice of iteration budget would fix."""


@dataclass(frozen=True)
class SmoothingParams:
    lambda_alpha: float = 1.0
    lambda_beta_s: float = 1.0
    lambda_beta_t: float = 1.0
    lambda_u: float = 1.0

    def __post_init__(self):
        for name, v in self.as_dict().items():
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")

    def as_dict(self):
        return {
            "lambda_alpha": float(self.lambda_alpha),
            "lambda_beta_s": float(self.lambda_beta_s),
            "lambda_beta_t": float(self.lambda_beta_t),
            "lambda_u": float(self.lambda_u),
        }

    def scaled(self, factor):
        """Multiply the smooth-term penalties (not ``lambda_u``) by ``factor``."""
        return replace(
            self,
            lambda_alpha=self.lambda_alpha * factor,
            lambda_beta_s=self.lambda_beta_s * factor,
            lambda_beta_t=self.lambda_beta_t * factor,
        )


@dataclass
class FitResult:
    a: np.ndarray
    delta: np.ndarray
    u: np.ndarray
    smoothing: SmoothingParams
    h: float
    Vp: np.ndarray
    edf_ab: float
    edf_u: float
    loglik: float
    aic: float
    converged: bool
    iterations: int
    tau: float
    variant: str
    basis_t: object
    basis_s: object
    grid: np.ndarray
    penalty_order: int = 2
    objective: float = float("nan")
    scale: float = float("nan")
    cluster_ids: list = field(default_factory=list)
    objective_path: list = field(default_factory=list, repr=False)

    @property
    def theta(self):
        return np.concatenate([self.a, self.delta, self.u])

    @property
    def fixed_coef(self):
        return np.concatenate([self.a, self.delta])

    def linear_predictor(self, design, include_u=True):
        eta = design.A @ self.a + design.B @ self.delta
        if include_u:
            eta = eta + self.u[design.cluster_index]
        return eta


def penalty_blocks(design, order):
    """``(P_alpha, P_beta_s, P_beta_t)`` for the variant of ``design``."""
    p_alpha = basis_penalty(design.basis_t, order).matrix
    p = design.n_beta
    zero = np.zeros((p, p))
    if design.variant == "surface":
        ps, pt = tensor_penalties(design.basis_s, design.basis_t, order)
        return p_alpha, ps.matrix, pt.matrix
    if design.variant == "s_only":
        return p_alpha, basis_penalty(design.basis_s, order).matrix, zero
    if design.variant == "t_only":
        return p_alpha, zero, basis_penalty(design.basis_t, order).matrix
    return p_alpha, zero, zero


def _fixed_penalty(design, smoothing, order):
    p_alpha, ps, pt = penalty_blocks(design, order)
    q = design.n_alpha + design.n_beta
    s = np.zeros((q, q))
    la = design.n_alpha
    s[:la, :la] = smoothing.lambda_alpha * p_alpha
    s[la:, la:] = smoothing.lambda_beta_s * ps + smoothing.lambda_beta_t * pt
    return s


def penalty_eigen(design, smoothing, order):
    """Eigenvalues (clipped at 0) and eigenvectors of the fixed-effect penalty."""
    S = _fixed_penalty(design, smoothing, order)
    s_vals, V = np.linalg.eigh((S + S.T) / 2)
    return np.clip(s_vals, 0.0, None), V


class _Problem:
    """Objective, gradient and Newton step for one design and penalty.

    Fixed coefficients are handled in the eigenbasis of their penalty,
    ``b = V c``, where the penalty is diagonal. Newton systems are then
    Jacobi-scaled, which keeps very large smoothing parameters (1e12 and up)
    from destroying the accuracy of the soft, unpenalized directions.
    """

    def __init__(self, design, y, smoothing, params, order, eigen=None):
        if eigen is None:
            eigen = penalty_eigen(design, smoothing, order)
        self.s, V = eigen
        self.V = V
        self.F = design.fixed @ V
        self.c = design.cluster_index
        self.n_u = design.Z.shape[1]
        # cluster sums as a sparse (N, n) indicator
        self.Zt = sparse.csr_matrix(
            (np.ones(self.c.size), (self.c, np.arange(self.c.size))), shape=(self.n_u, self.c.size)
        )
        self.n_u = design.Z.shape[1]
        self.y = np.asarray(y, dtype=float)
        self.lam_u = smoothing.lambda_u
        self.params = params

    # theta here is (c, u); to_coef / from_coef convert to (b, u)
    def from_coef(self, theta):
        q = self.F.shape[1]
        return np.concatenate([self.V.T @ theta[:q], theta[q:]])

    def to_coef(self, theta):
        q = self.F.shape[1]
        return np.concatenate([self.V @ theta[:q], theta[q:]])

    def eta(self, theta):
        q = self.F.shape[1]
        return self.F @ theta[:q] + theta[q:][self.c]

    def objective(self, theta):
        q = self.F.shape[1]
        c, u = theta[:q], theta[q:]
        r = self.y - self.eta(theta)
        return float(np.sum(smooth_loss(r, self.params)) + self.s @ (c * c) + self.lam_u * (u @ u))

    def gradient(self, theta):
        q = self.F.shape[1]
        c, u = theta[:q], theta[q:]
        g1 = smooth_loss_grad(self.y - self.eta(theta), self.params)
        gc = -self.F.T @ g1 + 2 * self.s * c
        gu = -np.bincount(self.c, weights=g1, minlength=self.n_u) + 2 * self.lam_u * u
        return np.concatenate([gc, gu])

    def coef_gradient(self, grad):
        """Gradient with respect to the original ``(b, u)`` coordinates."""
        q = self.F.shape[1]
        return np.concatenate([self.V @ grad[:q], grad[q:]])

    def hessian_parts(self, theta):
        w = smooth_loss_hess(self.y - self.eta(theta), self.params)
        fw = self.F * w[:, None]
        h_cc = _gram(self.F, w)
        h_cu = np.asarray((self.Zt @ fw).T)
        h_uu = np.bincount(self.c, weights=w, minlength=self.n_u)
        return h_cc, h_cu, h_uu

    def covariance_parts(self, theta):
        """Fixed block of the inverse penalized Hessian and per-coefficient EDF.

        The penalty is diagonal in ``(c, u)``, so the influence matrix
        ``H_pen^-1 H_unpen`` has diagonal ``1 - diag(H_pen^-1) * 2 * penalty``.
        """
        h_cc, h_cu, h_uu = self.hessian_parts(theta)
        q = h_cc.shape[0]
        d = h_uu + 2 * self.lam_u
        d = np.maximum(d, 1e-12 * max(1.0, float(d.max(initial=0.0))))
        schur = h_cc - (h_cu / d) @ h_cu.T
        schur[np.arange(q), np.arange(q)] += 2 * self.s
        inv_cc = _scaled_inverse(schur)
        m = h_cu / d  # (q, N)
        inv_uu_diag = 1.0 / d + np.einsum("ji,jk,ki->i", m, inv_cc, m)
        infl_c = 1.0 - np.diag(inv_cc) * 2 * self.s
        infl_u = 1.0 - inv_uu_diag * 2 * self.lam_u
        return inv_cc, infl_c, infl_u

    def newton_step(self, theta, grad):
        h_cc, h_cu, h_uu = self.hessian_parts(theta)
        q = h_cc.shape[0]
        g_c, g_u = grad[:q], grad[q:]
        d = h_uu + 2 * self.lam_u
        d = np.maximum(d, 1e-12 * max(1.0, float(d.max(initial=0.0))))
        schur = h_cc - (h_cu / d) @ h_cu.T
        schur[np.arange(q), np.arange(q)] += 2 * self.s
        rhs = -g_c + h_cu @ (g_u / d)
        step_c = _solve_psd(schur, rhs)
        step_u = (-g_u - h_cu.T @ step_c) / d
        return np.concatenate([step_c, step_u])


def _gram(x, w):
    """``x' diag(w) x`` through a symmetric rank-k update."""
    xs = x * np.sqrt(w)[:, None]
    g = blas.dsyrk(1.0, xs, trans=1, lower=0)
    return np.triu(g) + np.triu(g, 1).T


def _solve_psd(m, rhs):
    m = (m + m.T) / 2
    scale = 1.0 / np.sqrt(np.maximum(np.diag(m), 1e-300))
    ms = m * scale[:, None] * scale[None, :]
    try:
        x = linalg.cho_solve(linalg.cho_factor(ms, check_finite=False), rhs * scale, check_finite=False)
    except linalg.LinAlgError:
        x = np.linalg.lstsq(ms, rhs * scale, rcond=None)[0]
    return x * scale


def _scaled_inverse(m):
    m = (m + m.T) / 2
    scale = 1.0 / np.sqrt(np.maximum(np.diag(m), 1e-300))
    return linalg.pinvh(m * scale[:, None] * scale[None, :]) * scale[:, None] * scale[None, :]


def _check_identifiable(design, smoothing):
    if any(v > 0 for v in smoothing.as_dict().values()):
        return
    x = np.hstack([design.fixed, design.Z])
    if np.linalg.matrix_rank(x) < x.shape[1]:
        raise FitError(
            "design is rank deficient and every smoothing parameter is zero; "
            "use nonzero penalties (e.g. lambda_u > 0)"
        )


def _initial_theta(design, y):
    a = np.linalg.lstsq(design.A, y, rcond=None)[0]
    return np.concatenate([a, np.zeros(design.n_beta), np.zeros(design.Z.shape[1])])


def _small(problem, grad, f):
    return np.max(np.abs(problem.coef_gradient(grad))) < 1e-6 * (1 + abs(f))


def _newton(problem, theta, max_iter, rel_tol=1e-9, check_grad=True):
    f = problem.objective(theta)
    path = [f]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        grad = problem.gradient(theta)
        step = problem.newton_step(theta, grad)
        t = 1.0
        for _ in range(MAX_HALVINGS):
            cand = theta + t * step
            f_new = problem.objective(cand)
            if f_new <= f:
                break
            t /= 2
        else:
            # no decrease representable along the Newton direction
            converged = _small(problem, grad, f)
            break
        rel = abs(f - f_new) / max(abs(f), 1e-300)
        theta, f = cand, f_new
        path.append(f)
        if rel < rel_tol:
            if not check_grad or _small(problem, problem.gradient(theta), f):
                converged = True
                break
    return theta, f, converged, it, path


def fit_scale(resid, tau, params=None):
    """Scale ``tau (1 - tau) / f(0)`` of the residual density at zero.

    With this scale the asymmetric Laplace log-likelihood ratio of nested
    fits is the usual quantile-regression rank statistic, and
    ``scale * H^-1`` is the iid sandwich covariance. Falls back to the mean
    loss when the sparsity cannot be estimated.
    """
    s = sparsity(resid, tau)
    if np.isfinite(s):
        return max(tau * (1 - tau) * s, 1e-300)
    fallback = np.mean(smooth_loss(resid, params)) if params is not None else np.mean(check_loss(resid, tau))
    return max(float(fallback), 1e-300)


def penalized_fit(
    design,
    y,
    spec,
    smoothing,
    h=None,
    init=None,
    max_iter=200,
    cluster_ids=None,
    grid=None,
    covariance=True,
    rel_tol=1e-9,
    eigen=None,
):
    """Fit the penalized model on a prepared design.

    ``h`` defaults to :func:`qloss.default_bandwidth` on ``y``. ``init`` is an
    optional starting ``theta``; the objective is strictly convex so the
    optimum does not depend on it.
    """
    y = np.asarray(y, dtype=float)
    if grid is None:
        grid = design.grid
    if y.shape != (design.A.shape[0],):
        raise ValueError(f"y has shape {y.shape}, design has {design.A.shape[0]} rows")
    if h is None:
        h = default_bandwidth(y)
    params = SmoothLossParams(spec.tau, float(h))
    _check_identifiable(design, smoothing)
    problem = _Problem(design, y, smoothing, params, spec.penalty_order, eigen=eigen)
    start = _initial_theta(design, y) if init is None else np.array(init, dtype=float)
    theta = problem.from_coef(start)
    iterations = 0

    def continuation(theta):
        # wide, well-conditioned bandwidths first
        nonlocal iterations
        for factor in CONTINUATION:
            problem.params = SmoothLossParams(spec.tau, float(h) * factor)
            theta, _, _, it, _ = _newton(problem, theta, max_iter, rel_tol=1e-6, check_grad=False)
            iterations += it
        problem.params = params
        return theta

    if init is None:
        theta = continuation(theta)
    else:
        # a warm start far from the optimum can crawl when h is small
        theta, f, converged, it, path = _newton(problem, theta, min(WARM_ITER, max_iter), rel_tol=rel_tol)
        iterations += it
        if not converged:
            theta = continuation(theta)
    if init is None or not converged:
        theta, f, converged, it, path2 = _newton(problem, theta, max_iter, rel_tol=rel_tol)
        path = path2
        iterations += it
    if not converged:
        log.warning("penalized_fit did not converge in %d iterations", iterations)

    la, q = design.n_alpha, design.n_alpha + design.n_beta
    coef = problem.to_coef(theta)
    a, delta, u = coef[:la].copy(), coef[la:q].copy(), coef[q:].copy()
    # B-splines sum to one, so shifting every a_l by mean(u) shifts alpha(t) exactly
    if u.size:
        shift = u.mean()
        u -= shift
        a += shift
        theta = problem.from_coef(np.concatenate([a, delta, u]))

    if covariance:
        inv_cc, infl_c, infl_u = problem.covariance_parts(theta)
        edf_ab = float(np.clip(infl_c.sum(), 0.0, q))
        edf_u = float(np.clip(infl_u.sum(), 0.0, u.size))
    else:
        inv_cc = np.full((q, q), np.nan)
        edf_ab = edf_u = float("nan")
    resid = y - problem.eta(theta)
    n = y.size
    scale = fit_scale(resid, spec.tau, params)
    # asymmetric Laplace density at the calibrated scale
    loglik = n * math.log(spec.tau * (1 - spec.tau) / scale) - float(np.sum(check_loss(resid, spec.tau))) / scale
    vp = scale * (problem.V @ inv_cc @ problem.V.T)
    vp = (vp + vp.T) / 2
    return FitResult(
        a=a,
        delta=delta,
        u=u,
        smoothing=smoothing,
        h=float(h),
        Vp=vp,
        edf_ab=edf_ab,
        edf_u=edf_u,
        loglik=float(loglik),
        aic=float(-2 * loglik + 2 * (edf_ab + edf_u)),
        converged=bool(converged),
        iterations=iterations,
        tau=spec.tau,
        variant=spec.variant,
        basis_t=design.basis_t,
        basis_s=design.basis_s,
        grid=None if grid is None else np.asarray(grid, dtype=float),
        penalty_order=spec.penalty_order,
        objective=problem.objective(theta),
        scale=scale,
        cluster_ids=list(cluster_ids) if cluster_ids is not None else [],
        objective_path=path,
    )


def fit_dataset(dataset, spec, smoothing, h=None, bases=None, **kwargs):
    """Assemble the design for ``dataset`` and fit it."""
    design = assemble_design(dataset, spec, bases=bases)
    y = dataset.y
    fit = penalized_fit(
        design,
        y,
        spec,
        smoothing,
        h=h,
        cluster_ids=[c.cluster_id for c in dataset.clusters],
        grid=dataset.grid,
        **kwargs,
    )
    return fit, design


def objective_gradient(design, y, spec, smoothing, h, theta):
    """Gradient of the penalized objective at ``theta`` (for diagnostics)."""
    problem = _Problem(design, y, smoothing, SmoothLossParams(spec.tau, h), spec.penalty_order)
    theta = problem.from_coef(np.asarray(theta, dtype=float))
    return problem.coef_gradient(problem.gradient(theta))


# -- smoothing selection -----------------------------------------------------


def candidate_grid(variant, grid=None):
    """Every SmoothingParams combination searched for ``variant``.

    ``grid`` maps ``lambda_u``, ``lambda_beta_s`` and either ``lambda_t``
    (shared by ``lambda_alpha`` and ``lambda_beta_t``) or both
    ``lambda_alpha`` and ``lambda_beta_t`` to value lists. Penalties that do
    not act on ``variant`` are pinned to their largest grid value.
    """
    grid = dict(grid or {})
    lam_u = list(grid.get("lambda_u", DEFAULT_GRID))
    lam_s = list(grid.get("lambda_beta_s", DEFAULT_GRID))
    if variant not in ("surface", "s_only"):
        lam_s = [max(lam_s)]
    if "lambda_alpha" in grid or "lambda_beta_t" in grid:
        lam_a = list(grid.get("lambda_alpha", DEFAULT_GRID))
        lam_bt = list(grid.get("lambda_beta_t", DEFAULT_GRID))
        if variant not in ("surface", "t_only"):
            lam_bt = [max(lam_bt)]
        pairs = [(la, lb) for lb in lam_bt for la in lam_a]
    else:
        shared = list(grid.get("lambda_t", DEFAULT_GRID))
        pairs = [(v, v) for v in shared]
    return [
        SmoothingParams(lambda_alpha=la, lambda_beta_s=ls, lambda_beta_t=lb, lambda_u=lu)
        for lu in lam_u
        for ls in lam_s
        for la, lb in pairs
    ]


def _subset_design(design, rows, clusters):
    keep = np.zeros(design.Z.shape[1], dtype=bool)
    keep[clusters] = True
    remap = -np.ones(design.Z.shape[1], dtype=int)
    remap[clusters] = np.arange(len(clusters))
    return replace(
        design,
        A=design.A[rows],
        Xi=design.Xi[rows],
        B=design.B[rows],
        Z=design.Z[np.ix_(rows, keep)],
        row_index=[design.row_index[r] for r in rows],
        cluster_index=remap[design.cluster_index[rows]],
    )


def fold_assignment(n_clusters, folds, seed=0):
    order = np.random.default_rng(np.random.SeedSequence([seed, 7919])).permutation(n_clusters)
    assign = np.empty(n_clusters, dtype=int)
    assign[order] = np.arange(n_clusters) % folds
    return assign


def _snake_order(candidates):
    """Visit order in which consecutive candidates differ in one grid step.

    Warm starts then always begin next to the new optimum.
    """
    keys = [(c.lambda_u, c.lambda_beta_s, c.lambda_beta_t, c.lambda_alpha) for c in candidates]
    levels = [sorted(set(k[d] for k in keys)) for d in range(4)]
    idx = [tuple(levels[d].index(k[d]) for d in range(4)) for k in keys]

    def sort_key(i):
        pos, flip = [], False
        for d in range(4):
            v = idx[i][d]
            v = len(levels[d]) - 1 - v if flip else v
            pos.append(v)
            flip = flip ^ (v % 2 == 1)
        return pos

    return sorted(range(len(candidates)), key=sort_key)


def _fold_losses(design, y, spec, candidates, eigens, h, fold, assign):
    test_clusters = np.flatnonzero(assign == fold)
    train_clusters = np.flatnonzero(assign != fold)
    test_rows = np.isin(design.cluster_index, test_clusters)
    train = _subset_design(design, np.flatnonzero(~test_rows), train_clusters)
    y_train, y_test = y[~test_rows], y[test_rows]
    a_test, b_test = design.A[test_rows], design.B[test_rows]
    losses = np.empty(len(candidates))
    theta = None
    for k in _snake_order(candidates):
        fit = penalized_fit(
            train, y_train, spec, candidates[k], h=h, init=theta,
            covariance=False, rel_tol=CV_REL_TOL, eigen=eigens[k],
        )
        theta = fit.theta
        pred = a_test @ fit.a + b_test @ fit.delta
        losses[k] = np.sum(check_loss(y_test - pred, spec.tau))
    return losses


def select_smoothing(design, y, spec, grid=None, folds=5, h=None, seed=0, threads=1, return_scores=False):
    """Cluster-blocked K-fold cross-validation of the smoothing parameters.

    Held-out clusters are predicted with ``u = 0`` and scored by the raw check
    loss. Ties go to the larger penalties, compared in the order
    ``(lambda_u, lambda_beta_s, lambda_beta_t, lambda_alpha)``.
    """
    y = np.asarray(y, dtype=float)
    n_clusters = design.Z.shape[1]
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if n_clusters < folds:
        raise ValueError(f"{n_clusters} clusters cannot be split into {folds} folds")
    candidates = candidate_grid(spec.variant, grid)
    if len(candidates) == 1:
        return (candidates[0], np.zeros(1)) if return_scores else candidates[0]
    if h is None:
        h = default_bandwidth(y)
    assign = fold_assignment(n_clusters, folds, seed)

    eigens = [penalty_eigen(design, sm, spec.penalty_order) for sm in candidates]

    def run(fold):
        return _fold_losses(design, y, spec, candidates, eigens, h, fold, assign)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_fold = list(pool.map(run, range(folds)))
    else:
        per_fold = [run(f) for f in range(folds)]
    scores = np.sum(per_fold, axis=0) / y.size
    best = scores.min()
    tol = 1e-12 * max(abs(best), 1e-300)
    tied = [k for k in range(len(candidates)) if scores[k] <= best + tol]
    pick = max(
        tied,
        key=lambda k: (
            candidates[k].lambda_u,
            candidates[k].lambda_beta_s,
            candidates[k].lambda_beta_t,
            candidates[k].lambda_alpha,
        ),
    )
    return (candidates[pick], scores) if return_scores else candidates[pick]


# -- model comparison ---------------------------------------------------------


def compare_models(dataset, specs, grid=None, folds=5, h=None, seed=0, threads=1):
    """Fit each spec with its own selected smoothing; flag the minimum AIC.

    Held-out clusters carry no information about their own intercepts, so
    cross-validation barely constrains ``lambda_u``. Left free, it lands on
    different values per variant and the AIC gaps then mostly reflect edf_u.
    ``lambda_u`` is therefore selected once, on the spec with the most fixed
    coefficients, and held there while the other penalties are selected per
    spec. For the same reason every row's log-likelihood and AIC use the
    residual scale of that reference fit (as Mallows' Cp uses the largest
    model's variance), so AIC differences are loss differences in common
    units.

    Returns one dict per spec, in the given order. A failing spec is reported
    with ``status="failed"`` and does not stop the comparison.
    """
    taus = {s.tau for s in specs}
    if len(taus) > 1:
        raise ValueError("all specs must share the same tau")
    y = dataset.y
    if h is None:
        h = default_bandwidth(y)
    rows = [None] * len(specs)
    designs = [None] * len(specs)
    for k, spec in enumerate(specs):
        try:
            designs[k] = assemble_design(dataset, spec)
        except ValueError as exc:
            rows[k] = _failed_row(spec, exc)
    ok = [k for k in range(len(specs)) if designs[k] is not None]
    order = sorted(ok, key=lambda k: (-(designs[k].n_alpha + designs[k].n_beta), k))
    grid = dict(grid or {})
    shared_u = ref_scale = None
    for k in order:
        spec, design = specs[k], designs[k]
        row = {"variant": spec.variant, "tau": spec.tau, "status": "ok"}
        g = grid if shared_u is None else {**grid, "lambda_u": [shared_u]}
        try:
            sm = select_smoothing(design, y, spec, grid=g, folds=folds, h=h, seed=seed, threads=threads)
            fit = penalized_fit(design, y, spec, sm, h=h)
        except (FitError, ValueError, np.linalg.LinAlgError) as exc:
            rows[k] = _failed_row(spec, exc)
            continue
        if shared_u is None:
            shared_u, ref_scale = sm.lambda_u, fit.scale
        loss = float(np.sum(check_loss(y - fit.linear_predictor(design), spec.tau)))
        loglik = y.size * math.log(spec.tau * (1 - spec.tau) / ref_scale) - loss / ref_scale
        row.update(
            aic=-2 * loglik + 2 * (fit.edf_ab + fit.edf_u),
            loglik=loglik,
            scale=ref_scale,
            edf_ab=fit.edf_ab,
            edf_u=fit.edf_u,
            converged=fit.converged,
            **sm.as_dict(),
        )
        rows[k] = row
    good = [r["aic"] for r in rows if r["status"] == "ok"]
    best = min(good) if good else None
    for r in rows:
        r["min_aic"] = r["status"] == "ok" and r["aic"] == best
    return rows


def _failed_row(spec, exc):
    log.warning("fit of variant %s failed: %s", spec.variant, exc)
    return {"variant": spec.variant, "tau": spec.tau, "status": "failed", "error": str(exc), "aic": float("nan")}


def fit_with_selection(dataset, spec, grid=None, folds=5, h=None, seed=0, threads=1):
    design = assemble_design(dataset, spec)
    y = dataset.y
    if h is None:
        h = default_bandwidth(y)
    sm = select_smoothing(design, y, spec, grid=grid, folds=folds, h=h, seed=seed, threads=threads)
    fit, design = fit_dataset(dataset, spec, sm, h=h, bases=(design.basis_t, design.basis_s))
    return fit, design


__all__ = [
    "FitError",
    "FitResult",
    "SmoothingParams",
    "candidate_grid",
    "compare_models",
    "fit_dataset",
    "fit_scale",
    "fit_with_selection",
    "model_bases",
    "penalized_fit",
    "penalty_blocks",
    "select_smoothing",
]
