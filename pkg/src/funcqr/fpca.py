"""FPCA pre-smoothing of noisy curves observed on a common dense grid.

Covariance is estimated empirically from pairwise-complete products of the
demeaned curves. Measurement noise shows up as an excess on the diagonal; it is
estimated by extrapolating each diagonal element from its off-diagonal
neighbours and subtracted before the eigendecomposition. All integrals use the
trapezoid rule on the observed grid.
"""

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class FunctionalSample:
    grid: np.ndarray
    values: np.ndarray  # (n_obs, H); NaN marks a missing value
    obs_ids: list | None = None

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if self.grid.ndim != 1 or self.grid.size < 2:
            raise ValueError("grid needs at least two points")
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if self.values.shape[1] != self.grid.size:
            raise ValueError(
                f"values have {self.values.shape[1]} columns, grid has {self.grid.size} points"
            )
        if self.obs_ids is None:
            self.obs_ids = list(range(self.values.shape[0]))
        if len(self.obs_ids) != self.values.shape[0]:
            raise ValueError("one obs_id per row is required")
        need = max(4, int(np.ceil(0.1 * self.grid.size)))
        need = min(need, self.grid.size)
        counts = np.sum(np.isfinite(self.values), axis=1)
        bad = np.flatnonzero(counts < need)
        if bad.size:
            raise ValueError(
                f"curve {self.obs_ids[bad[0]]!r} has {counts[bad[0]]} observed values; "
                f"at least {need} are required"
            )


@dataclass
class FpcaResult:
    grid: np.ndarray
    weights: np.ndarray  # trapezoid quadrature weights on the grid
    mean: np.ndarray
    eigenfunctions: np.ndarray  # (H, n_comp), orthonormal under `weights`
    eigenvalues: np.ndarray
    noise_variance: float
    scores: np.ndarray
    smoothed: np.ndarray
    pve_achieved: float

    @property
    def n_components(self):
        return self.eigenfunctions.shape[1]


def trapezoid_weights(grid):
    grid = np.asarray(grid, dtype=float)
    w = np.zeros(grid.size)
    dx = np.diff(grid)
    w[:-1] += dx / 2
    w[1:] += dx / 2
    return w


def _pairwise_covariance(resid):
    mask = np.isfinite(resid)
    r0 = np.where(mask, resid, 0.0)
    m = mask.astype(float)
    counts = m.T @ m
    if np.any(counts == 0):
        raise ValueError("some pair of grid points is never observed together")
    return (r0.T @ r0) / counts


def _extrapolated_diagonal(cov, grid, max_lag=3):
    """Diagonal of the noise-free covariance, by local quadratic extrapolation.

    For each grid point the covariance along the anti-diagonal direction is
    fitted as ``c0 + c1*d + c2*d^2`` in the signed offset ``d`` from
    off-diagonal neighbours; ``c0`` estimates the smooth diagonal value.
    """
    n = grid.size
    out = np.full(n, np.nan)
    for i in range(n):
        lags = [k for k in range(-max_lag, max_lag + 1) if k and 0 <= i + k < n]
        if len(lags) < 3:
            continue
        d = grid[[i + k for k in lags]] - grid[i]
        design = np.column_stack([np.ones(d.size), d, d**2])
        target = cov[i, [i + k for k in lags]]
        coef = np.linalg.lstsq(design, target, rcond=None)[0]
        out[i] = coef[0]
    return out


def estimate_noise_variance(cov, grid):
    if grid.size < 4:
        return 0.0
    smooth = _extrapolated_diagonal(cov, grid)
    ok = np.isfinite(smooth)
    if not ok.any():
        return 0.0
    return max(float(np.mean(np.diag(cov)[ok] - smooth[ok])), 0.0)


def _scores(resid, phi, eigenvalues, weights, noise_variance):
    """Quadrature projection; conditional expectation for rows with gaps."""
    n_comp = phi.shape[1]
    mask = np.isfinite(resid)
    complete = mask.all(axis=1)
    scores = np.zeros((resid.shape[0], n_comp))
    if n_comp == 0:
        return scores
    scores[complete] = resid[complete] @ (weights[:, None] * phi)
    lam = np.diag(eigenvalues)
    for i in np.flatnonzero(~complete):
        obs = mask[i]
        p = phi[obs]
        cov = p @ lam @ p.T + noise_variance * np.eye(obs.sum())
        cov += 1e-10 * max(np.trace(cov), 1e-300) / obs.sum() * np.eye(obs.sum())
        scores[i] = lam @ p.T @ np.linalg.solve(cov, resid[i, obs])
    return scores


def fpca_smooth(sample, pve=0.99):
    """Smooth ``sample`` with the leading eigenfunctions reaching ``pve``."""
    if not 0 < pve < 1:
        raise ValueError(f"pve must lie in (0, 1), got {pve}")
    values = sample.values
    if values.shape[0] < 2:
        raise ValueError("FPCA needs at least two curves")
    grid = sample.grid
    weights = trapezoid_weights(grid)

    with np.errstate(invalid="ignore"):
        counts = np.sum(np.isfinite(values), axis=0)
    if np.any(counts == 0):
        raise ValueError("some grid point has no observed value")
    mean = np.nanmean(values, axis=0)
    resid = values - mean
    cov = _pairwise_covariance(resid)
    cov = (cov + cov.T) / 2
    noise = estimate_noise_variance(cov, grid)
    signal = cov - noise * np.eye(grid.size)

    sw = np.sqrt(weights)
    evals, evecs = np.linalg.eigh(sw[:, None] * signal * sw[None, :])
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    top = max(evals[0], 0.0)
    negligible = top <= 1e-12 * max(1.0, float(np.max(np.abs(cov))))
    if evals[-1] < -1e-2 * top and not negligible:
        warnings.warn(
            f"covariance is indefinite (min eigenvalue {evals[-1]:.3g}, max {top:.3g}); "
            "negative eigenvalues clipped to 0",
            RuntimeWarning,
            stacklevel=2,
        )
    evals = np.clip(evals, 0.0, None)
    total = evals.sum()
    if total <= 1e-14 * max(1.0, float(np.max(np.abs(cov)))):
        n_comp, achieved = 0, 1.0
    else:
        frac = np.cumsum(evals) / total
        n_comp = int(np.searchsorted(frac, pve - 1e-12) + 1)
        n_comp = min(n_comp, evals.size)
        achieved = float(min(frac[n_comp - 1], 1.0))
    phi = evecs[:, :n_comp] / sw[:, None]
    # deterministic sign: largest-magnitude entry positive
    for c in range(n_comp):
        if phi[np.argmax(np.abs(phi[:, c])), c] < 0:
            phi[:, c] = -phi[:, c]
    lam = evals[:n_comp]

    scores = _scores(resid, phi, lam, weights, noise)
    return FpcaResult(
        grid=grid.copy(),
        weights=weights,
        mean=mean,
        eigenfunctions=phi,
        eigenvalues=lam,
        noise_variance=noise,
        scores=scores,
        smoothed=mean + scores @ phi.T,
        pve_achieved=achieved,
    )


def project_new(result, new_rows, grid=None):
    """Scores and reconstructions for curves on the training grid."""
    new_rows = np.atleast_2d(np.asarray(new_rows, dtype=float))
    if grid is not None:
        grid = np.asarray(grid, dtype=float)
        if grid.shape != result.grid.shape or not np.allclose(grid, result.grid, rtol=0, atol=1e-12):
            raise ValueError("new curves are not on the training grid")
    if new_rows.shape[1] != result.grid.size:
        raise ValueError(
            f"new curves have {new_rows.shape[1]} points, training grid has {result.grid.size}"
        )
    resid = new_rows - result.mean
    scores = _scores(
        resid, result.eigenfunctions, result.eigenvalues, result.weights, result.noise_variance
    )
    return scores, result.mean + scores @ result.eigenfunctions.T
