"""Synthetic clustered functional quantile-regression data with known truth.

Curves are random combinations of five fixed periodic shapes on [0, 1]. Errors
are shifted so that their tau-quantile is exactly zero, which makes
``alpha(t) + int beta(s, t) X(s) ds + u_i`` the true conditional tau-quantile.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.integrate import simpson

from .design import ClusterRecord, LongitudinalDataset
from .qloss import check_loss

FINE = 2001
SHAPE_SD = np.array([1.0, 0.8, 0.6, 0.4, 0.3])


def shapes(s):
    """The five curve shapes evaluated at ``s``, as columns."""
    s = np.asarray(s, dtype=float)
    r2 = np.sqrt(2.0)
    return np.column_stack(
        [
            np.ones_like(s),
            r2 * np.sin(2 * np.pi * s),
            r2 * np.cos(2 * np.pi * s),
            r2 * np.sin(4 * np.pi * s),
            r2 * np.cos(4 * np.pi * s),
        ]
    )


def _unit(t, t_range):
    lo, hi = t_range
    return (np.asarray(t, dtype=float) - lo) / (hi - lo)


ALPHAS = {
    "log": lambda t, tr: 2.0 + np.log1p(3.0 * _unit(t, tr)),
    "zero": lambda t, tr: np.zeros_like(np.asarray(t, dtype=float)),
}


def _beta_surface(s, t, tr):
    u = _unit(t, tr)
    g = shapes(np.ravel(s))
    return (0.5 + 1.5 * u**2) * g[:, 1].reshape(np.shape(s)) + 0.5 * (1 - u) * g[:, 2].reshape(np.shape(s))


BETAS = {
    "surface": _beta_surface,
    "constant": lambda s, t, tr: np.ones(np.broadcast(s, t).shape),
    "zero": lambda s, t, tr: np.zeros(np.broadcast(s, t).shape),
    "s_only": lambda s, t, tr: np.broadcast_to(
        shapes(np.ravel(s))[:, 1].reshape(np.shape(s)), np.broadcast(s, t).shape
    ).copy(),
    "t_only": lambda s, t, tr: 0.5 + 1.5 * _unit(t, tr) ** 2 + 0 * np.asarray(s, dtype=float),
}


@dataclass(frozen=True)
class SimScenario:
    n_clusters: int = 100
    n_per_cluster: int | tuple = 15  # fixed, or inclusive (min, max)
    n_grid: int = 50
    t_range: tuple = (1.0, 21.0)
    alpha: str = "log"
    beta: str = "surface"
    sigma_u: float = 0.5
    error: str = "skewed"  # normal | skewed | heteroskedastic
    error_scale: float = 1.0
    error_shape: float = 4.0  # skew-normal shape for "skewed"
    noise_sd: float = 0.0
    tau: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        if min(np.atleast_1d(self.n_per_cluster)) < 1:
            raise ValueError("n_per_cluster must be >= 1")
        if self.n_grid < 2 or self.t_range[0] >= self.t_range[1]:
            raise ValueError("invalid grid or t interval")
        if min(self.sigma_u, self.error_scale, self.noise_sd) < 0:
            raise ValueError("scales must be >= 0")
        if self.alpha not in ALPHAS or self.beta not in BETAS:
            raise ValueError(f"unknown alpha/beta {self.alpha!r}/{self.beta!r}")
        if self.error not in ("normal", "skewed", "heteroskedastic"):
            raise ValueError(f"unknown error law {self.error!r}")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")

    @property
    def grid(self):
        return np.linspace(0.0, 1.0, self.n_grid)


@dataclass
class SimTruth:
    scenario: SimScenario
    u: np.ndarray
    coefs: np.ndarray  # (n_obs, 5) shape coefficients of the true curves
    X: np.ndarray  # noise-free curves on the grid
    quantile: np.ndarray  # true tau-quantile per observation (design order)
    pair: tuple = field(default=None)  # shape-coefficient vectors of (X_A, X_B)

    def alpha(self, t):
        return ALPHAS[self.scenario.alpha](t, self.scenario.t_range)

    def beta(self, s, t):
        return BETAS[self.scenario.beta](s, t, self.scenario.t_range)

    def beta_integral(self, t, coefs):
        """``int beta(s, t) X(s) ds`` for curves given by shape coefficients."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        coefs = np.atleast_2d(coefs)
        s = np.linspace(0.0, 1.0, FINE)
        x = coefs @ shapes(s).T  # (m, FINE)
        b = self.beta(s[None, :], t[:, None])  # (len(t), FINE)
        return simpson(b[:, None, :] * x[None, :, :], x=s, axis=-1)  # (len(t), m)

    def row_integrals(self, t, coefs):
        """``int beta(s, t_r) X_r(s) ds`` for matched rows of ``t`` and ``coefs``."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        s = np.linspace(0.0, 1.0, FINE)
        x = np.atleast_2d(coefs) @ shapes(s).T
        return simpson(self.beta(s[None, :], t[:, None]) * x, x=s, axis=-1)

    def quantile_at(self, t, coefs):
        """Population tau-quantile for a typical cluster (u = 0)."""
        return self.alpha(t)[:, None] + self.beta_integral(t, coefs)

    def difference(self, t, pair=None):
        """True quantile difference between the two curves of ``pair``."""
        a, b = self.pair if pair is None else pair
        return self.beta_integral(t, np.asarray(a) - np.asarray(b))[:, 0]

    def pair_curves(self, grid=None):
        grid = self.scenario.grid if grid is None else grid
        g = shapes(grid)
        return g @ np.asarray(self.pair[0]), g @ np.asarray(self.pair[1])


def anchored_errors(rng, scenario, t):
    n = t.size
    tau = scenario.tau
    if scenario.error == "skewed":
        law = stats.skewnorm(scenario.error_shape)
        raw = law.rvs(size=n, random_state=rng) - law.ppf(tau)
        return scenario.error_scale * raw / law.std()
    z = rng.standard_normal(n) - stats.norm.ppf(tau)
    if scenario.error == "normal":
        return scenario.error_scale * z
    return scenario.error_scale * (0.5 + _unit(t, scenario.t_range)) * z


def generate(scenario):
    """Draw a dataset and its truth record; bit-identical for a given seed."""
    master = np.random.SeedSequence(scenario.seed)
    streams = [np.random.default_rng(s) for s in master.spawn(scenario.n_clusters + 1)]
    top = streams[-1]
    grid = scenario.grid
    g = shapes(grid)
    lo, hi = scenario.t_range

    if scenario.sigma_u > 0:
        u = top.normal(0.0, scenario.sigma_u, scenario.n_clusters)
        if u.size > 1:
            u -= u.mean()
        else:
            u[:] = 0.0
    else:
        u = np.zeros(scenario.n_clusters)

    truth_probe = SimTruth(scenario, u, None, None, None)
    clusters, coef_rows, w_rows, x_rows, q_rows, ids = [], [], [], [], [], []
    start = 0
    for i, rng in enumerate(streams[:-1]):
        if np.ndim(scenario.n_per_cluster) == 0:
            n_i = int(scenario.n_per_cluster)
        else:
            n_i = int(rng.integers(scenario.n_per_cluster[0], scenario.n_per_cluster[1] + 1))
        t = np.sort(rng.uniform(lo, hi, n_i))
        c = rng.standard_normal((n_i, 5)) * SHAPE_SD
        x = c @ g.T
        w = x + scenario.noise_sd * rng.standard_normal(x.shape) if scenario.noise_sd > 0 else x.copy()
        q = truth_probe.alpha(t) + truth_probe.row_integrals(t, c) + u[i]
        y = q + anchored_errors(rng, scenario, t)
        clusters.append(ClusterRecord(f"c{i}", y, t, np.arange(start, start + n_i)))
        ids.extend(f"c{i}_{j}" for j in range(n_i))
        coef_rows.append(c)
        w_rows.append(w)
        x_rows.append(x)
        q_rows.append(q)
        start += n_i

    dataset = LongitudinalDataset(clusters, grid, np.vstack(w_rows), (lo, hi), obs_ids=ids)
    pair = (np.array([0.0, 1.0, 0.0, 0.0, 0.0]), np.array([0.0, -1.0, 0.0, 0.0, 0.0]))
    truth = SimTruth(
        scenario,
        u,
        np.vstack(coef_rows),
        np.vstack(x_rows),
        np.concatenate(q_rows),
        pair,
    )
    return dataset, truth


def _profile_loss(y, x, tau, slope):
    """Check loss at ``slope`` with the best intercept (a tau order statistic)."""
    r = y - slope * x
    k = min(max(int(np.ceil(y.size * tau)) - 1, 0), y.size - 1)
    b0 = np.partition(r, k)[k]
    return float(check_loss(r - b0, tau).sum()), float(b0)


def oracle_qreg(y, x, tau):
    """Exact scalar quantile regression over lines through point pairs.

    A minimizer of the check loss for ``y ~ b0 + b1 * x`` interpolates at
    least two observations, so its slope is one of the pairwise slopes.
    Minimizing out the intercept leaves a loss that is convex and piecewise
    linear in the slope with kinks only at those pairwise slopes, so a binary
    search over the sorted candidates finds the same minimal-loss line as a
    full scan. Returns ``(intercept, slope)``.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if y.size < 2 or y.size != x.size:
        raise ValueError("need at least two paired observations")
    if np.ptp(x) == 0:
        raise ValueError("x has zero variance")
    i, j = np.triu_indices(y.size, k=1)
    ok = x[i] != x[j]
    slopes = np.unique((y[j[ok]] - y[i[ok]]) / (x[j[ok]] - x[i[ok]]))
    cache = {}

    def g(k):
        if k not in cache:
            cache[k] = _profile_loss(y, x, tau, slopes[k])
        return cache[k][0]

    lo, hi = 0, slopes.size - 1
    while hi - lo > 2:
        mid = (lo + hi) // 2
        if g(mid + 1) < g(mid):
            lo = mid + 1
        else:
            hi = mid + 1
    cand = range(max(lo - 1, 0), min(hi + 2, slopes.size))
    best = min(cand, key=g)
    return cache[best][1], float(slopes[best])
