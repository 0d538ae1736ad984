"""Check loss and its logistic-smoothed surrogate.

The surrogate is

    rho_h(v) = tau * v + h * log(1 + exp(-v / h))

which is strictly convex, exceeds the check loss by at most ``h * log 2`` and
converges to it as ``h -> 0``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import norm


@dataclass(frozen=True)
class SmoothLossParams:
    tau: float
    h: float

    def __post_init__(self):
        _check_tau(self.tau)
        if not np.all(np.asarray(self.h) > 0):
            raise ValueError(f"bandwidth must be positive, got {self.h}")


def _check_tau(tau):
    tau = np.asarray(tau)
    if not np.all((tau > 0) & (tau < 1)):
        raise ValueError(f"tau must lie in (0, 1), got {tau}")


def check_loss(v, tau):
    v = np.asarray(v, dtype=float)
    return v * (tau - (v < 0))


def smooth_loss(v, params):
    v = np.asarray(v, dtype=float)
    return params.tau * v + params.h * np.logaddexp(0.0, -v / params.h)


def smooth_loss_grad(v, params):
    v = np.asarray(v, dtype=float)
    return params.tau - expit(-v / params.h)


def smooth_loss_hess(v, params):
    z = np.asarray(v, dtype=float) / params.h
    return expit(z) * expit(-z) / params.h


def default_bandwidth(y, n_total=None):
    """``0.2 * MAD(y) * n^(-1/3)``, with a floor for degenerate responses."""
    y = np.asarray(y, dtype=float)
    n = y.size if n_total is None else n_total
    mad = np.median(np.abs(y - np.median(y)))
    if mad <= 0:
        mad = np.std(y)
    if mad <= 0:
        mad = 1.0
    return 0.2 * mad * n ** (-1.0 / 3.0)


def hall_sheather(n, tau, alpha=0.05):
    """Hall-Sheather bandwidth for difference-quotient sparsity estimates."""
    z = norm.ppf(tau)
    return n ** (-1.0 / 3.0) * norm.ppf(1 - alpha / 2) ** (2.0 / 3.0) * (
        1.5 * norm.pdf(z) ** 2 / (2 * z**2 + 1)
    ) ** (1.0 / 3.0)


def sparsity(resid, tau):
    """``1 / f(F^-1(tau))`` from the empirical quantiles of the residuals.

    Returns nan when the difference quotient is not positive (all residuals
    tied, for example).
    """
    resid = np.asarray(resid, dtype=float)
    _check_tau(tau)
    if resid.size < 2:
        return float("nan")
    b = hall_sheather(resid.size, tau)
    lo, hi = max(tau - b, 0.0), min(tau + b, 1.0)
    q_lo, q_hi = np.quantile(resid, [lo, hi])
    s = (q_hi - q_lo) / (hi - lo)
    return float(s) if s > 0 else float("nan")
