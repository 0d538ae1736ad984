"""Longitudinal datasets and the finite-dimensional model design.

The linear predictor for observation r (cluster i, visit j) is

    eta_r = sum_l a_l psi_l(t_r) + sum_{d,l} delta_{dl} psi_l(t_r) xi_{d,r} + u_i

with ``xi_{d,r}`` the trapezoid integral of ``phi_d(s) * X_r(s)``. Rows are
ordered cluster by cluster, in the order of ``dataset.clusters``.
"""

from dataclasses import dataclass, field

import numpy as np

from .fdbasis import SplineBasisSpec, eval_basis, make_basis
from .fpca import trapezoid_weights

VARIANTS = ("surface", "s_only", "t_only", "constant")


@dataclass
class ClusterRecord:
    cluster_id: str
    y: np.ndarray
    t: np.ndarray
    curve_rows: np.ndarray

    def __post_init__(self):
        self.y = np.atleast_1d(np.asarray(self.y, dtype=float))
        self.t = np.atleast_1d(np.asarray(self.t, dtype=float))
        self.curve_rows = np.atleast_1d(np.asarray(self.curve_rows, dtype=int))
        if not (self.y.size == self.t.size == self.curve_rows.size) or self.y.size < 1:
            raise ValueError(f"cluster {self.cluster_id!r}: y, t and curve_rows must be non-empty and aligned")

    @property
    def size(self):
        return self.y.size


@dataclass
class LongitudinalDataset:
    clusters: list
    grid: np.ndarray
    curves: np.ndarray  # (n_curves, H)
    t_domain: tuple | None = None
    obs_ids: list | None = None  # one label per curve row

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=float)
        self.curves = np.atleast_2d(np.asarray(self.curves, dtype=float))
        if len(self.clusters) < 1:
            raise ValueError("dataset has no clusters")
        if self.curves.shape[1] != self.grid.size:
            raise ValueError("curves do not match the grid")
        if not np.all(np.isfinite(self.curves[self.curve_index])):
            raise ValueError("curves used by the model contain missing values; smooth them first")
        rows = self.curve_index
        if rows.min() < 0 or rows.max() >= self.curves.shape[0]:
            raise ValueError("curve_rows index outside the curve matrix")
        if np.unique(rows).size != rows.size:
            raise ValueError("curve_rows indices must be unique")
        t = self.t
        if self.t_domain is None:
            self.t_domain = (float(t.min()), float(t.max()))
        lo, hi = self.t_domain
        if t.min() < lo or t.max() > hi:
            raise ValueError("observation times outside the declared t interval")

    @property
    def n_clusters(self):
        return len(self.clusters)

    @property
    def sizes(self):
        return np.array([c.size for c in self.clusters])

    @property
    def y(self):
        return np.concatenate([c.y for c in self.clusters])

    @property
    def t(self):
        return np.concatenate([c.t for c in self.clusters])

    @property
    def curve_index(self):
        return np.concatenate([c.curve_rows for c in self.clusters])

    @property
    def cluster_index(self):
        return np.repeat(np.arange(self.n_clusters), self.sizes)

    @property
    def row_curves(self):
        return self.curves[self.curve_index]

    def with_responses(self, y):
        """Copy with responses replaced (rows in design order)."""
        y = np.asarray(y, dtype=float)
        out, start = [], 0
        for c in self.clusters:
            out.append(ClusterRecord(c.cluster_id, y[start : start + c.size], c.t, c.curve_rows))
            start += c.size
        return LongitudinalDataset(out, self.grid, self.curves, self.t_domain, self.obs_ids)

    def resample_clusters(self, picks):
        """Dataset made of whole clusters ``picks`` (with repeats), fresh ids."""
        out, curves, start = [], [], 0
        for new_id, i in enumerate(picks):
            c = self.clusters[i]
            curves.append(self.curves[c.curve_rows])
            out.append(ClusterRecord(f"b{new_id}", c.y, c.t, np.arange(start, start + c.size)))
            start += c.size
        return LongitudinalDataset(out, self.grid, np.vstack(curves), self.t_domain)


@dataclass(frozen=True)
class ModelSpec:
    tau: float
    variant: str = "surface"
    basis_t: SplineBasisSpec = field(default_factory=lambda: SplineBasisSpec("cubic_bspline", 10))
    basis_s: SplineBasisSpec = field(default_factory=lambda: SplineBasisSpec("cubic_bspline", 10))
    penalty_order: int = 2

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError(f"tau must lie in (0, 1), got {self.tau}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.penalty_order < 1:
            raise ValueError("penalty_order must be >= 1")

    def to_dict(self):
        return {
            "tau": self.tau,
            "variant": self.variant,
            "basis_t": {"kind": self.basis_t.kind, "num_basis": self.basis_t.num_basis},
            "basis_s": {"kind": self.basis_s.kind, "num_basis": self.basis_s.num_basis},
            "penalty_order": self.penalty_order,
        }


@dataclass
class DesignMatrices:
    A: np.ndarray  # (n, L) alpha block
    Xi: np.ndarray  # (n, D) functional scores
    B: np.ndarray  # (n, p_beta) beta block
    Z: np.ndarray  # (n, N) cluster indicators
    row_index: list  # row -> (cluster position, visit position)
    cluster_index: np.ndarray
    basis_t: object
    basis_s: object  # constant basis for t_only / constant variants
    variant: str
    grid: np.ndarray | None = None

    @property
    def fixed(self):
        return np.hstack([self.A, self.B])

    @property
    def n_alpha(self):
        return self.A.shape[1]

    @property
    def n_beta(self):
        return self.B.shape[1]


def functional_scores(curves, grid, basis_s):
    """Trapezoid integrals of each basis function against each curve."""
    curves = np.atleast_2d(np.asarray(curves, dtype=float))
    grid = np.asarray(grid, dtype=float)
    if basis_s.kind != "constant" and not basis_s.cyclic:
        tol = 1e-10 * (basis_s.hi - basis_s.lo)
        if grid[0] < basis_s.lo - tol or grid[-1] > basis_s.hi + tol:
            raise ValueError("curve grid extends beyond the s-basis domain")
    phi = eval_basis(basis_s, grid)
    return curves @ (trapezoid_weights(grid)[:, None] * phi)


def model_bases(dataset, spec):
    """Bases for a spec; domains default to the data (t range, s grid ends)."""
    bt, bs = spec.basis_t, spec.basis_s
    if bt.lo is None or bt.hi is None:
        bt = bt.with_domain(*dataset.t_domain)
    basis_t = make_basis(bt)
    if spec.variant in ("surface", "s_only"):
        if bs.lo is None or bs.hi is None:
            bs = bs.with_domain(dataset.grid[0], dataset.grid[-1])
        basis_s = make_basis(bs)
    else:
        basis_s = make_basis(SplineBasisSpec("constant", 1, dataset.grid[0], dataset.grid[-1]))
    return basis_t, basis_s


def beta_block(psi, xi, variant):
    """Columns of the beta block from t-basis rows and functional scores."""
    if variant == "surface":
        n = psi.shape[0]
        return (xi[:, :, None] * psi[:, None, :]).reshape(n, -1)
    if variant == "s_only":
        return xi
    if variant == "t_only":
        return psi * xi[:, :1]
    return xi[:, :1].copy()


def assemble_design(dataset, spec, bases=None):
    basis_t, basis_s = bases if bases is not None else model_bases(dataset, spec)
    t = dataset.t
    psi = eval_basis(basis_t, t)
    xi = functional_scores(dataset.row_curves, dataset.grid, basis_s)
    cidx = dataset.cluster_index
    z = np.zeros((t.size, dataset.n_clusters))
    z[np.arange(t.size), cidx] = 1.0
    row_index = [(i, j) for i, c in enumerate(dataset.clusters) for j in range(c.size)]
    return DesignMatrices(
        A=psi,
        Xi=xi,
        B=beta_block(psi, xi, spec.variant),
        Z=z,
        row_index=row_index,
        cluster_index=cidx,
        basis_t=basis_t,
        basis_s=basis_s,
        variant=spec.variant,
        grid=dataset.grid,
    )
