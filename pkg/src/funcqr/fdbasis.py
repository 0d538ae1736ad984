"""Univariate spline bases and difference penalties.

Two spline families are supported on a closed interval ``[lo, hi]``:

* ``cubic_bspline``: open cubic B-splines with equally spaced interior knots
  and boundary knots replicated four times.
* ``cyclic_cubic``: periodic cubic B-splines on ``K`` equally spaced knots;
  ``lo`` and ``hi`` are identified.

A third, internal kind ``constant`` is the single function equal to one. It
turns the functional score into the plain integral of the curve.

Tensor-product coefficients ``delta`` (D functions in s, L functions in t) are
vectorized as ``k = d * L + l``, i.e. ``delta.reshape(D * L)`` on a ``(D, L)``
array. Under that layout the s-penalty is ``P_s (x) I_L`` and the t-penalty is
``I_D (x) P_t``. Every module uses this ordering.
"""

from dataclasses import dataclass, field

import numpy as np

KINDS = ("cubic_bspline", "cyclic_cubic", "constant")
DEGREE = 3


@dataclass(frozen=True)
class SplineBasisSpec:
    kind: str
    num_basis: int
    lo: float | None = None  # None: filled in from data by `design`
    hi: float | None = None

    def with_domain(self, lo, hi):
        return SplineBasisSpec(self.kind, self.num_basis, float(lo), float(hi))


@dataclass(frozen=True)
class Basis:
    """An evaluable spline basis. Build with :func:`make_basis`."""

    kind: str
    num_basis: int
    lo: float
    hi: float
    knots: np.ndarray = field(repr=False)

    @property
    def cyclic(self):
        return self.kind == "cyclic_cubic"

    def __call__(self, points):
        return eval_basis(self, points)

    def to_dict(self):
        return {"kind": self.kind, "num_basis": self.num_basis, "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class PenaltyMatrix:
    order: int
    matrix: np.ndarray

    def quad(self, coef):
        coef = np.asarray(coef, dtype=float)
        return float(coef @ self.matrix @ coef)


def make_basis(spec):
    """Construct a basis from a :class:`SplineBasisSpec` with a set domain."""
    if spec.kind not in KINDS:
        raise ValueError(f"unknown basis kind {spec.kind!r}")
    if spec.lo is None or spec.hi is None:
        raise ValueError("basis domain is not set")
    lo, hi = float(spec.lo), float(spec.hi)
    if not np.isfinite(lo) or not np.isfinite(hi) or lo >= hi:
        raise ValueError(f"degenerate basis domain [{lo}, {hi}]")
    k = int(spec.num_basis)

    if spec.kind == "constant":
        if k != 1:
            raise ValueError("constant basis has exactly one function")
        knots = np.array([lo, hi])
    elif spec.kind == "cubic_bspline":
        if k < DEGREE + 1:
            raise ValueError(f"cubic B-spline basis needs num_basis >= 4, got {k}")
        breaks = np.linspace(lo, hi, k - DEGREE + 1)
        breaks[0], breaks[-1] = lo, hi
        knots = np.concatenate([np.full(DEGREE, lo), breaks, np.full(DEGREE, hi)])
    else:
        if k < DEGREE + 1:
            raise ValueError(f"cyclic cubic basis needs num_basis >= 4, got {k}")
        knots = np.linspace(lo, hi, k + 1)
    knots.setflags(write=False)
    return Basis(spec.kind, k, lo, hi, knots)


def _check_points(basis, x):
    x = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    if x.size and not np.all(np.isfinite(x)):
        raise ValueError("evaluation points must be finite")
    if basis.cyclic:
        return x
    tol = 1e-10 * (basis.hi - basis.lo)
    if x.size and (x.min() < basis.lo - tol or x.max() > basis.hi + tol):
        raise ValueError(
            f"points outside basis domain [{basis.lo}, {basis.hi}]: "
            f"range [{x.min()}, {x.max()}]"
        )
    return np.clip(x, basis.lo, basis.hi)


def _bspline_values(t, k, x):
    """Cox-de Boor: the 4 non-zero cubic values per point and their first index."""
    span = np.searchsorted(t, x, side="right") - 1
    span = np.clip(span, DEGREE, k - 1)
    n = x.size
    vals = np.zeros((n, DEGREE + 1))
    vals[:, 0] = 1.0
    left = np.zeros((n, DEGREE + 1))
    right = np.zeros((n, DEGREE + 1))
    for j in range(1, DEGREE + 1):
        left[:, j] = x - t[span + 1 - j]
        right[:, j] = t[span + j] - x
        saved = np.zeros(n)
        for r in range(j):
            temp = vals[:, r] / (right[:, r + 1] + left[:, j - r])
            vals[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        vals[:, j] = saved
    return vals, span - DEGREE


def _cyclic_values(basis, x):
    k = basis.num_basis
    width = (basis.hi - basis.lo) / k
    u = np.mod((x - basis.lo) / width, k)
    j = np.floor(u).astype(int)
    j = np.minimum(j, k - 1)
    f = u - j
    vals = np.column_stack(
        [
            (1 - f) ** 3 / 6,
            (3 * f**3 - 6 * f**2 + 4) / 6,
            (-3 * f**3 + 3 * f**2 + 3 * f + 1) / 6,
            f**3 / 6,
        ]
    )
    return vals, j - DEGREE


def eval_basis(basis, points):
    """Evaluate every basis function at ``points``.

    Returns an array of shape ``(len(points), num_basis)``. Cyclic bases wrap
    points modulo the period; other bases reject points outside the domain.
    """
    x = _check_points(basis, points)
    k = basis.num_basis
    out = np.zeros((x.size, k))
    if x.size == 0:
        return out
    if basis.kind == "constant":
        out[:] = 1.0
        return out
    if basis.cyclic:
        vals, first = _cyclic_values(basis, x)
    else:
        vals, first = _bspline_values(basis.knots, k, x)
    rows = np.arange(x.size)
    for r in range(DEGREE + 1):
        cols = first + r
        if basis.cyclic:
            cols = np.mod(cols, k)
        np.add.at(out, (rows, cols), vals[:, r])
    return out


def difference_matrix(num_basis, order, cyclic=False):
    """The ``order``-th difference operator acting on coefficient vectors."""
    if cyclic:
        step = np.eye(num_basis) - np.roll(np.eye(num_basis), 1, axis=1)
        return np.linalg.matrix_power(step, order)
    return np.diff(np.eye(num_basis), order, axis=0)


def difference_penalty(num_basis, order=2, cyclic=False):
    """P-spline penalty ``D^T D`` for ``order``-th differences.

    With ``cyclic=True`` the differences wrap around, so only constants lie in
    the null space.
    """
    num_basis, order = int(num_basis), int(order)
    if order < 1:
        raise ValueError("difference order must be >= 1")
    if order >= num_basis:
        raise ValueError(f"difference order {order} must be < num_basis {num_basis}")
    d = difference_matrix(num_basis, order, cyclic)
    return PenaltyMatrix(order, d.T @ d)


def basis_penalty(basis, order=2):
    if basis.kind == "constant":
        return PenaltyMatrix(order, np.zeros((1, 1)))
    return difference_penalty(basis.num_basis, order, cyclic=basis.cyclic)


def tensor_penalties(basis_s, basis_t, order=2):
    """Penalties on the ``D * L`` tensor coefficients: ``(P_s, P_t)``."""
    ps = basis_penalty(basis_s, order).matrix
    pt = basis_penalty(basis_t, order).matrix
    n_s, n_t = basis_s.num_basis, basis_t.num_basis
    return (
        PenaltyMatrix(order, np.kron(ps, np.eye(n_t))),
        PenaltyMatrix(order, np.kron(np.eye(n_s), pt)),
    )
