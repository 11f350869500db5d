"""B-spline building blocks on the scaled domain [0, 1].

Knot vectors are boundary-inclusive, placed either uniformly or at sample
quantiles; bases are clamped (endpoint knots repeated degree+1 times) and
evaluated with the Cox-de Boor recursion.  Difference penalty matrices, sum-to-zero reparameterizations and
row-wise tensor products live here too; everything upstream (model
specifications, fitting) works in terms of these primitives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """Raised when a point falls outside the domain a basis was built on."""


@dataclass(frozen=True)
class KnotVector:
    """Boundary-inclusive knot sequence on [0, 1] plus spline degree.

    ``knots`` holds each breakpoint once (0 and 1 included); the clamped
    sequence with repeated endpoints is derived on demand.  The number of
    basis functions is ``len(knots) + degree - 1``.
    """

    knots: np.ndarray
    degree: int

    def __post_init__(self):
        kn = np.asarray(self.knots, dtype=float)
        object.__setattr__(self, "knots", kn)
        if self.degree < 0:
            raise ValueError("degree must be non-negative")
        if kn.ndim != 1 or kn.size < 2:
            raise ValueError("need at least the two boundary knots")
        if kn[0] != 0.0 or kn[-1] != 1.0:
            raise ValueError("knot sequence must start at 0 and end at 1")
        if not np.all(np.diff(kn) > 0):
            raise ValueError("knots must be strictly increasing")

    @property
    def nbasis(self) -> int:
        return self.knots.size + self.degree - 1

    def padded(self) -> np.ndarray:
        """Clamped knot sequence (endpoints with multiplicity degree+1)."""
        d = self.degree
        return np.concatenate([np.zeros(d), self.knots, np.ones(d)])

    def greville(self) -> np.ndarray:
        """Greville abscissae, one per basis function.

        The j-th site averages ``degree`` consecutive padded knots; basis
        functions reproduce linear functions with coefficients evaluated at
        these sites, which is what spacing-aware penalties lean on.  Degree
        zero falls back to the interval midpoints.
        """
        if self.degree == 0:
            return 0.5 * (self.knots[:-1] + self.knots[1:])
        pad = self.padded()
        return np.array(
            [pad[j + 1 : j + 1 + self.degree].mean() for j in range(self.nbasis)]
        )


def knot_count(n_obs: int, rule) -> int:
    """Total knot count for ``rule``: an explicit int >= 2 or ``"sqrt-n"``."""
    if rule == "sqrt-n":
        if n_obs < 1:
            raise ValueError("n_obs must be positive for the sqrt-n rule")
        return max(2, math.ceil(math.sqrt(n_obs)))
    if isinstance(rule, (int, np.integer)) and not isinstance(rule, bool):
        count = int(rule)
        if count < 2:
            raise ValueError("explicit knot count must be at least 2")
        return count
    raise ValueError(f"unknown knot rule {rule!r}")


def make_knots(n_obs: int, degree: int, rule) -> KnotVector:
    """Build a uniform boundary-inclusive knot vector.

    ``rule`` is either an explicit total knot count (>= 2, boundaries
    included) or the string ``"sqrt-n"`` for ceil(sqrt(n_obs)) knots.
    """
    return KnotVector(np.linspace(0.0, 1.0, knot_count(n_obs, rule)), degree)


def quantile_knots(values, degree: int, rule, n_obs: int | None = None) -> KnotVector:
    """Knot vector with interior knots at empirical quantiles of ``values``.

    ``values`` must already live on [0, 1] (the boundary knots are pinned at
    0 and 1).  The count follows the same ``rule`` as :func:`make_knots`, by
    default resolved against ``len(values)``.  Quantiles that collide under
    heavily tied data collapse to a single knot, so the result can be
    shorter than the rule asks for.

    Uniform placement leaves basis functions without support when the
    covariate piles up in a sub-interval (a normal covariate stretched over
    its sample range, say); quantile placement puts an even share of the
    sample between consecutive knots instead.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("values must be a non-empty one-dimensional array")
    if values.min() < -1e-9 or values.max() > 1 + 1e-9:
        raise DomainError("values must be scaled to [0, 1] before knot placement")
    count = knot_count(values.size if n_obs is None else n_obs, rule)
    probs = np.linspace(0.0, 1.0, count)[1:-1]
    grid = np.concatenate(([0.0], np.quantile(values, probs), [1.0]))
    keep = [0.0]
    for g in grid[1:]:
        if g - keep[-1] > 1e-8:
            keep.append(float(g))
    keep[-1] = 1.0
    return KnotVector(np.asarray(keep), degree)


def eval_basis(kv: KnotVector, x) -> np.ndarray:
    """Evaluate all basis functions at ``x`` via the Cox-de Boor recursion.

    Returns an array of shape (len(x), nbasis).  Rows sum to one (partition
    of unity) and have at most degree+1 non-zero entries.  Points outside
    [0, 1] raise :class:`DomainError`; the right endpoint is owned by the
    last non-empty interval so that the basis is right-closed at 1.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.ndim != 1:
        raise ValueError("x must be one-dimensional")
    if x.size and (x.min() < -1e-9 or x.max() > 1 + 1e-9):
        bad = x[(x < -1e-9) | (x > 1 + 1e-9)][0]
        raise DomainError(f"point {bad!r} is outside the basis domain [0, 1]")
    x = np.clip(x, 0.0, 1.0)

    t = kv.padded()
    d = kv.degree
    m = kv.nbasis
    # degree-0 layer: interval indicators on the padded sequence
    b = np.zeros((x.size, m + d))
    for j in range(m + d):
        if t[j + 1] > t[j]:
            b[:, j] = (x >= t[j]) & (x < t[j + 1])
    at_end = x == 1.0
    if at_end.any():
        j_last = max(j for j in range(m + d) if t[j + 1] > t[j])
        b[at_end, j_last] = 1.0
    # triangular recursion, updating in place left to right
    for r in range(1, d + 1):
        for j in range(m + d - r):
            left = np.zeros(x.size)
            if t[j + r] > t[j]:
                left = (x - t[j]) / (t[j + r] - t[j]) * b[:, j]
            if t[j + r + 1] > t[j + 1]:
                left = left + (t[j + r + 1] - x) / (t[j + r + 1] - t[j + 1]) * b[:, j + 1]
            b[:, j] = left
    return b[:, :m]


def difference_matrix(nbasis: int, order: int) -> np.ndarray:
    """r-th order difference penalty matrix of shape (nbasis - order, nbasis).

    Annihilates polynomial coefficient sequences up to degree order-1
    (constants for order >= 1, linear ramps for order >= 2) exactly.
    """
    if order < 1:
        raise ValueError("difference order must be at least 1")
    if nbasis <= order:
        raise ValueError(f"need more than {order} basis functions for order {order}")
    return np.diff(np.eye(nbasis), n=order, axis=0)


def divided_difference_matrix(sites, order: int) -> np.ndarray:
    """Spacing-aware difference penalty for coefficients living at ``sites``.

    Rows are order-th divided differences over consecutive sites, rescaled
    by order! times the mean gap to the order, so equispaced sites give
    back :func:`difference_matrix` exactly.  Whatever the spacing, the rows
    annihilate coefficient sequences polynomial in the sites up to degree
    order-1; spline coefficients of a linear function are linear in the
    Greville sites, so an order-2 penalty built here leaves linear effects
    unshrunk even on quantile-placed knots.
    """
    t = np.asarray(sites, dtype=float)
    if t.ndim != 1 or t.size < 2:
        raise ValueError("need at least two sites")
    if not np.all(np.diff(t) > 0):
        raise ValueError("sites must be strictly increasing")
    if order < 1:
        raise ValueError("difference order must be at least 1")
    if t.size <= order:
        raise ValueError(f"need more than {order} sites for order {order}")
    d = np.eye(t.size)
    for k in range(1, order + 1):
        d = (d[1:] - d[:-1]) / (t[k:] - t[:-k])[:, None]
    scale = math.factorial(order) * np.mean(np.diff(t)) ** order
    return scale * d


def sum_to_zero(nbasis: int) -> np.ndarray:
    """Orthonormal basis of the coefficient subspace orthogonal to constants.

    Shape (nbasis, nbasis - 1).  Reparameterizing a spline block as B @ Z
    removes the constant direction from its span, so the block can sit next
    to an intercept without a rank deficiency; the representable set of
    fitted values of the full model is unchanged.
    """
    helmert = np.zeros((nbasis, nbasis - 1))
    for j in range(1, nbasis):
        helmert[:j, j - 1] = 1.0
        helmert[j, j - 1] = -j
        helmert[:, j - 1] /= math.sqrt(j * (j + 1))
    return helmert


def row_kronecker(*mats: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product: every column product, row by row."""
    out = mats[0]
    for m in mats[1:]:
        out = np.einsum("ij,ik->ijk", out, m).reshape(out.shape[0], -1)
    return out


def kron_penalties(nbases: list[int], order: int, sites=None) -> list[np.ndarray]:
    """Per-dimension difference penalties for a tensor-product block.

    For margins of sizes (m1, ..., mK) returns one matrix per dimension,
    each acting on the full Kronecker coefficient vector: differences along
    that dimension, identity along the rest.  ``sites`` optionally holds one
    site array per margin (or None for plain differences on that margin),
    switching the marginal penalty to :func:`divided_difference_matrix`.
    """
    out = []
    for d, md in enumerate(nbases):
        parts = [np.eye(m) for m in nbases]
        if sites is not None and sites[d] is not None:
            parts[d] = divided_difference_matrix(sites[d], order)
        else:
            parts[d] = difference_matrix(md, order)
        full = parts[0]
        for p in parts[1:]:
            full = np.kron(full, p)
        out.append(full)
    return out


@dataclass(frozen=True)
class RangeScaler:
    """Min-max scaling of one covariate onto [0, 1], frozen at fit time.

    Bootstrap resamples reuse the original rows, so transformed values stay
    in range by construction; genuinely new points outside [lo, hi] raise
    :class:`DomainError` (clamped convention, no extrapolation).
    """

    lo: float
    hi: float

    @classmethod
    def fit(cls, values: np.ndarray, name: str = "") -> "RangeScaler":
        lo = float(np.min(values))
        hi = float(np.max(values))
        if hi <= lo:
            raise ValueError(
                f"column {name!r} is constant; cannot build a spline basis on it"
            )
        return cls(lo, hi)

    def transform(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.size and (values.min() < self.lo or values.max() > self.hi):
            bad = values[(values < self.lo) | (values > self.hi)][0]
            raise DomainError(
                f"value {bad!r} outside the fitted range [{self.lo}, {self.hi}]"
            )
        return (values - self.lo) / (self.hi - self.lo)
