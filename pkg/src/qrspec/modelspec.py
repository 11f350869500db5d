"""Piecewise-in-tau model specifications and design matrix construction.

A model specification assigns a list of terms to each interval of quantile
levels.  The design matrix at a level tau contains one column block per
distinct term appearing anywhere in the specification; blocks belonging to
terms absent from tau's interval are identically zero, so the coefficient
layout is the same at every level.

Specifications round-trip through a YAML document::

    intercept: true          # optional, default true
    structure: free          # optional; "ls" restricts slopes to be
                             # constant across quantile levels
    pieces:
      - interval: [0.0, 1.0]
        terms:
          - {kind: linear, cov: age}
          - {kind: power, cov: age, exponent: 2}
          - {kind: transform, cov: x1, name: sin}
          - {kind: spline, cov: x1, knots: sqrt-n, degree: 3,
             lam: 1.0, penalty_order: 2}
          - {kind: tensor, covs: [x1, x2], knots: [5, 5], degree: 3,
             lam: 1.0, penalty_order: 2}

Intervals must start at 0.0, end at 1.0 and be contiguous.  Each interval
is closed on the left and open on the right, except the last, which is
closed on both sides.

Spline terms map the covariate onto [0, 1] with a min/max scaling fitted
when the design is built, then expand it in a B-spline basis.  When the
model has an intercept, each spline block is reparametrized to sum-to-zero
columns so that adding several smooths keeps the design full rank; tensor
terms always carry the pure-interaction reparametrization, which excludes
the lower-dimensional marginal effects.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import yaml

from .basis import (
    DomainError,
    KnotVector,
    RangeScaler,
    difference_matrix,
    divided_difference_matrix,
    eval_basis,
    kron_penalties,
    make_knots,
    quantile_knots,
    row_kronecker,
    sum_to_zero,
)
from .data import Dataset


class SpecError(ValueError):
    """Raised for malformed model specifications."""


def _square(x):
    return np.square(x)


TRANSFORMS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "square": _square,
}


def register_transform(name, fn):
    """Register a named pure function usable in transform terms."""
    if not isinstance(name, str) or not name:
        raise SpecError("transform name must be a nonempty string")
    TRANSFORMS[name] = fn


def _check_cov(cov):
    if not isinstance(cov, str) or not cov:
        raise SpecError("covariate name must be a nonempty string")


def _check_knot_rule(knots):
    if knots == "sqrt-n":
        return
    if isinstance(knots, int) and not isinstance(knots, bool) and knots >= 2:
        return
    raise SpecError(f"knot rule must be an int >= 2 or 'sqrt-n', got {knots!r}")


def _check_placement(placement):
    if placement not in ("uniform", "quantile"):
        raise SpecError(
            f"knot placement must be 'uniform' or 'quantile', got {placement!r}"
        )


def _check_smooth(degree, lam, penalty_order):
    if degree not in (0, 1, 2, 3):
        raise SpecError(f"spline degree must be in 0..3, got {degree!r}")
    if not (isinstance(lam, (int, float)) and math.isfinite(lam) and lam >= 0):
        raise SpecError(f"penalty lam must be finite and >= 0, got {lam!r}")
    if not (isinstance(penalty_order, int) and penalty_order >= 1):
        raise SpecError(f"penalty order must be a positive int, got {penalty_order!r}")


@dataclass(frozen=True)
class Linear:
    cov: str

    def __post_init__(self):
        _check_cov(self.cov)


@dataclass(frozen=True)
class Power:
    cov: str
    exponent: float

    def __post_init__(self):
        _check_cov(self.cov)
        try:
            e = float(self.exponent)
        except (TypeError, ValueError):
            raise SpecError(f"power exponent must be a number, got {self.exponent!r}")
        if not math.isfinite(e):
            raise SpecError("power exponent must be finite")
        object.__setattr__(self, "exponent", e)


@dataclass(frozen=True)
class Transform:
    cov: str
    name: str

    def __post_init__(self):
        _check_cov(self.cov)
        if self.name not in TRANSFORMS:
            raise SpecError(
                f"unknown transform {self.name!r}; register it with register_transform"
            )


@dataclass(frozen=True)
class Spline:
    cov: str
    knots: object = "sqrt-n"
    degree: int = 3
    lam: float = 1.0
    penalty_order: int = 2
    placement: str = "uniform"

    def __post_init__(self):
        _check_cov(self.cov)
        _check_knot_rule(self.knots)
        _check_smooth(self.degree, self.lam, self.penalty_order)
        _check_placement(self.placement)
        object.__setattr__(self, "lam", float(self.lam))


@dataclass(frozen=True)
class Tensor:
    covs: tuple
    knots: object = "sqrt-n"
    degree: int = 3
    lam: float = 1.0
    penalty_order: int = 2
    placement: str = "uniform"

    def __post_init__(self):
        covs = tuple(self.covs)
        if len(covs) < 2:
            raise SpecError("tensor term needs at least two covariates")
        if len(set(covs)) != len(covs):
            raise SpecError(f"tensor covariates must be distinct, got {covs}")
        for c in covs:
            _check_cov(c)
        object.__setattr__(self, "covs", covs)
        knots = self.knots
        if isinstance(knots, (list, tuple)):
            knots = tuple(knots)
            if len(knots) != len(covs):
                raise SpecError("tensor knot list must match the covariate list")
        else:
            knots = (knots,) * len(covs)
        for k in knots:
            _check_knot_rule(k)
        object.__setattr__(self, "knots", knots)
        _check_smooth(self.degree, self.lam, self.penalty_order)
        _check_placement(self.placement)
        object.__setattr__(self, "lam", float(self.lam))


_TERM_KINDS = {
    "linear": Linear,
    "power": Power,
    "transform": Transform,
    "spline": Spline,
    "tensor": Tensor,
}


@dataclass(frozen=True)
class Interval:
    """Half-open quantile-level interval [lo, hi); the last piece also owns hi."""

    lo: float
    hi: float

    def __post_init__(self):
        lo, hi = float(self.lo), float(self.hi)
        if not (0.0 <= lo < hi <= 1.0):
            raise SpecError(f"interval must satisfy 0 <= lo < hi <= 1, got [{lo}, {hi})")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    def contains(self, tau, closed_right=False):
        if closed_right:
            return self.lo <= tau <= self.hi
        return self.lo <= tau < self.hi


@dataclass(frozen=True)
class ModelSpec:
    """A gap-free partition of (0,1) into intervals with their term lists.

    ``structure`` selects the estimation target.  The default ``"free"``
    leaves every coefficient unrestricted across quantile levels; ``"ls"``
    declares a location-shift hypothesis, in which only the intercept moves
    with the level and all remaining coefficients are shared.  A location
    shift needs the same design at every level, so it requires a single
    interval and an intercept.
    """

    pieces: tuple
    intercept: bool = True
    structure: str = "free"

    def __post_init__(self):
        if self.structure not in ("free", "ls"):
            raise SpecError(
                f"structure must be 'free' or 'ls', got {self.structure!r}"
            )
        pieces = []
        for piece in self.pieces:
            iv, terms = piece
            if not isinstance(iv, Interval):
                iv = Interval(*iv)
            terms = tuple(terms)
            if not terms:
                raise SpecError(f"interval [{iv.lo}, {iv.hi}) has an empty term list")
            for t in terms:
                if type(t) not in _TERM_KINDS.values():
                    raise SpecError(f"not a term: {t!r}")
            pieces.append((iv, terms))
        if not pieces:
            raise SpecError("specification has no intervals")
        pieces.sort(key=lambda p: p[0].lo)
        if pieces[0][0].lo != 0.0:
            raise SpecError("first interval must start at 0")
        if pieces[-1][0].hi != 1.0:
            raise SpecError("last interval must end at 1")
        for (a, _), (b, _) in zip(pieces, pieces[1:]):
            if a.hi != b.lo:
                raise SpecError(
                    f"intervals must be contiguous: [{a.lo}, {a.hi}) then [{b.lo}, {b.hi})"
                )
        object.__setattr__(self, "pieces", tuple(pieces))
        if self.structure == "ls":
            if len(pieces) > 1:
                raise SpecError("a location-shift spec must have a single interval")
            if not self.intercept:
                raise SpecError("a location-shift spec needs an intercept")

    @classmethod
    def whole(cls, terms, intercept=True, structure="free"):
        """Specification with a single interval covering all of (0,1)."""
        return cls(
            pieces=((Interval(0.0, 1.0), tuple(terms)),),
            intercept=intercept,
            structure=structure,
        )

    def piece_index(self, tau):
        if not (0.0 < tau < 1.0):
            raise DomainError(f"quantile level must be in (0,1), got {tau}")
        last = len(self.pieces) - 1
        for i, (iv, _) in enumerate(self.pieces):
            if iv.contains(tau, closed_right=(i == last)):
                return i
        raise AssertionError("partition invariant violated")

    def terms_at(self, tau):
        return self.pieces[self.piece_index(tau)][1]

    def covariates(self):
        """All covariate names referenced anywhere, in first-use order."""
        seen = []
        for _, terms in self.pieces:
            for t in terms:
                covs = t.covs if isinstance(t, Tensor) else (t.cov,)
                for c in covs:
                    if c not in seen:
                        seen.append(c)
        return tuple(seen)


def _term_to_dict(term):
    if isinstance(term, Linear):
        return {"kind": "linear", "cov": term.cov}
    if isinstance(term, Power):
        return {"kind": "power", "cov": term.cov, "exponent": term.exponent}
    if isinstance(term, Transform):
        return {"kind": "transform", "cov": term.cov, "name": term.name}
    if isinstance(term, Spline):
        out = {
            "kind": "spline",
            "cov": term.cov,
            "knots": term.knots,
            "degree": term.degree,
            "lam": term.lam,
            "penalty_order": term.penalty_order,
        }
        if term.placement != "uniform":
            out["placement"] = term.placement
        return out
    if isinstance(term, Tensor):
        out = {
            "kind": "tensor",
            "covs": list(term.covs),
            "knots": list(term.knots),
            "degree": term.degree,
            "lam": term.lam,
            "penalty_order": term.penalty_order,
        }
        if term.placement != "uniform":
            out["placement"] = term.placement
        return out
    raise SpecError(f"not a term: {term!r}")


def _term_from_dict(entry, where):
    if not isinstance(entry, dict) or "kind" not in entry:
        raise SpecError(f"{where}: term entry must be a mapping with a 'kind' key")
    kind = entry["kind"]
    cls = _TERM_KINDS.get(kind)
    if cls is None:
        raise SpecError(f"{where}: unknown term kind {kind!r}")
    kwargs = {k: v for k, v in entry.items() if k != "kind"}
    if "covs" in kwargs:
        kwargs["covs"] = tuple(kwargs["covs"])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise SpecError(f"{where}: {exc}")
    except SpecError as exc:
        raise SpecError(f"{where}: {exc}")


def parse_spec(text, columns=None):
    """Parse a YAML specification document.

    Parameters
    ----------
    text : str
        YAML document following the schema in the module docstring.
    columns : sequence of str, optional
        When given, every covariate referenced by the spec must be one of
        these names; unknown covariates raise SpecError.
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise SpecError(f"malformed YAML: {exc}")
    if not isinstance(doc, dict):
        raise SpecError("specification document must be a mapping")
    unknown = set(doc) - {"intercept", "structure", "pieces"}
    if unknown:
        raise SpecError(f"unknown top-level keys: {sorted(unknown)}")
    intercept = doc.get("intercept", True)
    if not isinstance(intercept, bool):
        raise SpecError("'intercept' must be a boolean")
    structure = doc.get("structure", "free")
    if not isinstance(structure, str):
        raise SpecError("'structure' must be a string")
    raw_pieces = doc.get("pieces")
    if not isinstance(raw_pieces, list) or not raw_pieces:
        raise SpecError("'pieces' must be a nonempty list")
    pieces = []
    for i, raw in enumerate(raw_pieces):
        where = f"pieces[{i}]"
        if not isinstance(raw, dict):
            raise SpecError(f"{where}: must be a mapping")
        if set(raw) != {"interval", "terms"}:
            raise SpecError(f"{where}: needs exactly the keys 'interval' and 'terms'")
        iv = raw["interval"]
        if not (isinstance(iv, list) and len(iv) == 2):
            raise SpecError(f"{where}.interval: must be a two-element list")
        try:
            interval = Interval(iv[0], iv[1])
        except (SpecError, TypeError) as exc:
            raise SpecError(f"{where}.interval: {exc}")
        if not isinstance(raw["terms"], list):
            raise SpecError(f"{where}.terms: must be a list")
        terms = tuple(
            _term_from_dict(t, f"{where}.terms[{j}]") for j, t in enumerate(raw["terms"])
        )
        pieces.append((interval, terms))
    spec = ModelSpec(pieces=tuple(pieces), intercept=intercept, structure=structure)
    if columns is not None:
        missing = [c for c in spec.covariates() if c not in tuple(columns)]
        if missing:
            raise SpecError(f"unknown covariates: {missing}; data has {tuple(columns)}")
    return spec


def dump_spec(spec):
    """Serialize a ModelSpec to the YAML schema; parse_spec inverts this."""
    doc = {
        "intercept": spec.intercept,
    }
    if spec.structure != "free":
        doc["structure"] = spec.structure
    doc["pieces"] = [
        {
            "interval": [iv.lo, iv.hi],
            "terms": [_term_to_dict(t) for t in terms],
        }
        for iv, terms in spec.pieces
    ]
    return yaml.safe_dump(doc, sort_keys=False)


@dataclass(frozen=True)
class Penalty:
    """L1 roughness penalty rows acting on the full coefficient vector."""

    rows: np.ndarray
    lam: float


class DesignBuilder:
    """Materializes design matrices for any quantile level.

    Built once per dataset by build_design; immutable afterwards, safe to
    share across threads and processes.  Covariate scalings and knot
    vectors are fitted at build time, so applying the builder to resampled
    rows of the same dataset reuses the original scale.
    """

    def __init__(self, spec, data):
        self.spec = spec
        self.columns = data.columns
        self.n_fitted = data.n
        missing = [c for c in spec.covariates() if c not in data.columns]
        if missing:
            raise SpecError(f"unknown covariates: {missing}; data has {data.columns}")

        scalers = {}
        knotvecs = {}
        centers = {}

        def smooth_parts(cov, rule, degree, placement):
            if cov not in scalers:
                scalers[cov] = RangeScaler.fit(data.column(cov), cov)
            if placement == "quantile":
                scaled = scalers[cov].transform(data.column(cov))
                kv = quantile_knots(scaled, degree, rule, n_obs=data.n)
            else:
                kv = make_knots(data.n, degree, rule)
            if kv.nbasis not in centers:
                centers[kv.nbasis] = sum_to_zero(kv.nbasis)
            return kv

        slots = []
        offset = 1 if spec.intercept else 0
        names = ["intercept"] if spec.intercept else []
        order = []
        for _, terms in spec.pieces:
            for t in terms:
                if t not in order:
                    order.append(t)
        for t in order:
            if isinstance(t, Spline):
                kv = smooth_parts(t.cov, t.knots, t.degree, t.placement)
                knotvecs[t] = (kv,)
                width = kv.nbasis - 1 if spec.intercept else kv.nbasis
                label = f"s({t.cov})"
                block = [f"{label}[{j}]" for j in range(width)]
            elif isinstance(t, Tensor):
                kvs = tuple(
                    smooth_parts(c, r, t.degree, t.placement)
                    for c, r in zip(t.covs, t.knots)
                )
                knotvecs[t] = kvs
                width = 1
                for kv in kvs:
                    width *= kv.nbasis - 1
                label = f"ti({','.join(t.covs)})"
                block = [f"{label}[{j}]" for j in range(width)]
            elif isinstance(t, Linear):
                width, block = 1, [t.cov]
            elif isinstance(t, Power):
                width, block = 1, [f"{t.cov}^{t.exponent:g}"]
            else:
                width, block = 1, [f"{t.name}({t.cov})"]
            slots.append((t, offset, width))
            names.extend(block)
            offset += width

        self.p = offset
        self.column_names = tuple(names)
        self._slots = tuple(slots)
        self._scalers = scalers
        self._knotvecs = knotvecs
        self._centers = centers
        self._piece_active = tuple(
            self._active_for(terms) for _, terms in spec.pieces
        )
        self._penalties = self._build_penalties()

    def _active_for(self, terms):
        cols = [0] if self.spec.intercept else []
        for t, start, width in self._slots:
            if t in terms:
                cols.extend(range(start, start + width))
        return np.asarray(cols, dtype=np.intp)

    def _center(self, kv):
        return self._centers[kv.nbasis]

    def _build_penalties(self):
        pens = []
        for t, start, width in self._slots:
            if not isinstance(t, (Spline, Tensor)) or t.lam == 0.0:
                continue
            kvs = self._knotvecs[t]
            sizes = [kv.nbasis for kv in kvs]
            for m in sizes:
                if m <= t.penalty_order:
                    raise SpecError(
                        f"penalty order {t.penalty_order} needs more than "
                        f"{t.penalty_order} basis functions, got {m}"
                    )
            quantile = t.placement == "quantile"
            if isinstance(t, Spline):
                if quantile:
                    d = divided_difference_matrix(kvs[0].greville(), t.penalty_order)
                else:
                    d = difference_matrix(sizes[0], t.penalty_order)
                mapped = [d @ self._center(kvs[0])] if self.spec.intercept else [d]
            else:
                zz = self._center(kvs[0])
                for kv in kvs[1:]:
                    zz = np.kron(zz, self._center(kv))
                sites = [kv.greville() for kv in kvs] if quantile else None
                mapped = [
                    p @ zz
                    for p in kron_penalties(sizes, t.penalty_order, sites)
                ]
            for rows in mapped:
                full = np.zeros((rows.shape[0], self.p))
                full[:, start : start + width] = rows
                pens.append(Penalty(rows=full, lam=t.lam))
        return tuple(pens)

    def penalties(self):
        """Per-term roughness penalties, embedded in the full column layout."""
        return self._penalties

    def active_columns(self, tau):
        """Indices of the columns that are structurally nonzero at tau."""
        return self._piece_active[self.spec.piece_index(tau)]

    def _term_block(self, term, data):
        if isinstance(term, Tensor):
            mats = []
            for cov, kv in zip(term.covs, self._knotvecs[term]):
                b = eval_basis(kv, self._scalers[cov].transform(data.column(cov)))
                mats.append(b @ self._center(kv))
            return row_kronecker(*mats)
        col = data.column(term.cov)
        if isinstance(term, Linear):
            return col[:, None]
        if isinstance(term, Power):
            return (col ** term.exponent)[:, None]
        if isinstance(term, Transform):
            return TRANSFORMS[term.name](col)[:, None]
        kv = self._knotvecs[term][0]
        b = eval_basis(kv, self._scalers[term.cov].transform(col))
        if self.spec.intercept:
            b = b @ self._center(kv)
        return b

    def design_matrix(self, data, tau):
        """The n x p design at quantile level tau.

        Columns of terms absent from tau's interval are zero.  Raises
        DomainError for tau outside (0,1) and SpecError when the data
        header does not match the one the builder was fitted on.
        """
        if data.columns != self.columns:
            raise SpecError(
                f"data columns {data.columns} do not match builder columns {self.columns}"
            )
        terms = self.spec.terms_at(tau)
        out = np.zeros((data.n, self.p))
        if self.spec.intercept:
            out[:, 0] = 1.0
        for t, start, width in self._slots:
            if t in terms:
                out[:, start : start + width] = self._term_block(t, data)
        return out


def build_design(spec, data):
    """Fit covariate scalings and freeze the column layout for a dataset."""
    return DesignBuilder(spec, data)


def design_matrix(builder, data, tau):
    return builder.design_matrix(data, tau)


class DesignTable:
    """Per-interval design matrices for one dataset, computed once.

    Design matrices are piecewise constant in tau, so one matrix per
    interval is enough.  subset() slices all cached matrices to a row
    index, which is how bootstrap resamples reuse the parent fit's
    scalings without recomputing basis evaluations.
    """

    def __init__(self, builder, data):
        self.builder = builder
        reps = [0.5 * (iv.lo + iv.hi) for iv, _ in builder.spec.pieces]
        self._mats = tuple(builder.design_matrix(data, r) for r in reps)

    @property
    def n(self):
        return self._mats[0].shape[0]

    @property
    def p(self):
        return self.builder.p

    def at(self, tau):
        return self._mats[self.builder.spec.piece_index(tau)]

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.intp)
        other = object.__new__(DesignTable)
        other.builder = self.builder
        other._mats = tuple(m[rows] for m in self._mats)
        return other
