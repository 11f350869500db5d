"""Quantile process estimation on a grid of levels.

fit_tau solves one weighted check-loss problem for a single level;
fit_process runs a whole grid, batching levels that share an interval of
the piecewise specification through the interior point solver.  Fits are
independent across levels: no non-crossing constraint is imposed, since
the conditional CDF construction downstream restores monotonicity by
sorting.

Columns that are structurally zero at a level (terms absent from the
level's interval) are dropped before solving and their coefficients are
reported as exact zeros.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg as sla

from .data import Dataset
from .lp import ConvergenceError, solve_ip, solve_ip_batch, solve_simplex
from .modelspec import DesignBuilder, DesignTable


class SingularDesignError(ValueError):
    """Design matrix is rank deficient (or has too few rows)."""


def check_loss(u, tau):
    """Check function rho_tau(u) = u * (tau - 1{u < 0}), elementwise."""
    tau = np.asarray(tau, dtype=float)
    if not ((tau > 0) & (tau < 1)).all():
        raise ValueError("tau must lie strictly inside (0, 1)")
    u = np.asarray(u, dtype=float)
    return u * (tau - (u < 0))


@dataclass(frozen=True)
class TauGrid:
    """Strictly increasing quantile levels inside [eps, 1-eps]."""

    levels: tuple
    eps: float = 0.0

    def __post_init__(self):
        levels = tuple(float(t) for t in self.levels)
        if not levels:
            raise ValueError("grid has no levels")
        arr = np.asarray(levels)
        if not ((arr > 0) & (arr < 1)).all():
            raise ValueError("levels must lie strictly inside (0, 1)")
        if not (np.diff(arr) > 0).all():
            raise ValueError("levels must be strictly increasing")
        object.__setattr__(self, "levels", levels)
        eps = self.eps
        if eps == 0.0:
            eps = min(levels[0], 1.0 - levels[-1])
        if not (0 < eps <= levels[0] and levels[-1] <= 1 - eps + 1e-12):
            raise ValueError(f"levels must lie in [{eps}, {1 - eps}]")
        object.__setattr__(self, "eps", float(eps))

    def __len__(self):
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    @staticmethod
    def _arange(start, stop, step):
        count = int(np.floor((stop - start) / step + 1e-9)) + 1
        return tuple(round(start + k * step, 12) for k in range(count))

    @classmethod
    def default(cls):
        """tau in {0.01, 0.02, ..., 0.99}; dense enough for CDF inversion."""
        return cls(cls._arange(0.01, 0.99, 0.01))

    @classmethod
    def coarse(cls):
        """tau in {0.1, ..., 0.9}."""
        return cls(cls._arange(0.1, 0.9, 0.1))

    @classmethod
    def fine(cls):
        """tau in {0.02, 0.04, ..., 0.98}."""
        return cls(cls._arange(0.02, 0.98, 0.02))

    @classmethod
    def from_string(cls, text):
        """Parse 'start:stop:step', endpoints inclusive."""
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError(f"expected 'start:stop:step', got {text!r}")
        try:
            start, stop, step = (float(p) for p in parts)
        except ValueError:
            raise ValueError(f"non-numeric grid bounds in {text!r}")
        if step <= 0 or not (0 < start <= stop < 1):
            raise ValueError(f"bad grid range {text!r}")
        return cls(cls._arange(start, stop, step))


@dataclass(frozen=True)
class FitConfig:
    """Solver and penalty knobs.

    lam scales every term-level penalty weight (0 switches penalties off);
    penalty_order is the difference order handed to spline terms built
    from config knobs rather than explicit specifications.  solver picks
    the LP route: 'interior-point', 'simplex', or 'auto', which uses the
    simplex for tiny problems (rows times columns below tiny_threshold)
    where its vertex solutions give the documented tie behavior.
    """

    lam: float = 1.0
    penalty_order: int = 2
    tol: float = 1e-9
    max_iter: int = 80
    solver: str = "auto"
    tiny_threshold: int = 5000

    def __post_init__(self):
        if self.lam < 0 or not np.isfinite(self.lam):
            raise ValueError("lam must be finite and >= 0")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.solver not in ("auto", "interior-point", "simplex"):
            raise ValueError(f"unknown solver {self.solver!r}")


def _check_rank(x, names, n_data, pen_rows):
    # The penalized objective is coercive iff the design stacked with the
    # penalty rows has full column rank, so that is the matrix to test;
    # with no active penalty this reduces to a plain design rank check.
    n, p = x.shape
    if n_data <= p:
        raise SingularDesignError(
            f"need more observations than active columns: n={n_data}, p={p}"
        )
    system = x if pen_rows.shape[0] == 0 else np.vstack([x, pen_rows])
    r = sla.qr(system, mode="r", pivoting=True)
    diag = np.abs(np.diag(r[0]))
    piv = r[1]
    tol = (diag[0] if diag.size else 0.0) * max(system.shape) * np.finfo(float).eps
    rank = int((diag > tol).sum())
    if rank < p:
        bad = [names[j] for j in piv[rank:]]
        raise SingularDesignError(f"design is rank deficient; offending columns: {bad}")


def _penalty_system(builder, active, lam_scale):
    rows, weights = [], []
    for pen in builder.penalties():
        lam = lam_scale * pen.lam
        if lam == 0.0:
            continue
        block = pen.rows[:, active]
        if not block.any():
            continue
        rows.append(block)
        weights.append(np.full(block.shape[0], 2.0 * lam))
    if not rows:
        return np.empty((0, len(active))), np.empty(0)
    return np.vstack(rows), np.concatenate(weights)


def _route(config, n_rows, n_cols):
    if config.solver == "auto":
        return "simplex" if n_rows * n_cols < config.tiny_threshold else "interior-point"
    return config.solver


@dataclass(frozen=True)
class QuantileProcess:
    """Per-level coefficients of a fitted quantile regression process."""

    grid: TauGrid
    coef: np.ndarray
    builder: DesignBuilder
    config: FitConfig
    diagnostics: tuple

    def predict_table(self, table):
        """Fitted quantiles for the rows of a prepared DesignTable, (n, m)."""
        levels = self.grid.levels
        out = np.empty((table.n, len(levels)))
        for j, tau in enumerate(levels):
            out[:, j] = table.at(tau) @ self.coef[j]
        return out

    def predict(self, data):
        """Fitted quantiles at every grid level for each row, (n, m)."""
        return self.predict_table(DesignTable(self.builder, data))


def fit_tau(data, builder, tau, config=FitConfig()):
    """Minimize the penalized check loss at a single level.

    Returns the full-width coefficient vector; columns outside tau's
    interval are zero.  Raises SingularDesignError for rank-deficient
    designs and ConvergenceError (with the level attached) if the solver
    stalls.
    """
    if builder.spec.structure == "ls":
        raise ValueError(
            "a location-shift spec couples the levels; fit the whole process"
        )
    x_full = builder.design_matrix(data, tau)
    active = builder.active_columns(tau)
    x = x_full[:, active]
    names = [builder.column_names[j] for j in active]
    pen_rows, pen_w = _penalty_system(builder, active, config.lam)
    _check_rank(x, names, data.n, pen_rows)
    x_aug = np.vstack([x, pen_rows])
    y_aug = np.concatenate([data.y, np.zeros(len(pen_w))])
    w_aug = np.concatenate([np.ones(data.n), pen_w])
    t_aug = np.concatenate([np.full(data.n, tau), np.full(len(pen_w), 0.5)])
    route = _route(config, *x_aug.shape)
    if route == "simplex":
        beta = solve_simplex(x_aug, y_aug, t_aug, w_aug)
    else:
        try:
            beta, _ = solve_ip(x_aug, y_aug, t_aug, w_aug, config.tol, config.max_iter)
        except ConvergenceError as exc:
            raise ConvergenceError(f"tau={tau}: {exc}", exc.trace)
    out = np.zeros(builder.p)
    out[active] = beta
    return out


def fit_table(response, table, grid, config=FitConfig()):
    """Fit every grid level against a prepared DesignTable.

    The workhorse behind fit_process; bootstrap replicates call it with
    row-subset tables so basis evaluations are never recomputed.  Specs
    declaring ``structure: ls`` are routed to the location-shift fit; all
    others get independent per-level solves.
    """
    if table.builder.spec.structure == "ls":
        return _fit_table_ls(response, table, grid, config)
    return _fit_table_free(response, table, grid, config)


def _fit_table_free(response, table, grid, config):
    """Independent per-level fits.  Levels sharing an interval are solved
    as one interior point batch; levels the batch solver fails on are
    retried once through the simplex before giving up."""
    y = np.asarray(response, dtype=float)
    builder = table.builder
    if y.shape != (table.n,):
        raise ValueError(f"response has shape {y.shape}, expected ({table.n},)")
    levels = np.asarray(grid.levels)
    coef = np.zeros((len(levels), builder.p))
    diags = [None] * len(levels)
    piece_of = np.array([builder.spec.piece_index(t) for t in levels])
    for piece in np.unique(piece_of):
        idx = np.flatnonzero(piece_of == piece)
        taus = levels[idx]
        active = builder.active_columns(taus[0])
        x = table.at(taus[0])[:, active]
        names = [builder.column_names[j] for j in active]
        pen_rows, pen_w = _penalty_system(builder, active, config.lam)
        _check_rank(x, names, table.n, pen_rows)
        x_aug = np.vstack([x, pen_rows])
        y_aug = np.concatenate([y, np.zeros(len(pen_w))])
        w_aug = np.concatenate([np.ones(table.n), pen_w])
        route = _route(config, x_aug.shape[0], x_aug.shape[1])
        if route == "simplex":
            for j, tau in zip(idx, taus):
                t_row = np.concatenate(
                    [np.full(table.n, tau), np.full(len(pen_w), 0.5)]
                )
                coef[j, active] = solve_simplex(x_aug, y_aug, t_row, w_aug)
                diags[j] = {"tau": tau, "solver": "simplex", "converged": True}
            continue
        tau_rows = np.empty((len(idx), x_aug.shape[0]))
        tau_rows[:, : table.n] = taus[:, None]
        tau_rows[:, table.n :] = 0.5
        batch, batch_diags = solve_ip_batch(
            x_aug, y_aug, tau_rows, w_aug, config.tol, config.max_iter
        )
        for k, j in enumerate(idx):
            d = batch_diags[k]
            if d["converged"]:
                coef[j, active] = batch[k]
                diags[j] = {
                    "tau": taus[k],
                    "solver": "interior-point",
                    "converged": True,
                    "iterations": d["iterations"],
                    "gap": d["gap"],
                }
            else:
                try:
                    coef[j, active] = solve_simplex(
                        x_aug, y_aug, tau_rows[k], w_aug
                    )
                except ConvergenceError as exc:
                    raise ConvergenceError(
                        f"tau={taus[k]}: no solver converged ({exc})", d["trace"]
                    )
                diags[j] = {
                    "tau": taus[k],
                    "solver": "simplex-rescue",
                    "converged": True,
                    "iterations": d["iterations"],
                    "gap": d["gap"],
                }
    return coef, tuple(diags)


def _fit_table_ls(response, table, grid, config):
    """Location-shift fit: pooled slopes plus a residual quantile intercept.

    The free per-level fits supply slope estimates whose grid average pools
    the information under the shared-slope hypothesis; the intercept at each
    level is then the matching order statistic of the pooled-slope
    residuals, the same value an intercept-only check-loss fit returns.
    The declared structure requires a single interval and an intercept, so
    the design is the same at every level and the intercept is column 0.
    """
    coef, diags = _fit_table_free(response, table, grid, config)
    y = np.asarray(response, dtype=float)
    shared = coef.mean(axis=0)
    shared[0] = 0.0
    resid = np.sort(y - table.at(grid.levels[0]) @ shared)
    out = np.tile(shared, (len(grid.levels), 1))
    for j, tau in enumerate(grid.levels):
        out[j, 0] = resid[int(np.ceil(table.n * tau)) - 1]
    return out, diags


def fit_process(data, builder, grid, config=FitConfig()):
    """Fit the whole quantile process for a dataset."""
    table = DesignTable(builder, data)
    coef, diags = fit_table(data.y, table, grid, config)
    return QuantileProcess(
        grid=grid, coef=coef, builder=builder, config=config, diagnostics=diags
    )


def subgradient_gap(data, process):
    """Worst optimality violation across levels, for diagnostics.

    At an exact optimum, for every column j of the augmented design,
    |sum_i w_i P_ij (tau_i - 1{r_i < 0})| cannot exceed the mass
    sum over zero-residual rows of w_i |P_ij|.  Returns the largest
    excess over that bound; healthy fits give values near zero.
    """
    builder = process.builder
    table = DesignTable(builder, data)
    scale = 1.0 + float(np.mean(np.abs(data.y)))
    zero_tol = 1e-6 * scale
    worst = 0.0
    for j, tau in enumerate(process.grid.levels):
        active = builder.active_columns(tau)
        x = table.at(tau)[:, active]
        pen_rows, pen_w = _penalty_system(builder, active, process.config.lam)
        x_aug = np.vstack([x, pen_rows])
        w_aug = np.concatenate([np.ones(data.n), pen_w])
        t_aug = np.concatenate([np.full(data.n, tau), np.full(len(pen_w), 0.5)])
        r = np.concatenate([data.y, np.zeros(len(pen_w))]) - x_aug @ process.coef[j, active]
        psi = w_aug * (t_aug - (r < -zero_tol))
        grad = np.abs(psi @ x_aug)
        slack = (w_aug * (np.abs(r) <= zero_tol)) @ np.abs(x_aug)
        worst = max(worst, float((grad - slack).max()))
    return worst


def cv_lambda(data, builder, grid, lambdas, config=FitConfig(), n_folds=5, seed=0):
    """Pick the penalty multiplier by k-fold cross-validated check loss.

    Rows are shuffled once with the given seed, then cut into contiguous
    folds.  Scalings and knots stay fixed at their full-sample values.
    Returns (best_lambda, scores) with one mean-loss score per candidate;
    ties go to the smaller lambda.
    """
    lambdas = [float(l) for l in lambdas]
    if not lambdas:
        raise ValueError("no lambda candidates")
    table = DesignTable(builder, data)
    rng = np.random.default_rng(seed)
    order = rng.permutation(data.n)
    folds = np.array_split(order, n_folds)
    levels = np.asarray(grid.levels)
    scores = []
    for lam in lambdas:
        cfg = FitConfig(
            lam=lam, penalty_order=config.penalty_order, tol=config.tol,
            max_iter=config.max_iter, solver=config.solver,
            tiny_threshold=config.tiny_threshold,
        )
        total, count = 0.0, 0
        for fold in folds:
            val = np.sort(fold)
            train = np.sort(np.setdiff1d(order, fold))
            coef, _ = fit_table(data.y[train], table.subset(train), grid, cfg)
            sub = table.subset(val)
            for j, tau in enumerate(levels):
                pred = sub.at(tau) @ coef[j]
                total += float(check_loss(data.y[val] - pred, tau).sum())
            count += len(val) * len(levels)
        scores.append(total / count)
    best = int(np.argmin(scores))
    return lambdas[best], tuple(scores)
