"""Counterfactual decomposition of a distributional gap between groups.

The gap between two groups' tau-quantiles splits into a part explained
by their covariate distributions and a part attributed to differing
coefficient processes.  Both parts average model predictions over
covariate rows resampled from each group:

    explained(tau)   = mean_b [P(X_A_b, tau) - P(X_B_b, tau)] theta_A(tau)
    unexplained(tau) = mean_b [theta_A(tau) - theta_B(tau)] P(X_B_b, tau)

and their sum is the model-implied gap.  The raw gap, computed from the
unconditional sample quantiles, is reported next to it; the difference
is the residual the model leaves unexplained.

Both groups share one design builder fitted on the pooled rows, since
the subtraction theta_A - theta_B is meaningful only in a common column
space.  Replicate b resamples each group's covariate rows through one
shared uniform draw (idx = floor(u_b * n_group)), so two identical
groups decompose to exact zeros and swapping the groups negates the gap
exactly, not merely in distribution.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .modelspec import build_design
from .qreg import FitConfig, TauGrid, fit_process


class DecomposeError(RuntimeError):
    """A group's quantile process could not be fitted."""


MM_CSV_SCHEMA = "mm-table/v1"
MM_CSV_COLUMNS = (
    "tau", "raw_gap", "mm_gap", "explained", "unexplained",
    "pct_explained", "pct_unexplained", "residual",
)


@dataclass(frozen=True, eq=False)
class MmResult:
    """Per-level decomposition of the gap between groups A and B."""

    taus: tuple
    raw_gap: np.ndarray = field(repr=False)
    mm_gap: np.ndarray = field(repr=False)
    explained: np.ndarray = field(repr=False)
    unexplained: np.ndarray = field(repr=False)
    pct_explained: np.ndarray = field(repr=False)
    pct_unexplained: np.ndarray = field(repr=False)
    residual: np.ndarray = field(repr=False)
    n_draws: int = 0
    n_a: int = 0
    n_b: int = 0


def _sample_quantile(y, tau):
    # the same order-statistic convention the intercept-only fit uses
    return np.sort(y)[int(np.ceil(y.size * tau)) - 1]


def _group_process(data, builder, grid, config, label):
    try:
        return fit_process(data, builder, grid, config)
    except Exception as exc:
        raise DecomposeError(f"fitting group {label} failed: {exc}") from exc


def mm_decompose(
    data_a,
    data_b,
    spec,
    taus,
    n_draws=2500,
    seed=0,
    fit_config=FitConfig(),
    shared_fit=False,
):
    """Decompose the per-tau gap between groups A and B under one spec.

    Fits the quantile process of each group on a design built from the
    pooled rows, draws n_draws covariate rows per group (coupled through
    shared uniforms, see module docstring), and reports the explained
    and unexplained averages together with the raw quantile gap.  With
    shared_fit both groups reuse the pooled fit, which zeroes the
    unexplained term and leaves a covariate-only counterfactual.

    The reduction is a fixed-order mean over replicates, so results are
    deterministic in (seed, n_draws) regardless of scheduling.
    """
    taus = tuple(float(t) for t in taus)
    if not taus:
        raise ValueError("need at least one quantile level")
    grid = TauGrid(taus)
    if n_draws < 1:
        raise ValueError("n_draws must be at least 1")
    if data_a.columns != data_b.columns:
        raise ValueError(
            f"groups disagree on covariates: {data_a.columns} vs {data_b.columns}"
        )

    pooled = Dataset(
        y=np.concatenate([data_a.y, data_b.y]),
        x=np.vstack([data_a.x, data_b.x]),
        columns=data_a.columns,
    )
    builder = build_design(spec, pooled)
    if shared_fit:
        proc = _group_process(pooled, builder, grid, fit_config, "pooled")
        coef_a = coef_b = proc.coef
    else:
        coef_a = _group_process(data_a, builder, grid, fit_config, "A").coef
        coef_b = _group_process(data_b, builder, grid, fit_config, "B").coef

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    draws = rng.random(n_draws)
    rows_a = data_a.x[(draws * data_a.n).astype(np.intp)]
    rows_b = data_b.x[(draws * data_b.n).astype(np.intp)]
    sample_a = Dataset(y=np.zeros(n_draws), x=rows_a, columns=data_a.columns)
    sample_b = Dataset(y=np.zeros(n_draws), x=rows_b, columns=data_b.columns)

    explained = np.empty(len(taus))
    unexplained = np.empty(len(taus))
    raw = np.empty(len(taus))
    for k, tau in enumerate(taus):
        p_a = builder.design_matrix(sample_a, tau).mean(axis=0)
        p_b = builder.design_matrix(sample_b, tau).mean(axis=0)
        explained[k] = (p_a - p_b) @ coef_a[k]
        unexplained[k] = p_b @ (coef_a[k] - coef_b[k])
        raw[k] = _sample_quantile(data_a.y, tau) - _sample_quantile(data_b.y, tau)
    mm_gap = explained + unexplained

    scale = np.abs(explained) + np.abs(unexplained)
    with np.errstate(divide="ignore", invalid="ignore"):
        pct_explained = np.where(
            np.abs(mm_gap) > 1e-12 * np.maximum(scale, 1.0),
            100.0 * explained / mm_gap,
            np.nan,
        )
    pct_unexplained = np.where(np.isnan(pct_explained), np.nan,
                               100.0 - pct_explained)

    return MmResult(
        taus=taus,
        raw_gap=raw,
        mm_gap=mm_gap,
        explained=explained,
        unexplained=unexplained,
        pct_explained=pct_explained,
        pct_unexplained=pct_unexplained,
        residual=raw - mm_gap,
        n_draws=n_draws,
        n_a=data_a.n,
        n_b=data_b.n,
    )


def mm_table_rows(result):
    """Flatten a decomposition to CSV rows, one per quantile level."""
    rows = []
    for k, tau in enumerate(result.taus):
        rows.append({
            "tau": repr(float(tau)),
            "raw_gap": repr(float(result.raw_gap[k])),
            "mm_gap": repr(float(result.mm_gap[k])),
            "explained": repr(float(result.explained[k])),
            "unexplained": repr(float(result.unexplained[k])),
            "pct_explained": repr(float(result.pct_explained[k])),
            "pct_unexplained": repr(float(result.pct_unexplained[k])),
            "residual": repr(float(result.residual[k])),
        })
    return rows


def write_mm_csv(path, result):
    """Write the versioned decomposition table (schema mm-table/v1)."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MM_CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(mm_table_rows(result))
