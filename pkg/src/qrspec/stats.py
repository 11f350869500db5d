"""Cramer-von Mises distances between joint CDF estimates.

Every statistic here is a functional of the difference between two joint
CDF estimates evaluated at the sample points, integrated against the
empirical measure, which is simply an average over the observed (Y, X)
pairs.  The three test variants differ only in which pair of estimates
they compare:

    cm      empirical joint CDF   vs  model-implied joint CDF (parametric)
    cms     empirical joint CDF   vs  model-implied joint CDF (spline)
    cmstar  model-implied (flexible many-knot fit)  vs  model-implied (null)

The Kolmogorov-Smirnov variant of the distance is computed as a
diagnostic only and is not bootstrapped.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cdftools import ConditionalCdf

STATISTIC_KINDS = ("cm", "cms", "cmstar")


@dataclass(frozen=True, eq=False)
class TestStatistic:
    kind: str
    value: float
    n: int
    contributions: np.ndarray | None = field(default=None, repr=False)


def joint_indicator(x):
    """Componentwise dominance matrix: out[i, j] = 1{X_i <= X_j}."""
    x = np.asarray(x, dtype=float)
    out = np.ones((x.shape[0], x.shape[0]), dtype=bool)
    for d in range(x.shape[1]):
        out &= x[:, None, d] <= x[None, :, d]
    return out


def ecdf_at_sample(y, ind):
    """Empirical joint CDF at each sample point (Y_j, X_j)."""
    y = np.asarray(y, dtype=float)
    return ((y[:, None] <= y[None, :]) & ind).mean(axis=0)


def model_at_sample(ccdf, y, ind):
    """Model-implied joint CDF at each sample point.

    ccdf rows must line up with the rows of the indicator matrix: entry j
    is (1/n) sum_i 1{X_i <= X_j} F(Y_j | X_i).
    """
    return (ind * ccdf.cdf_matrix(y)).mean(axis=0)


class EmpiricalJoint:
    """Evaluator yielding the empirical joint CDF at the sample points."""

    def __call__(self, data):
        return ecdf_at_sample(data.y, joint_indicator(data.x))


class ModelJoint:
    """Evaluator yielding a fitted model's joint CDF at the sample points."""

    def __init__(self, proc):
        self.proc = proc

    def __call__(self, data):
        ccdf = ConditionalCdf.from_process(self.proc, data)
        return model_at_sample(ccdf, data.y, joint_indicator(data.x))


def cm_from_values(unrestricted_values, restricted_values, kind="cm"):
    """n times the mean squared CDF difference over the sample points."""
    u = np.asarray(unrestricted_values, dtype=float)
    r = np.asarray(restricted_values, dtype=float)
    n = u.size
    contributions = n * (u - r) ** 2
    return TestStatistic(
        kind=kind, value=float(contributions.mean()), n=n, contributions=contributions
    )


def ks_from_values(unrestricted_values, restricted_values):
    u = np.asarray(unrestricted_values, dtype=float)
    r = np.asarray(restricted_values, dtype=float)
    n = u.size
    return TestStatistic(kind="ks", value=float(np.sqrt(n) * np.abs(u - r).max()), n=n)


def cm_statistic(data, unrestricted, restricted, kind="cm"):
    """Cramer-von Mises distance between two joint-CDF evaluators."""
    return cm_from_values(unrestricted(data), restricted(data), kind=kind)


def ks_statistic(data, unrestricted, restricted):
    """sqrt(n) times the largest absolute CDF difference at sample points."""
    return ks_from_values(unrestricted(data), restricted(data))


def compute_statistic(data, kind, null_proc, flex_proc=None):
    """Evaluate one of the three test statistics for fitted processes.

    kind 'cm' and 'cms' compare the empirical joint CDF against the null
    model's; they differ only in what kind of specification was fitted.
    kind 'cmstar' replaces the empirical side with a flexible many-knot
    spline fit, which must be supplied as flex_proc.
    """
    if kind not in STATISTIC_KINDS:
        raise ValueError(f"kind must be one of {STATISTIC_KINDS}, got {kind!r}")
    ind = joint_indicator(data.x)
    if kind == "cmstar":
        if flex_proc is None:
            raise ValueError("kind 'cmstar' needs the flexible-fit process")
        flex = ConditionalCdf.from_process(flex_proc, data)
        u = model_at_sample(flex, data.y, ind)
    else:
        u = ecdf_at_sample(data.y, ind)
    null = ConditionalCdf.from_process(null_proc, data)
    r = model_at_sample(null, data.y, ind)
    return cm_from_values(u, r, kind=kind)
