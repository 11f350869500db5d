"""Resampling-based critical values for the CDF-distance statistics.

The scheme imposes the null hypothesis on every synthetic sample:
covariate rows are redrawn with replacement from the observed rows,
responses are regenerated from the null fit on the *original* sample by
inverse transform sampling, and the whole statistic pipeline (model
refits included) is replayed on the synthetic data.  The observed
statistic is then located within the replicate distribution.

Replicate b draws its randomness from counter-based streams keyed by
(seed, b), never from a shared sequential stream, so results are
identical for any worker count or scheduling order.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cdftools import ConditionalCdf
from .lp import ConvergenceError
from .modelspec import DesignTable, build_design
from .qreg import FitConfig, QuantileProcess, SingularDesignError, fit_table
from .stats import (
    STATISTIC_KINDS,
    TestStatistic,
    cm_from_values,
    ecdf_at_sample,
    joint_indicator,
    model_at_sample,
)


class BootstrapError(RuntimeError):
    """Too many replicate fits failed to trust the resampled distribution."""


@dataclass(frozen=True)
class BootstrapConfig:
    """Replication count, RNG seed, significance levels and parallelism.

    levels are the significance levels critical values are reported at.
    max_failure_share caps the tolerated fraction of replicates whose
    refit fails; failures below the cap are skipped with a warning, above
    it the run aborts.  refit_flexible controls whether the flexible side
    of the model-vs-model statistic is re-estimated inside each replicate
    (the default) or frozen at its original fit, kept as a knob for
    sensitivity checks.
    """

    n_replicates: int = 500
    seed: int = 0
    levels: tuple = (0.01, 0.05, 0.10)
    n_workers: int = 1
    max_failure_share: float = 0.05
    refit_flexible: bool = True

    def __post_init__(self):
        if self.n_replicates < 1:
            raise ValueError("n_replicates must be at least 1")
        levels = tuple(float(q) for q in self.levels)
        if not levels or not all(0.0 < q < 1.0 for q in levels):
            raise ValueError("levels must be a nonempty tuple inside (0, 1)")
        object.__setattr__(self, "levels", levels)
        if not 0.0 <= self.max_failure_share < 1.0:
            raise ValueError("max_failure_share must lie in [0, 1)")
        if self.n_workers < 1:
            raise ValueError("n_workers must be at least 1")


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    """Observed statistic placed within its replicate distribution."""

    observed: TestStatistic
    replicates: np.ndarray
    critical_values: dict
    p_value: float
    n_failed: int
    messages: tuple = ()
    null_process: QuantileProcess | None = field(default=None, repr=False)
    flex_process: QuantileProcess | None = field(default=None, repr=False)

    def reject(self, level):
        """True when the observed value exceeds the critical value."""
        return self.observed.value > self.critical_values[float(level)]


def p_value(replicates, observed):
    """Finite-sample corrected p-value, (1 + #{S_b >= S_obs}) / (B + 1).

    The +1 correction counts the observed statistic as one more draw from
    the null distribution, so the result is never exactly zero.
    """
    reps = np.asarray(replicates, dtype=float)
    return float((1 + (reps >= observed).sum()) / (reps.size + 1))


def critical_values(replicates, levels):
    """Empirical upper quantiles of the replicates at each level.

    The critical value at level q is the order statistic at 1-based rank
    ceil((1 - q) * B) of the ascending-sorted replicates.
    """
    reps = np.sort(np.asarray(replicates, dtype=float))
    if reps.size == 0:
        raise ValueError("no replicates to take quantiles of")
    out = {}
    for q in levels:
        q = float(q)
        if not 0.0 < q < 1.0:
            raise ValueError(f"level must lie in (0, 1), got {q}")
        rank = int(np.ceil((1.0 - q) * reps.size))
        rank = min(max(rank, 1), reps.size)
        out[q] = float(reps[rank - 1])
    return out


def _predictions(table, grid, coef):
    out = np.empty((table.n, len(grid.levels)))
    for j, tau in enumerate(grid.levels):
        out[:, j] = table.at(tau) @ coef[j]
    return out


@dataclass(frozen=True)
class _ReplicatePlan:
    """Everything one replicate needs, picklable for worker processes."""

    kind: str
    n: int
    grid: object
    fit_config: FitConfig
    seed: int
    refit_flexible: bool
    ind: np.ndarray
    sampler: ConditionalCdf
    null_table: DesignTable
    flex_table: DesignTable | None
    flex_preds: np.ndarray | None

    def _stream(self, b, slot):
        seq = np.random.SeedSequence(self.seed, spawn_key=(b, slot))
        return np.random.Generator(np.random.Philox(seq))

    def run(self, b):
        idx = self._stream(b, 0).integers(0, self.n, size=self.n)
        u = self._stream(b, 1).random(self.n)
        y_b = self.sampler.quantile(idx, u)
        ind_b = self.ind[np.ix_(idx, idx)]
        try:
            null_sub = self.null_table.subset(idx)
            coef_b, _ = fit_table(y_b, null_sub, self.grid, self.fit_config)
            null_cdf = ConditionalCdf(_predictions(null_sub, self.grid, coef_b))
            restricted = model_at_sample(null_cdf, y_b, ind_b)
            if self.kind == "cmstar":
                if self.refit_flexible:
                    flex_sub = self.flex_table.subset(idx)
                    coef_f, _ = fit_table(y_b, flex_sub, self.grid, self.fit_config)
                    preds_f = _predictions(flex_sub, self.grid, coef_f)
                else:
                    preds_f = self.flex_preds[idx]
                unrestricted = model_at_sample(ConditionalCdf(preds_f), y_b, ind_b)
            else:
                unrestricted = ecdf_at_sample(y_b, ind_b)
        except (ConvergenceError, SingularDesignError) as exc:
            return b, float("nan"), f"replicate {b}: {exc}"
        return b, cm_from_values(unrestricted, restricted, self.kind).value, None


def _chunk_worker(plan, indices):
    return [plan.run(b) for b in indices]


def run_bootstrap(
    data,
    null_spec,
    kind,
    grid,
    fit_config=FitConfig(),
    config=BootstrapConfig(),
    flex_spec=None,
):
    """Bootstrap one of the specification statistics on a dataset.

    Fits the null model (and, for kind 'cmstar', the flexible model) on
    the original data, computes the observed statistic, then replays the
    four resampling steps n_replicates times: redraw covariate rows,
    regenerate responses from the original null fit, refit, re-evaluate.
    Raises BootstrapError when more than max_failure_share of the
    replicate fits fail; isolated failures are skipped with a warning.
    """
    if kind not in STATISTIC_KINDS:
        raise ValueError(f"kind must be one of {STATISTIC_KINDS}, got {kind!r}")
    if kind == "cmstar" and flex_spec is None:
        raise ValueError("kind 'cmstar' needs flex_spec for the flexible fit")

    null_builder = build_design(null_spec, data)
    null_table = DesignTable(null_builder, data)
    null_coef, null_diags = fit_table(data.y, null_table, grid, fit_config)
    null_proc = QuantileProcess(
        grid=grid, coef=null_coef, builder=null_builder,
        config=fit_config, diagnostics=null_diags,
    )
    null_preds = _predictions(null_table, grid, null_coef)
    ind = joint_indicator(data.x)
    restricted = model_at_sample(ConditionalCdf(null_preds), data.y, ind)

    flex_table = flex_preds = flex_proc = None
    if kind == "cmstar":
        flex_builder = build_design(flex_spec, data)
        flex_table = DesignTable(flex_builder, data)
        flex_coef, flex_diags = fit_table(data.y, flex_table, grid, fit_config)
        flex_proc = QuantileProcess(
            grid=grid, coef=flex_coef, builder=flex_builder,
            config=fit_config, diagnostics=flex_diags,
        )
        flex_preds = _predictions(flex_table, grid, flex_coef)
        unrestricted = model_at_sample(ConditionalCdf(flex_preds), data.y, ind)
    else:
        unrestricted = ecdf_at_sample(data.y, ind)
    observed = cm_from_values(unrestricted, restricted, kind)

    plan = _ReplicatePlan(
        kind=kind, n=data.n, grid=grid, fit_config=fit_config,
        seed=config.seed, refit_flexible=config.refit_flexible, ind=ind,
        sampler=ConditionalCdf(null_preds), null_table=null_table,
        flex_table=flex_table, flex_preds=flex_preds,
    )
    b_total = config.n_replicates
    results = [None] * b_total
    if config.n_workers > 1 and b_total > 1:
        chunks = np.array_split(np.arange(b_total), min(config.n_workers, b_total))
        with ProcessPoolExecutor(max_workers=config.n_workers) as pool:
            futures = [
                pool.submit(_chunk_worker, plan, chunk.tolist())
                for chunk in chunks if chunk.size
            ]
            for fut in futures:
                for b, value, message in fut.result():
                    results[b] = (value, message)
    else:
        for b in range(b_total):
            _, value, message = plan.run(b)
            results[b] = (value, message)

    values = np.array([v for v, _ in results])
    messages = tuple(m for _, m in results if m is not None)
    ok = ~np.isnan(values)
    n_failed = int((~ok).sum())
    if n_failed == b_total or n_failed > config.max_failure_share * b_total:
        raise BootstrapError(
            f"{n_failed} of {b_total} bootstrap replicates failed to fit; "
            f"first failure: {messages[0] if messages else 'unknown'}"
        )
    if n_failed:
        warnings.warn(
            f"skipped {n_failed} of {b_total} bootstrap replicates whose "
            "refit failed",
            RuntimeWarning,
            stacklevel=2,
        )
    replicates = np.sort(values[ok])
    return BootstrapResult(
        observed=observed,
        replicates=replicates,
        critical_values=critical_values(replicates, config.levels),
        p_value=p_value(replicates, observed.value),
        n_failed=n_failed,
        messages=messages,
        null_process=null_proc,
        flex_process=flex_proc,
    )
