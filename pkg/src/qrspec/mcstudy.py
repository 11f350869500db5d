"""Simulation designs and size/power experiments.

draw_dgp samples one of seventeen catalogued data generating processes;
preset_spec builds the matching catalogue of model specifications
(univariate parametric forms S1-S5, bivariate smooth forms B1-B6,
trivariate smooth forms T1-T5 and S6-S13).  run_mc drives repeated
draw/test cycles and reports rejection frequencies per significance
level, with results exportable as a versioned CSV table and report
dictionary.

Quantile-level conditions with strict inequalities (such as "interactions
only outside the 0.25..0.75 band") are encoded on the closed-left
interval partition by shifting the strict boundary up by half of the
finest supported grid step (0.005), so every grid with step >= 0.01
lands each level in the intended branch.
"""

from __future__ import annotations

import csv
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .bootstrap import BootstrapConfig, BootstrapError, run_bootstrap
from .data import Dataset
from .lp import ConvergenceError
from .modelspec import Interval, Linear, ModelSpec, Power, Spline, Tensor
from .qreg import FitConfig, SingularDesignError

_HALF_STEP = 0.005

_DGP_COLUMNS = {
    1: ("x0",), 2: ("x0",), 3: ("x0",),
    4: ("x1", "x2"), 5: ("x1", "x2"), 6: ("x1", "x2"),
    7: ("x1", "x2"), 8: ("x1", "x2"),
    9: ("x3", "x2"),
    10: ("x3",), 11: ("x3",), 12: ("x3",),
    13: ("x1", "x2"), 14: ("x1", "x2"), 15: ("x3", "x4"),
    16: ("x2", "x5"), 17: ("x1", "x2", "x3"),
}


class McError(RuntimeError):
    """Too many Monte Carlo repetitions failed to report a frequency."""


@dataclass(frozen=True)
class DgpSpec:
    """Which process to sample, at what size, with which parameters.

    gamma1 only matters for process 9, where it scales the covariate
    dependence of the noise (0 gives a pure location-shift model).
    """

    dgp: int
    n: int
    gamma1: float = 0.5

    def __post_init__(self):
        if self.dgp not in _DGP_COLUMNS:
            raise ValueError(f"unknown dgp identifier {self.dgp}; expected 1..17")
        if self.n < 30:
            raise ValueError(f"n must be at least 30, got {self.n}")

    @property
    def columns(self):
        return _DGP_COLUMNS[self.dgp]


def skew_normal(rng, loc, scale, shape, size=None):
    """Location-scale-shape skew normal draws.

    Uses the two-normal representation: with delta = shape/sqrt(1+shape^2),
    z = delta*|n0| + sqrt(1-delta^2)*n1 is standard skew normal with
    shape parameter `shape`; the result is loc + scale*z.  All three
    parameters broadcast.
    """
    if size is None:
        size = np.broadcast(loc, scale, shape).shape
    shape = np.asarray(shape, dtype=float)
    delta = shape / np.sqrt(1.0 + shape**2)
    n0 = rng.standard_normal(size)
    n1 = rng.standard_normal(size)
    z = delta * np.abs(n0) + np.sqrt(1.0 - delta**2) * n1
    return np.asarray(loc, dtype=float) + np.asarray(scale, dtype=float) * z


def _open_uniform(rng, n):
    # uniform draws strictly inside (0,1); a plain rng.random can return
    # an exact 0.0 which the inverse-transform maps to -inf
    return rng.integers(1, 2**53, size=n) / 2.0**53


def draw_dgp(spec, rng):
    """Sample one dataset from the catalogued process.

    rng is a numpy Generator; every randomness source of the process is
    drawn from it in a fixed order, so equal states give equal datasets.
    """
    n = spec.n
    d = spec.dgp
    if d in (1, 2, 3):
        x0 = rng.uniform(0.0, 2.0 * np.pi, n)
        u = rng.standard_normal(n)
        if d == 1:
            y = x0 / 4.0 + 1.0 + u
        elif d == 2:
            y = x0 / 4.0 + 1.0 + u * x0
        else:
            y = x0**2 / 4.0 + 1.0 + u * x0**2
        x = x0[:, None]
    elif d in (4, 5, 6, 7, 8):
        x1 = rng.integers(0, 2, n).astype(float)
        x2 = rng.standard_normal(n)
        if d == 5:
            # sign-flipped chi-square noise, normalized to unit variance;
            # the flip reuses the binary covariate itself
            y = x1 + x2 + (1.0 - 2.0 * x1) * rng.chisquare(2, n) / np.sqrt(8.0)
        else:
            u = rng.standard_normal(n)
            if d == 4:
                y = x1 + x2 + u
            elif d == 6:
                y = x1 + x2 + (0.5 + x1) * u
            elif d == 7:
                y = x1 + x2 + np.sqrt(0.5 + x1 + x2**2) * u
            else:
                y = x1 + x2 + 0.2 * (0.5 + x1 + x2**2) ** 1.5 * u
        x = np.column_stack([x1, x2])
    elif d == 9:
        x3 = rng.uniform(0.0, 1.0, n)
        x2 = rng.standard_normal(n)
        y = x3 + (1.0 + spec.gamma1 * x2) * rng.standard_normal(n)
        x = np.column_stack([x3, x2])
    elif d == 10:
        x3 = rng.uniform(0.0, 1.0, n)
        tau_star = _open_uniform(rng, n)
        z = ndtri(tau_star)
        upper = x3**2 / 4.0 + 1.0 + z * x3**2 / 2.0
        lower = -(x3**2) / 4.0 + 1.0 + z * x3
        y = np.where(tau_star >= 0.5, upper, lower)
        x = x3[:, None]
    elif d == 11:
        x3 = rng.uniform(0.0, 1.0, n)
        y = np.sin(-np.pi / 2.0 + x3**3) + rng.normal(0.0, np.sqrt(0.1), n)
        x = x3[:, None]
    elif d == 12:
        x3 = rng.uniform(0.0, 1.0, n)
        y = np.exp(x3 + rng.standard_normal(n))
        x = x3[:, None]
    elif d in (13, 14):
        x1 = rng.uniform(-4.0, 4.0, n)
        x2 = rng.normal(5.0, 1.0, n)
        if d == 13:
            y = 7.0 * np.sin(x1 * x2) + x1
        else:
            z1 = skew_normal(rng, x1 + x2**2, 2.0 + np.sin(2.0 * x1), x1 / 4.0)
            y = np.sin(x1 * x2) + x1 * x2**2 + z1
        x = np.column_stack([x1, x2])
    elif d == 15:
        x3 = rng.uniform(0.0, 1.0, n)
        x4 = rng.uniform(0.0, 1.0, n)
        y = 1.0 + 2.0 * x3 + 4.0 * x4 + 70.0 * np.cos(x3 * x4) + rng.standard_normal(n)
        x = np.column_stack([x3, x4])
    elif d == 16:
        x2 = rng.normal(5.0, 1.0, n)
        x5 = rng.uniform(-10.0, 10.0, n)
        u = rng.standard_normal(n)
        z1 = skew_normal(rng, x2 + x5**2, 2.0 + np.sin(2.0 * x2), x2 / 4.0)
        y = x2**2 * x5 + x2 * u + np.cos(x2 * u) + z1
        x = np.column_stack([x2, x5])
    else:
        x1 = rng.uniform(-4.0, 4.0, n)
        x2 = rng.normal(5.0, 1.0, n)
        x3 = rng.uniform(0.0, 1.0, n)
        z2 = skew_normal(rng, x2 + x3**2, 5.0 + np.sin(x1) * x3, x3)
        y = x1 + np.sin(x2) * x3 + z2
        x = np.column_stack([x1, x2, x3])
    return Dataset(y=y, x=x, columns=spec.columns)


def linear_spec(dgp):
    """Intercept plus one free linear term per covariate of the process."""
    if dgp not in _DGP_COLUMNS:
        raise ValueError(f"unknown dgp identifier {dgp}")
    return ModelSpec.whole([Linear(c) for c in _DGP_COLUMNS[dgp]])


def ls_spec(dgp):
    """Location-shift null: linear with slopes shared across levels.

    Process 9 with gamma1 = 0 satisfies this hypothesis; with gamma1 > 0
    the x2 slope drifts across levels, which a free linear fit captures
    but this restricted class cannot.
    """
    if dgp not in _DGP_COLUMNS:
        raise ValueError(f"unknown dgp identifier {dgp}")
    return ModelSpec.whole(
        [Linear(c) for c in _DGP_COLUMNS[dgp]], structure="ls"
    )


def true_spec(dgp):
    """The correctly specified parametric form, where one exists.

    Only the processes whose conditional quantiles are linear in some
    fixed transformation vector have one: 1, 2, 4, 5, 6 and 9 (with
    gamma1 = 0) are linear, 3 is quadratic.
    """
    if dgp in (1, 2):
        return ModelSpec.whole([Linear("x0")])
    if dgp == 3:
        return ModelSpec.whole([Power("x0", 2)])
    if dgp in (4, 5, 6):
        return ModelSpec.whole([Linear("x1"), Linear("x2")])
    if dgp == 9:
        return ModelSpec.whole([Linear("x3")])
    raise ValueError(f"no closed-form correct specification for dgp {dgp}")


def make_flexible_spec(data, degree=2, knots="sqrt-n", lam=1.0, penalty_order=2,
                       min_distinct=6):
    """Additive many-knot spline specification for the flexible fit.

    One penalized spline per covariate; columns with fewer than
    min_distinct distinct values (binary dummies and the like) enter
    linearly instead, since a spline basis on two support points is rank
    deficient by construction.

    Knots sit at sample quantiles rather than uniformly: with sqrt-n knots
    a long-tailed covariate leaves uniform outer intervals empty and the
    design rank deficient, while quantile placement guarantees an equal
    share of observations between consecutive knots.
    """
    terms = []
    for j, c in enumerate(data.columns):
        if np.unique(data.x[:, j]).size < min_distinct:
            terms.append(Linear(c))
        else:
            terms.append(Spline(c, knots=knots, degree=degree, lam=lam,
                                penalty_order=penalty_order,
                                placement="quantile"))
    return ModelSpec.whole(terms)


def preset_spec(name, columns=None, knots=5, degree=3, lam=1.0, penalty_order=2):
    """Catalogued model specifications by name.

    S1-S5 are univariate parametric forms (linear / squared, possibly
    switching between quantile regions); columns defaults to ("x",).
    B1-B6 are bivariate spline forms over columns ("x1", "x2"): marginal
    smooths plus, in some regions, their tensor interaction.  T1-T5 and
    S6-S13 are the trivariate analogues over ("x1", "x2", "x3") with
    bivariate (and for S6/S9/S10 trivariate) interactions.  The spline
    knob defaults follow the catalogue settings (cubic, 5 knots,
    second-order difference penalty, unit weight).
    """
    name = str(name).upper()

    def smooth(c):
        return Spline(c, knots=knots, degree=degree, lam=lam,
                      penalty_order=penalty_order)

    def ti(*covs):
        return Tensor(tuple(covs), knots=knots, degree=degree, lam=lam,
                      penalty_order=penalty_order)

    if name in ("S1", "S2", "S3", "S4", "S5"):
        c = (columns or ("x",))[0]
        lin, sq = [Linear(c)], [Power(c, 2)]
        if name == "S1":
            return ModelSpec([
                ((0.0, 0.1), sq), ((0.1, 0.905), lin), ((0.905, 1.0), sq),
            ])
        if name == "S2":
            return ModelSpec([((0.0, 0.105), sq), ((0.105, 1.0), lin)])
        if name == "S3":
            return ModelSpec([((0.0, 0.905), lin), ((0.905, 1.0), sq)])
        return ModelSpec.whole(lin if name == "S4" else sq)

    if name in ("B1", "B2", "B3", "B4", "B5", "B6"):
        c1, c2 = columns or ("x1", "x2")
        mains = [smooth(c1), smooth(c2)]
        full = mains + [ti(c1, c2)]
        if name == "B1":
            return ModelSpec.whole([smooth(c1)])
        if name == "B2":
            return ModelSpec.whole(mains)
        if name == "B3":
            return ModelSpec.whole(full)
        if name == "B4":
            return ModelSpec([
                ((0.0, 0.255), full), ((0.255, 0.75), mains), ((0.75, 1.0), full),
            ])
        if name == "B5":
            return ModelSpec([((0.0, 0.255), full), ((0.255, 1.0), mains)])
        return ModelSpec([((0.0, 0.75), mains), ((0.75, 1.0), full)])

    if name in ("T1", "T2", "T3", "T4", "T5", "S11"):
        c1, c2, c3 = columns or ("x1", "x2", "x3")
        mains = [smooth(c1), smooth(c2), smooth(c3)]
        full = mains + [ti(c1, c2), ti(c2, c3)]
        if name == "T1":
            return ModelSpec.whole(mains)
        if name == "T2":
            return ModelSpec.whole(full)
        if name == "T3":
            return ModelSpec([
                ((0.0, 0.255), full), ((0.255, 0.75), mains), ((0.75, 1.0), full),
            ])
        if name in ("T4", "S11"):
            return ModelSpec([((0.0, 0.255), full), ((0.255, 1.0), mains)])
        return ModelSpec([((0.0, 0.75), mains), ((0.75, 1.0), full)])

    if name in ("S6", "S7", "S8", "S9", "S10", "S12", "S13"):
        c1, c2, c3 = columns or ("x1", "x2", "x3")
        mains = [smooth(c1), smooth(c2), smooth(c3)]
        pairs = [ti(c1, c2), ti(c1, c3), ti(c2, c3)]
        everything = mains + pairs + [ti(c1, c2, c3)]
        if name == "S6":
            return ModelSpec.whole(everything)
        if name == "S7":
            return ModelSpec.whole(mains)
        if name == "S8":
            return ModelSpec.whole(mains + [ti(c1, c3), ti(c2, c3)])
        if name == "S10":
            return ModelSpec([((0.0, 0.255), everything), ((0.255, 1.0), mains)])
        inner = {
            "S9": everything,
            "S12": mains + pairs,
            "S13": mains + [ti(c1, c3), ti(c2, c3)],
        }[name]
        return ModelSpec([
            ((0.0, 0.255), mains), ((0.255, 0.75), inner), ((0.75, 1.0), mains),
        ])

    raise ValueError(f"unknown specification preset {name!r}")


@dataclass(frozen=True, eq=False)
class McResult:
    """Rejection frequencies of one (process, specification) experiment."""

    dgp: int
    spec_label: str
    n: int
    kind: str
    reps: int
    n_failed: int
    seed: int
    levels: tuple
    rejection_rate: dict
    p_values: np.ndarray = field(repr=False)
    wall_time: float = 0.0
    messages: tuple = ()

    @property
    def completed(self):
        return self.reps - self.n_failed


@dataclass(frozen=True)
class _RepPlan:
    dgp_spec: DgpSpec
    null_spec: ModelSpec
    flex_spec: ModelSpec | None
    kind: str
    grid: object
    fit_config: FitConfig
    bconfig: BootstrapConfig
    levels: tuple
    seed: int
    inner_workers: int

    def run(self, r):
        seq = np.random.SeedSequence(self.seed, spawn_key=(r,))
        data = draw_dgp(self.dgp_spec, np.random.Generator(np.random.Philox(seq)))
        rep_seed = np.random.SeedSequence(self.seed, spawn_key=(r, 1))
        cfg = BootstrapConfig(
            n_replicates=self.bconfig.n_replicates,
            seed=int(rep_seed.generate_state(1, np.uint64)[0]),
            levels=self.levels,
            n_workers=self.inner_workers,
            max_failure_share=self.bconfig.max_failure_share,
            refit_flexible=self.bconfig.refit_flexible,
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            try:
                res = run_bootstrap(
                    data, self.null_spec, self.kind, self.grid,
                    self.fit_config, cfg, self.flex_spec,
                )
            except (BootstrapError, ConvergenceError, SingularDesignError) as exc:
                return r, None, f"rep {r}: {exc}"
        rejects = tuple(res.reject(q) for q in self.levels)
        return r, (res.p_value, rejects), None


def _rep_chunk(plan, indices):
    return [plan.run(r) for r in indices]


def run_mc(
    dgp_spec,
    null_spec,
    kind,
    grid,
    reps=200,
    bconfig=BootstrapConfig(n_replicates=200),
    levels=(0.05,),
    fit_config=FitConfig(),
    flex_spec=None,
    seed=0,
    n_workers=1,
    spec_label="custom",
):
    """Monte Carlo rejection frequencies for one experiment cell.

    Repetition r draws a fresh dataset from its own keyed RNG stream,
    runs the full bootstrap test, and records the p-value plus one
    rejection indicator per significance level.  bconfig supplies the
    replicate count and failure policy; its seed and levels are replaced
    by per-repetition derived seeds and the `levels` argument.  The inner
    bootstrap stays serial whenever the repetitions themselves run on a
    worker pool.  Repetitions whose fits fail are skipped; more than 5%
    of them failing aborts with McError.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    levels = tuple(float(q) for q in levels)
    plan = _RepPlan(
        dgp_spec=dgp_spec, null_spec=null_spec, flex_spec=flex_spec,
        kind=kind, grid=grid, fit_config=fit_config, bconfig=bconfig,
        levels=levels, seed=seed,
        inner_workers=bconfig.n_workers if n_workers == 1 else 1,
    )
    start = time.perf_counter()
    results = [None] * reps
    if n_workers > 1 and reps > 1:
        chunks = np.array_split(np.arange(reps), min(n_workers, reps))
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            futures = [
                pool.submit(_rep_chunk, plan, chunk.tolist())
                for chunk in chunks if chunk.size
            ]
            for fut in futures:
                for r, payload, message in fut.result():
                    results[r] = (payload, message)
    else:
        for r in range(reps):
            _, payload, message = plan.run(r)
            results[r] = (payload, message)
    wall = time.perf_counter() - start

    messages = tuple(m for _, m in results if m is not None)
    done = [p for p, _ in results if p is not None]
    n_failed = reps - len(done)
    if n_failed > 0.05 * reps:
        raise McError(
            f"{n_failed} of {reps} repetitions failed; first failure: "
            f"{messages[0] if messages else 'unknown'}"
        )
    p_values = np.array([p for p, _ in done])
    rate = {
        q: float(np.mean([rej[i] for _, rej in done]))
        for i, q in enumerate(levels)
    }
    return McResult(
        dgp=dgp_spec.dgp, spec_label=spec_label, n=dgp_spec.n, kind=kind,
        reps=reps, n_failed=n_failed, seed=seed, levels=levels,
        rejection_rate=rate, p_values=p_values, wall_time=wall,
        messages=messages,
    )


MC_CSV_SCHEMA = "mc-table/v1"
MC_CSV_COLUMNS = (
    "dgp", "spec", "n", "level", "statistic", "reps", "rejection_rate",
    "wall_time",
)

MC_REPORT_SCHEMA = "qrspec-mc-report/v1"


def mc_table_rows(results):
    """Flatten results to CSV rows, one per (experiment, level).

    The reps column counts the repetitions that actually completed and
    entered the frequency's denominator.
    """
    rows = []
    for res in results:
        for q in res.levels:
            rows.append({
                "dgp": res.dgp,
                "spec": res.spec_label,
                "n": res.n,
                "level": repr(float(q)),
                "statistic": res.kind,
                "reps": res.completed,
                "rejection_rate": repr(res.rejection_rate[q]),
                "wall_time": repr(round(res.wall_time, 3)),
            })
    return rows


def write_mc_csv(path, results):
    """Write the versioned rejection-frequency table (schema mc-table/v1)."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MC_CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(mc_table_rows(results))


def mc_report(results):
    """Structured report dictionary (schema qrspec-mc-report/v1)."""
    return {
        "schema": MC_REPORT_SCHEMA,
        "csv_schema": MC_CSV_SCHEMA,
        "results": [
            {
                "dgp": res.dgp,
                "spec": res.spec_label,
                "n": res.n,
                "statistic": res.kind,
                "reps_requested": res.reps,
                "reps_completed": res.completed,
                "seed": res.seed,
                "levels": list(res.levels),
                "rejection_rate": {repr(float(q)): res.rejection_rate[q]
                                   for q in res.levels},
                "p_values": [float(p) for p in res.p_values],
                "wall_time": res.wall_time,
                "messages": list(res.messages),
            }
            for res in results
        ],
    }
