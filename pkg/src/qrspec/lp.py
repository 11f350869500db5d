"""Solvers for weighted check-loss minimization.

Both solvers minimize sum_i w_i rho_{tau_i}(y_i - x_i' beta) where every
row may carry its own level tau_i and weight w_i; roughness-penalty pseudo
rows enter with tau = 1/2 so that a weight of 2*lam contributes
lam * |d' beta| to the objective.

solve_ip_batch solves many such problems sharing one design matrix (and
one weight vector) at once, which is the shape of a quantile process fit:
one problem per grid level.  It runs a Mehrotra-style predictor-corrector
interior point method on the bounded-variable dual

    max y'a   subject to   X'a = X'(w * (1 - tau)),  0 <= a <= w,

whose equality multiplier is exactly the regression coefficient vector.
The iteration starts at the feasible point a = w * (1 - tau), so the
linear residuals stay zero throughout and only positivity and the duality
gap have to be driven in.  All heavy operations are batched matrix
products over the problem axis.

solve_simplex hands the primal LP (residual splits) to HiGHS and is used
for tiny problems and as a rescue path; its vertex solutions give the
documented lower-endpoint behavior on degenerate tie intervals.
"""

from __future__ import annotations

import numpy as np
from scipy import sparse
from scipy.optimize import linprog


class ConvergenceError(RuntimeError):
    """Solver gave up; .trace holds the duality-gap history."""

    def __init__(self, message, trace=()):
        super().__init__(message)
        self.trace = tuple(trace)


def _as_inputs(design, response, weights):
    x = np.ascontiguousarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    n, _ = x.shape
    w = np.broadcast_to(np.asarray(weights, dtype=float), (n,))
    if y.shape != (n,):
        raise ValueError(f"response has shape {y.shape}, expected ({n},)")
    if not (w > 0).all():
        raise ValueError("row weights must be strictly positive")
    return x, y, w


def solve_simplex(design, response, taus, weights=1.0):
    """Solve one weighted check-loss problem as an explicit LP via HiGHS."""
    x, y, w = _as_inputs(design, response, weights)
    n, p = x.shape
    taus = np.broadcast_to(np.asarray(taus, dtype=float), (n,))
    cost = np.concatenate([np.zeros(p), w * taus, w * (1.0 - taus)])
    eye = sparse.eye(n, format="csc")
    a_eq = sparse.hstack([sparse.csc_matrix(x), eye, -eye], format="csc")
    bounds = [(None, None)] * p + [(0.0, None)] * (2 * n)
    res = linprog(cost, A_eq=a_eq, b_eq=y, bounds=bounds, method="highs")
    if not res.success:
        raise ConvergenceError(f"simplex solver failed: {res.message}")
    return res.x[:p]


def _max_step(v, dv, u, du):
    # largest alpha with v + alpha dv >= 0 and u + alpha du >= 0, per problem
    with np.errstate(divide="ignore", invalid="ignore"):
        rv = np.where(dv < 0, v / -dv, np.inf)
        ru = np.where(du < 0, u / -du, np.inf)
    return np.minimum(rv.min(axis=1), ru.min(axis=1))


def solve_ip_batch(design, response, tau_rows, weights=1.0, tol=1e-9, max_iter=80):
    """Solve a batch of check-loss problems sharing a design matrix.

    Parameters
    ----------
    design : (n, p) array
    response : (n,) array
    tau_rows : (B, n) array
        Per-problem, per-row quantile levels, all strictly inside (0, 1).
    weights : scalar or (n,) array
        Strictly positive row weights, shared across the batch.
    tol : float
        Relative duality-gap target.
    max_iter : int

    Returns
    -------
    coef : (B, p) array
    diags : list of B dicts with keys iterations, gap, converged, trace.
    """
    x, y, w = _as_inputs(design, response, weights)
    n, p = x.shape
    taus = np.atleast_2d(np.asarray(tau_rows, dtype=float))
    nprob = taus.shape[0]
    if taus.shape != (nprob, n):
        raise ValueError(f"tau_rows has shape {taus.shape}, expected (B, {n})")
    if not ((taus > 0) & (taus < 1)).all():
        raise ValueError("levels must lie strictly inside (0, 1)")

    scale = 1.0 + float(np.mean(np.abs(y)))
    coef = np.zeros((nprob, p))
    traces = [[] for _ in range(nprob)]

    beta0, *_ = np.linalg.lstsq(x, y, rcond=None)
    r0 = y - x @ beta0
    if np.max(np.abs(r0)) <= 1e-12 * scale:
        # exact interpolation minimizes every problem at once
        coef[:] = beta0
        diags = [
            {"iterations": 0, "gap": 0.0, "converged": True, "trace": ()}
            for _ in range(nprob)
        ]
        return coef, diags

    eps0 = 0.1 * float(np.mean(np.abs(r0)))
    a = w * (1.0 - taus)
    s = w - a
    z = np.broadcast_to(np.maximum(r0, 0.0) + eps0, (nprob, n)).copy()
    m = z - r0
    beta = np.broadcast_to(beta0, (nprob, p)).copy()

    live = np.arange(nprob)
    iterations = np.zeros(nprob, dtype=int)
    gaps = np.full(nprob, np.inf)
    converged = np.zeros(nprob, dtype=bool)
    xt = x.T
    gap_target = 2.0 * n * tol * scale

    for it in range(max_iter):
        za = z / s
        ma = m / a
        wgt = 1.0 / (za + ma)
        bad = ~np.isfinite(wgt)
        if bad.any():
            wgt[bad] = 0.0

        normal = np.matmul(xt, wgt[:, :, None] * x[None, :, :])
        t_aff = z - m
        try:
            db_aff = np.linalg.solve(normal, ((wgt * t_aff) @ x)[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            break
        da_aff = wgt * (t_aff - db_aff @ xt)
        dz_aff = -z + za * da_aff
        dm_aff = -m - ma * da_aff

        alpha_p = _max_step(a, da_aff, s, -da_aff)
        alpha_d = _max_step(z, dz_aff, m, dm_aff)
        gap = np.einsum("bn,bn->b", z, s) + np.einsum("bn,bn->b", m, a)
        ga = np.einsum(
            "bn,bn->b", z + alpha_d[:, None] * dz_aff, s - alpha_p[:, None] * da_aff
        ) + np.einsum(
            "bn,bn->b", m + alpha_d[:, None] * dm_aff, a + alpha_p[:, None] * da_aff
        )
        sigma = np.clip(ga / gap, 0.0, 1.0) ** 3
        mu = sigma * gap / (2.0 * n)

        # ds_aff = -da_aff, so the Mehrotra correction -dz*ds becomes +dz*da
        cz = (mu[:, None] + dz_aff * da_aff) / s
        cm = (mu[:, None] - dm_aff * da_aff) / a
        t = t_aff - cz + cm
        try:
            db = np.linalg.solve(normal, ((wgt * t) @ x)[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            break
        da = wgt * (t - db @ xt)
        dz = -z + cz + za * da
        dm = -m + cm - ma * da

        eta = 0.9995
        alpha_p = np.minimum(1.0, eta * _max_step(a, da, s, -da))
        alpha_d = np.minimum(1.0, eta * _max_step(z, dz, m, dm))

        a = a + alpha_p[:, None] * da
        s = s - alpha_p[:, None] * da
        z = z + alpha_d[:, None] * dz
        m = m + alpha_d[:, None] * dm
        beta = beta + alpha_d[:, None] * db

        gap = np.einsum("bn,bn->b", z, s) + np.einsum("bn,bn->b", m, a)
        iterations[live] = it + 1
        gaps[live] = gap
        for j, g in zip(live, gap):
            traces[j].append(float(g))

        ok = np.isfinite(gap)
        done = (gap < gap_target) | ~ok
        if done.any():
            finished = live[done]
            converged[finished] = ok[done] & (gap[done] < gap_target)
            coef[finished] = beta[done]
            keep = ~done
            live = live[keep]
            if live.size == 0:
                break
            a, s, z, m, beta, taus = (
                a[keep], s[keep], z[keep], m[keep], beta[keep], taus[keep],
            )

    if live.size:
        coef[live] = beta

    diags = [
        {
            "iterations": int(iterations[b]),
            "gap": float(gaps[b]),
            "converged": bool(converged[b]),
            "trace": tuple(traces[b]),
        }
        for b in range(nprob)
    ]
    return coef, diags


def solve_ip(design, response, taus, weights=1.0, tol=1e-9, max_iter=80):
    """Single-problem front end to solve_ip_batch; raises on failure."""
    n = np.asarray(design).shape[0]
    tau_rows = np.broadcast_to(np.asarray(taus, dtype=float), (n,))[None, :]
    coef, diags = solve_ip_batch(design, response, tau_rows, weights, tol, max_iter)
    if not diags[0]["converged"]:
        raise ConvergenceError(
            f"interior point did not reach tolerance {tol} in {max_iter} iterations "
            f"(final gap {diags[0]['gap']:.3e})",
            trace=diags[0]["trace"],
        )
    return coef[0], diags[0]
