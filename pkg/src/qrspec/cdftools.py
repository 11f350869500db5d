"""Distribution functions reconstructed from a fitted quantile process.

The fitted quantile curve tau -> P(x, tau)' theta(tau) need not be
monotone in tau.  Counting how many grid predictions fall at or below y,

    F(y | x) = (1/m) #{ j : prediction_j <= y },

is the left-Riemann discretization of integrating the indicator over the
unit interval, and equals evaluation of the monotone rearrangement of the
curve: sorting the m predictions per row gives a proper step CDF no
matter how badly the quantile curves cross.  Mass below the smallest
prediction is 0 and above the largest is 1 (clamp rule; the grid trims
the extreme tails, so the reconstructed CDF owns them by fiat).

ConditionalCdf caches the sorted predictions per data row; pointwise
helpers (ecdf_eval, conditional_cdf, model_joint_cdf, inverse_sample)
cover one-off queries.
"""

from __future__ import annotations

import numpy as np

from .data import Dataset


class ConditionalCdf:
    """Per-row step CDFs built from grid predictions.

    Parameters
    ----------
    predictions : (n, m) array
        Fitted quantiles, one row per observation, one column per grid
        level, in any order; rows are sorted here.
    """

    def __init__(self, predictions):
        preds = np.asarray(predictions, dtype=float)
        if preds.ndim != 2:
            raise ValueError("predictions must be a 2-d array")
        self.sorted_preds = np.sort(preds, axis=1)
        self.n, self.m = preds.shape

    @classmethod
    def from_process(cls, proc, data):
        return cls(proc.predict(data))

    @classmethod
    def from_table(cls, proc, table):
        return cls(proc.predict_table(table))

    def eval(self, row, y):
        """F(y | X_row) for scalar or vector y."""
        counts = np.searchsorted(self.sorted_preds[row], y, side="right")
        return counts / self.m

    def cdf_matrix(self, ys):
        """F(ys[j] | X_i) for every row i, shape (n, len(ys))."""
        ys = np.asarray(ys, dtype=float)
        out = np.empty((self.n, ys.size))
        for i in range(self.n):
            out[i] = np.searchsorted(self.sorted_preds[i], ys, side="right")
        return out / self.m

    def quantile(self, rows, u):
        """Generalized inverse per row: the ceil(u*m)-th sorted prediction."""
        u = np.asarray(u, dtype=float)
        idx = np.clip(np.ceil(u * self.m).astype(int) - 1, 0, self.m - 1)
        return self.sorted_preds[rows, idx]

    def subset(self, rows):
        out = object.__new__(ConditionalCdf)
        out.sorted_preds = self.sorted_preds[rows]
        out.n, out.m = out.sorted_preds.shape
        return out


def ecdf_eval(data, y, x):
    """Empirical joint CDF: fraction of rows with Y_i <= y and X_i <= x
    componentwise."""
    x = np.asarray(x, dtype=float)
    if x.shape != (data.k,):
        raise ValueError(f"query point has shape {x.shape}, expected ({data.k},)")
    return float(np.mean((data.y <= y) & (data.x <= x).all(axis=1)))


def _point_cdf(proc, x):
    x = np.asarray(x, dtype=float).reshape(1, -1)
    point = Dataset(y=np.zeros(1), x=x, columns=proc.builder.columns)
    return ConditionalCdf.from_process(proc, point)


def conditional_cdf(proc, x, y):
    """Model-implied F(y | x) for one covariate point."""
    return float(_point_cdf(proc, x).eval(0, y))


def model_joint_cdf(proc, data, y, x):
    """Model-implied joint CDF: (1/n) sum_i 1{X_i <= x} F(y | X_i)."""
    x = np.asarray(x, dtype=float)
    if x.shape != (data.k,):
        raise ValueError(f"query point has shape {x.shape}, expected ({data.k},)")
    ccdf = ConditionalCdf.from_process(proc, data)
    inside = (data.x <= x).all(axis=1)
    values = ccdf.cdf_matrix(np.array([y]))[:, 0]
    return float(np.mean(inside * values))


def inverse_sample(proc, x, u):
    """Draw from the reconstructed conditional law by inverse transform."""
    if not 0.0 < u < 1.0:
        raise ValueError(f"u must be in (0,1), got {u}")
    ccdf = _point_cdf(proc, x)
    return float(ccdf.quantile(np.array([0]), np.array([u]))[0])
