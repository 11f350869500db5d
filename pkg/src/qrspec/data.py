"""Small tabular container shared by fitting, testing and simulation code."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


class DataError(ValueError):
    """Raised for malformed input data (bad shapes, NaNs, missing columns)."""


@dataclass(frozen=True)
class Dataset:
    """Response vector plus covariate matrix with named columns.

    y : (n,) float array, the response.
    x : (n, k) float array, covariates; column j is named ``columns[j]``.
    """

    y: np.ndarray
    x: np.ndarray
    columns: tuple[str, ...]

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "columns", tuple(str(c) for c in self.columns))
        if y.ndim != 1:
            raise DataError("response must be one-dimensional")
        if x.shape[0] != y.shape[0]:
            raise DataError(
                f"covariate rows ({x.shape[0]}) do not match response length ({y.shape[0]})"
            )
        if x.shape[1] != len(self.columns):
            raise DataError(
                f"{x.shape[1]} covariate columns but {len(self.columns)} column names"
            )
        if len(set(self.columns)) != len(self.columns):
            raise DataError("covariate column names must be unique")
        if y.size == 0:
            raise DataError("dataset is empty")
        if not np.isfinite(y).all() or not np.isfinite(x).all():
            raise DataError("dataset contains non-finite values")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def k(self) -> int:
        return self.x.shape[1]

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.columns.index(name)
        except ValueError:
            raise DataError(f"no covariate column named {name!r}") from None
        return self.x[:, j]

    def take(self, rows) -> "Dataset":
        """Row subset (or resample, indices may repeat)."""
        rows = np.asarray(rows)
        return Dataset(self.y[rows], self.x[rows], self.columns)


def read_csv(path, response: str) -> Dataset:
    """Load a dataset from a CSV file with a mandatory header row.

    All columns other than ``response`` become covariates, in file order.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        if any(_parses_as_number(h) for h in header):
            raise DataError(f"{path}: first row looks numeric; a header row is required")
        if response not in header:
            raise DataError(f"{path}: response column {response!r} not in header {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric value ({exc})") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=float)
    j = header.index(response)
    keep = [i for i in range(len(header)) if i != j]
    return Dataset(arr[:, j], arr[:, keep], tuple(header[i] for i in keep))


def write_csv(path, data: Dataset, response: str = "y") -> None:
    """Write a dataset to CSV (header row, response first)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([response, *data.columns])
        for i in range(data.n):
            writer.writerow([repr(float(data.y[i])), *(repr(float(v)) for v in data.x[i])])


def _parses_as_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True
