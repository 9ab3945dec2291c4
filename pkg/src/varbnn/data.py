"""CSV ingestion, standardisation, splitting and synthetic regression data."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataError
from .rng import make_stream

TASKS = ("regression", "classification")


@dataclass(frozen=True)
class Standardization:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    @classmethod
    def fit(cls, x: np.ndarray) -> Standardization:
        std = x.std(axis=0)
        std = np.where(std > 0, std, 1.0)  # constant columns are only centred
        return cls(tuple(x.mean(axis=0).tolist()), tuple(std.tolist()))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - np.asarray(self.mean)) / np.asarray(self.std)

    def invert(self, z: np.ndarray) -> np.ndarray:
        return z * np.asarray(self.std) + np.asarray(self.mean)

    def to_dict(self) -> dict:
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d: dict) -> Standardization:
        return cls(tuple(d["mean"]), tuple(d["std"]))


@dataclass(frozen=True)
class Dataset:
    """Standardised features plus raw targets (float values or integer labels)."""

    features: np.ndarray
    targets: np.ndarray
    columns: tuple[str, ...]
    target_name: str
    standardization: Standardization
    task: str = "regression"

    def __len__(self):
        return self.features.shape[0]

    @property
    def raw_features(self) -> np.ndarray:
        return self.standardization.invert(self.features)

    def subset(self, idx) -> Dataset:
        return replace(self, features=self.features[idx], targets=self.targets[idx])


def ingest_csv(path, target_column: str, task: str = "regression",
               standardization: Standardization | None = None) -> Dataset:
    """Parse a numeric CSV with a header row.

    Features are standardised with ``standardization`` when given (e.g. the
    record stored in a checkpoint), otherwise with statistics fitted on this
    file. Targets are kept in their original units.
    """
    if task not in TASKS:
        raise ConfigurationError(f"unknown task {task!r}; expected {TASKS}")
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise DataError(f"{path}: missing header row")
        header = [h.strip() for h in header]
        if target_column not in header:
            raise DataError(f"{path}: target column {target_column!r} not in header {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} cells, expected "
                                f"{len(header)}")
            values = []
            for name, cell in zip(header, row):
                cell = cell.strip()
                if cell == "" or cell.lower() in ("na", "nan"):
                    raise DataError(f"{path}: missing value in row {lineno}, column {name!r}")
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: non-numeric value {cell!r} in column {name!r} "
                                    f"(row {lineno})") from None
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")

    table = np.array(rows, dtype=np.float64)
    t = header.index(target_column)
    feature_cols = [i for i in range(len(header)) if i != t]
    if not feature_cols:
        raise DataError(f"{path}: no feature columns besides the target")
    x = table[:, feature_cols]
    y = table[:, t]
    if task == "classification":
        if not np.all(y == np.round(y)) or np.any(y < 0):
            raise DataError(f"{path}: classification targets must be non-negative integers")
        y = y.astype(np.int64)
    if standardization is None:
        standardization = Standardization.fit(x)
    elif len(standardization.mean) != x.shape[1]:
        raise DataError(f"{path}: {x.shape[1]} features, standardisation record has "
                        f"{len(standardization.mean)}")
    return Dataset(standardization.apply(x), y, tuple(header[i] for i in feature_cols),
                   target_column, standardization, task)


def split_dataset(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded shuffle split into ``ceil(f n)`` training and ``n - ceil(f n)`` test rows."""
    if not 0 < train_fraction <= 1:
        raise ConfigurationError(f"train_fraction must lie in (0, 1], got {train_fraction}")
    n = len(ds)
    n_train = min(n, math.ceil(train_fraction * n - 1e-9))
    order = make_stream(seed).permutation(n)
    return ds.subset(np.sort(order[:n_train])), ds.subset(np.sort(order[n_train:]))


# -- synthetic generators ----------------------------------------------------

def make_linear(n: int, seed: int, noise: float = 0.1, slope: float = 2.0,
                intercept: float = 1.0, n_features: int = 1):
    """``y = slope * sum(x) + intercept + N(0, noise^2)`` with ``x ~ U(-1, 1)``."""
    rng = make_stream(seed)
    x = rng.uniform(-1.0, 1.0, size=(n, n_features))
    y = slope * x.sum(axis=1) + intercept + rng.normal(0.0, noise, size=n)
    return x, y


def make_sine(n: int, seed: int, noise: float = 0.1, n_features: int = 1):
    """``y = sin(sum(x)) + N(0, noise^2)`` with ``x ~ U(-3, 3)``."""
    rng = make_stream(seed)
    x = rng.uniform(-3.0, 3.0, size=(n, n_features))
    y = np.sin(x.sum(axis=1)) + rng.normal(0.0, noise, size=n)
    return x, y


GENERATORS = {"linear": make_linear, "sine": make_sine}


def write_csv(path, x: np.ndarray, y: np.ndarray, target_name: str = "y") -> None:
    x = np.asarray(x)
    columns = [f"x{i + 1}" for i in range(x.shape[1])] + [target_name]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for xi, yi in zip(x, y):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(yi))])
