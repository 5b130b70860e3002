"""Uniformly sampled multivariate time series with seed provenance.

CSV layout: one ``t`` column followed by one column per state component.
The binary format is a compressed npz with the header fields (dt, t0,
seed, labels) embedded next to the value array.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = ["TrajectorySeries"]


def default_labels(dim: int) -> list[str]:
    return [f"u{i}" for i in range(dim)]


@dataclass(frozen=True)
class TrajectorySeries:
    """A uniformly spaced series of state vectors.

    Attributes
    ----------
    dt : float
        Time step between consecutive rows (model time units).
    t0 : float
        Time stamp of the first row.
    values : ndarray, shape (J+1, dim)
        State vectors; must be finite (a simulation blow-up raises instead
        of producing a NaN series).
    seed : int or None
        RNG seed the series was generated with, if any.
    labels : list of str
        Per-component names.
    """

    dt: float
    t0: float
    values: np.ndarray
    seed: int | None = None
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if values.ndim != 2:
            raise ValueError("values must be a (J+1, dim) array")
        if not np.all(np.isfinite(values)):
            bad = np.argwhere(~np.isfinite(values))[0]
            raise ValueError(f"non-finite value at step {bad[0]}, component {bad[1]}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "values", values)
        labels = list(self.labels) if self.labels else default_labels(values.shape[1])
        if len(labels) != values.shape[1]:
            raise ValueError("labels length must match state dimension")
        object.__setattr__(self, "labels", labels)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def steps(self) -> int:
        """Number of steps J (rows minus one)."""
        return self.values.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.values.shape[0])

    def component(self, name_or_index) -> np.ndarray:
        idx = self.labels.index(name_or_index) if isinstance(name_or_index, str) else int(name_or_index)
        return self.values[:, idx]

    def index_at(self, t: float) -> int:
        """Row index of time t; t must sit on the grid within half a step."""
        j = int(round((t - self.t0) / self.dt))
        if j < 0 or j >= len(self.values) or abs(self.t0 + j * self.dt - t) > 0.5 * self.dt:
            raise ValueError(f"time {t} is outside the series grid")
        return j

    def window(self, t_start: float, t_end: float) -> "TrajectorySeries":
        j0, j1 = self.index_at(t_start), self.index_at(t_end)
        return TrajectorySeries(self.dt, self.t0 + j0 * self.dt, self.values[j0:j1 + 1],
                                seed=self.seed, labels=self.labels)

    def select(self, indices, labels=None) -> "TrajectorySeries":
        indices = list(indices)
        labels = labels or [self.labels[i] for i in indices]
        return TrajectorySeries(self.dt, self.t0, self.values[:, indices],
                                seed=self.seed, labels=labels)

    # -- persistence -------------------------------------------------------

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t"] + self.labels)
            for t, row in zip(self.times, self.values):
                writer.writerow([repr(float(t))] + [repr(float(v)) for v in row])

    @classmethod
    def from_csv(cls, path) -> "TrajectorySeries":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            rows = [[float(v) for v in row] for row in reader]
        data = np.asarray(rows)
        t = data[:, 0]
        if len(t) < 2:
            raise ValueError("need at least two rows to recover dt")
        return cls(dt=float(t[1] - t[0]), t0=float(t[0]), values=data[:, 1:], labels=header[1:])

    def to_npz(self, path) -> None:
        np.savez_compressed(
            path, values=self.values, dt=self.dt, t0=self.t0,
            seed=-1 if self.seed is None else int(self.seed),
            labels=np.asarray(self.labels),
        )

    @classmethod
    def from_npz(cls, path) -> "TrajectorySeries":
        with np.load(path) as data:
            seed = int(data["seed"])
            return cls(
                dt=float(data["dt"]), t0=float(data["t0"]), values=data["values"],
                seed=None if seed < 0 else seed, labels=[str(x) for x in data["labels"]],
            )
