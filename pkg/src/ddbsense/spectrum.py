"""Synthetic cooperative-sensing data under the Gamma energy model.

Each node reports the average power of ``T`` complex samples.  With Gaussian
noise that average is Gamma distributed with shape ``T``; the scale depends on
whether a primary user is transmitting (label 0, channel unavailable) or not
(label 1, channel available).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

UNAVAILABLE = 0
AVAILABLE = 1


class ScenarioError(ValueError):
    pass


class DatasetError(ValueError):
    pass


class EstimationError(ValueError):
    pass


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ChannelScenario:
    """Per-node Gamma scales for both hypotheses.

    ``scale_h0`` is the busy-channel (signal plus noise) scale, ``scale_h1``
    the noise-only scale.
    """

    scale_h0: np.ndarray
    scale_h1: np.ndarray
    sample_count: int = 64
    occupancy_prior: float = 0.5

    def __post_init__(self):
        h0 = _frozen(self.scale_h0)
        h1 = _frozen(self.scale_h1)
        object.__setattr__(self, "scale_h0", h0)
        object.__setattr__(self, "scale_h1", h1)
        if h0.ndim != 1 or h0.size == 0 or h0.shape != h1.shape:
            raise ScenarioError("scale_h0 and scale_h1 must be non-empty vectors of equal length")
        if not (np.all(np.isfinite(h0)) and np.all(np.isfinite(h1))):
            raise ScenarioError("scale parameters must be finite")
        if np.any(h0 <= 0) or np.any(h1 <= 0):
            raise ScenarioError("scale parameters must be strictly positive")
        if np.array_equal(h0, h1):
            raise ScenarioError("scale_h0 equals scale_h1 at every node; classes are indistinguishable")
        if int(self.sample_count) != self.sample_count or self.sample_count < 1:
            raise ScenarioError(f"sample_count must be a positive integer, got {self.sample_count!r}")
        if not 0.0 <= self.occupancy_prior <= 1.0:
            raise ScenarioError(f"occupancy_prior must lie in [0, 1], got {self.occupancy_prior!r}")

    @property
    def node_count(self) -> int:
        return self.scale_h0.size

    def scales(self, label: int) -> np.ndarray:
        return self.scale_h0 if label == UNAVAILABLE else self.scale_h1

    def to_dict(self) -> dict:
        return {
            "sample_count": int(self.sample_count),
            "occupancy_prior": float(self.occupancy_prior),
            "scale_h0": [float(v) for v in self.scale_h0],
            "scale_h1": [float(v) for v in self.scale_h1],
        }


def heterogeneous_scenario(
    node_count: int = 20,
    sample_count: int = 64,
    noise_scale: tuple[float, float] = (0.05, 0.12),
    snr: tuple[float, float] = (0.2, 1.0),
    occupancy_prior: float = 0.5,
    seed: int = 0,
) -> ChannelScenario:
    """Draw node scales once: noise scale uniform in ``noise_scale`` and the busy
    scale ``noise * (1 + snr_j)`` with ``snr_j`` uniform in ``snr``."""
    rng = np.random.default_rng(seed)
    h1 = rng.uniform(*noise_scale, size=node_count)
    gain = rng.uniform(*snr, size=node_count)
    return ChannelScenario(h1 * (1.0 + gain), h1, sample_count, occupancy_prior)


@dataclass(frozen=True)
class SensingVector:
    timeslot: int
    values: np.ndarray
    true_label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Timeslot-ordered sensing reports.

    ``scenario`` and ``seed`` are ``None`` for ingested data.
    """

    values: np.ndarray
    labels: np.ndarray
    timeslots: np.ndarray = None
    scenario: ChannelScenario | None = None
    seed: int | None = None
    columns: tuple[str, ...] = field(default=())

    def __post_init__(self):
        values = _frozen(self.values)
        labels = _frozen(self.labels, dtype=np.int64)
        if values.ndim != 2 or values.shape[0] == 0:
            raise DatasetError("dataset must contain at least one record")
        if labels.shape != (values.shape[0],):
            raise DatasetError("one label per record required")
        if not np.all(np.isin(labels, (0, 1))):
            raise DatasetError("labels must be 0 or 1")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise DatasetError("sensed powers must be finite and non-negative")
        ts = np.arange(values.shape[0]) if self.timeslots is None else self.timeslots
        ts = _frozen(ts, dtype=np.int64)
        if ts.shape != labels.shape or np.any(np.diff(ts) <= 0) or (ts.size and ts[0] < 0):
            raise DatasetError("timeslots must be non-negative and strictly increasing")
        if self.scenario is not None and values.shape[1] != self.scenario.node_count:
            raise DatasetError("value width does not match scenario node count")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "timeslots", ts)
        if not self.columns:
            object.__setattr__(self, "columns", tuple(f"node_{j + 1}" for j in range(values.shape[1])))

    def __len__(self):
        return self.values.shape[0]

    @property
    def node_count(self) -> int:
        return self.values.shape[1]

    @property
    def records(self) -> list[SensingVector]:
        return list(iter(self))

    def __iter__(self) -> Iterator[SensingVector]:
        for t, x, y in zip(self.timeslots, self.values, self.labels):
            yield SensingVector(int(t), x, int(y))

    def subset(self, index) -> "Dataset":
        return Dataset(self.values[index], self.labels[index], self.timeslots[index],
                       self.scenario, self.seed, self.columns)


def sample_timeslot(scenario: ChannelScenario, label: int, rng: np.random.Generator,
                    timeslot: int = 0) -> SensingVector:
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    values = rng.gamma(scenario.sample_count, scenario.scales(label))
    return SensingVector(timeslot, values, label)


def generate_dataset(scenario: ChannelScenario, count: int, seed: int) -> Dataset:
    """Draw ``count`` timeslots; labels are Bernoulli(occupancy_prior) for label 0."""
    if count < 1:
        raise DatasetError(f"count must be >= 1, got {count}")
    rng = np.random.default_rng(seed)
    busy = rng.random(count) < scenario.occupancy_prior
    labels = np.where(busy, UNAVAILABLE, AVAILABLE)
    scale = np.where(busy[:, None], scenario.scale_h0, scenario.scale_h1)
    values = rng.gamma(scenario.sample_count, scale)
    return Dataset(values, labels, scenario=scenario, seed=seed)


def write_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([*dataset.columns, "label"])
        for x, y in zip(dataset.values, dataset.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])


def load_csv(path) -> Dataset:
    """Read ``node_1..node_n,label`` rows.  Line numbers in errors are 1-based."""
    path = Path(path)
    rows, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 2 or header[-1] != "label":
            raise DatasetError(f"{path}:1: header must list value columns followed by 'label'")
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise DatasetError(f"{path}:{lineno}: expected {width} columns, found {len(row)}")
            try:
                vals = [float(c) for c in row[:-1]]
                label = int(row[-1])
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: cannot parse row ({exc})") from None
            if label not in (0, 1):
                raise DatasetError(f"{path}:{lineno}: label must be 0 or 1, got {label}")
            if any(not math.isfinite(v) or v < 0 for v in vals):
                raise DatasetError(f"{path}:{lineno}: power values must be finite and non-negative")
            rows.append(vals)
            labels.append(label)
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    return Dataset(np.array(rows), np.array(labels), columns=tuple(header[:-1]))


def estimate_scale_params(dataset: Dataset, sample_count: int) -> tuple[np.ndarray, np.ndarray]:
    """Method-of-moments scale estimates: per-class mean power divided by ``T``."""
    est = []
    for label in (UNAVAILABLE, AVAILABLE):
        sel = dataset.labels == label
        if not np.any(sel):
            raise EstimationError(f"no records with label {label}")
        mean = dataset.values[sel].mean(axis=0)
        if np.any(mean <= 0):
            raise EstimationError(f"zero mean power for label {label} at node(s) "
                                  f"{np.flatnonzero(mean <= 0).tolist()}")
        est.append(mean / sample_count)
    return est[0], est[1]
