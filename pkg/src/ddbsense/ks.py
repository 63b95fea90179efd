"""Two-sample Kolmogorov-Smirnov detection on DDB distributions.

A baseline of training-time DDBs is compared against consecutive,
non-overlapping groups of test DDBs.  The P-value uses the asymptotic
exponential approximation ``2 exp(-2 d^2 a1 a2 / (a1 + a2))`` clamped to
``[0, 1]``; a group is flagged when ``P < alpha``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class DdbBaseline:
    distances: np.ndarray

    def __post_init__(self):
        d = np.sort(np.asarray(self.distances, dtype=float).ravel())
        if d.size < 2:
            raise ValueError(f"baseline needs at least 2 distances, got {d.size}")
        if not np.all(np.isfinite(d)) or d[0] < 0:
            raise ValueError("baseline distances must be finite and non-negative")
        d.setflags(write=False)
        object.__setattr__(self, "distances", d)

    @property
    def size(self) -> int:
        return self.distances.size


@dataclass(frozen=True)
class KsDecision:
    d_ks: float
    p_value: float
    flagged: bool
    group_size: int
    alpha: float


def build_baseline(train_ddbs) -> DdbBaseline:
    return DdbBaseline(train_ddbs)


def _sorted_group(group):
    g = np.sort(np.asarray(group, dtype=float).ravel())
    if g.size == 0:
        raise ValueError("empty test group")
    if not np.all(np.isfinite(g)):
        raise ValueError("test group contains non-finite distances")
    return g


def ks_statistic(baseline: DdbBaseline, group) -> float:
    """Exact sup-distance between the two empirical CDFs.

    Both step functions are evaluated at every pooled point, right-continuous
    and as left limits.
    """
    a = baseline.distances
    b = _sorted_group(group)
    pts = np.concatenate([a, b])
    right = np.abs(np.searchsorted(a, pts, "right") / a.size - np.searchsorted(b, pts, "right") / b.size)
    left = np.abs(np.searchsorted(a, pts, "left") / a.size - np.searchsorted(b, pts, "left") / b.size)
    return float(max(right.max(), left.max()))


def p_value(d_ks: float, a1: int, a2: int) -> float:
    if a1 < 1 or a2 < 1:
        raise ValueError("sample sizes must be positive")
    return float(min(1.0, 2.0 * np.exp(-2.0 * d_ks ** 2 * a1 * a2 / (a1 + a2))))


def detect(baseline: DdbBaseline, group, alpha: float) -> KsDecision:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    d = ks_statistic(baseline, group)
    n = int(np.size(group))
    p = p_value(d, baseline.size, n)
    return KsDecision(d, p, p < alpha, n, alpha)


def stream_detect(baseline: DdbBaseline, ddbs, group_size: int, alpha: float) -> list[KsDecision]:
    """One decision per consecutive block of ``group_size``; a trailing partial
    block is withheld."""
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    ddbs = np.asarray(ddbs, dtype=float).ravel()
    k = ddbs.size // group_size
    return [detect(baseline, ddbs[i * group_size:(i + 1) * group_size], alpha) for i in range(k)]


def flag_rate(decisions) -> float:
    return float(np.mean([d.flagged for d in decisions])) if decisions else 0.0


def write_decision_csv(decisions, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group_index", "d_ks", "p_value", "flagged"])
        for i, d in enumerate(decisions):
            w.writerow([i, repr(d.d_ks), repr(d.p_value), int(d.flagged)])
