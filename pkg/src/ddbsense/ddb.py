"""Distance to the fusion classifier's decision boundary.

Four estimators share one result type:

* ``binary_search_ddb`` walks along the normal of the Gamma likelihood-ratio
  boundary and bisects on the classifier's label (forward passes only).
* ``deepfool_ddb`` linearizes the score margin and takes Newton steps.
* ``lbfgs_ddb`` minimizes ``C*||delta|| + CE(x + delta, target)`` in a box
  (projected first-order steps; iterations are optimizer steps).
* ``cw_ddb`` minimizes ``||delta||^2 + C*hinge`` over a tanh reparameterization.

Every solver works on a batch of rows; the single-vector functions are thin
wrappers.  All distances are Euclidean in raw power units.
"""

from __future__ import annotations

import csv
import enum
import logging
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)


class DegenerateDirectionError(ValueError):
    pass


class Method(str, enum.Enum):
    LRT_BINARY_SEARCH = "lrt"
    DEEPFOOL = "deepfool"
    LBFGS = "lbfgs"
    CW = "cw"


@dataclass(frozen=True, eq=False)
class BoundaryDirection:
    weights: np.ndarray
    bias: float
    unit_direction: np.ndarray

    def statistic(self, x):
        """Signed LRT statistic ``w.x + b``; positive means label 1 (available)."""
        return np.asarray(x) @ self.weights + self.bias


def lrt_direction(scale_h0, scale_h1, sample_count: int, threshold: float = 1.0) -> BoundaryDirection:
    """Linear boundary ``w.x + b = 0`` of the Gamma likelihood-ratio test.

    ``w_j = 1/beta0_j - 1/beta1_j``; ``b = T*sum(log(beta0/beta1)) - log(gamma)``.
    """
    h0 = np.asarray(scale_h0, dtype=float)
    h1 = np.asarray(scale_h1, dtype=float)
    if h0.shape != h1.shape or h0.ndim != 1:
        raise ValueError("scale vectors must be 1-D and of equal length")
    if np.any(h0 <= 0) or np.any(h1 <= 0):
        raise ValueError("scales must be positive")
    if threshold <= 0:
        raise ValueError("LRT threshold must be positive")
    w = 1.0 / h0 - 1.0 / h1
    norm = np.linalg.norm(w)
    if norm == 0:
        raise DegenerateDirectionError("all node scales agree between hypotheses; no LRT direction")
    b = sample_count * np.sum(np.log(h0 / h1)) - np.log(threshold)
    return BoundaryDirection(w, float(b), -w / norm)


@dataclass(frozen=True)
class SearchConfig:
    initial_step: float = 5.0
    stop_threshold: float = 0.01
    max_doublings: int = 30
    max_iterations: int = 50
    boundary_tol: float = 1e-3
    confidence: float = 0.0
    # box for LBFGS / C&W; scalars broadcast, None derives it from the batch
    box_lower: object = None
    box_upper: object = None
    lbfgs_initial_const: float = 1.0
    lbfgs_search_steps: int = 12
    lbfgs_steps: int = 200
    lbfgs_learning_rate: float = 0.01
    cw_initial_const: float = 10.0
    cw_search_steps: int = 9
    cw_steps: int = 300
    cw_learning_rate: float = 0.01

    def __post_init__(self):
        for name in ("initial_step", "stop_threshold", "boundary_tol", "lbfgs_initial_const",
                     "cw_initial_const", "cw_learning_rate", "lbfgs_learning_rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("max_doublings", "max_iterations", "lbfgs_search_steps", "lbfgs_steps",
                     "cw_search_steps", "cw_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.confidence < 0:
            raise ValueError("confidence must be non-negative")
        if self.stop_threshold >= self.initial_step:
            raise ValueError("stop_threshold must be smaller than initial_step")

    def box(self, X):
        if self.box_lower is not None and self.box_upper is not None:
            n = X.shape[1]
            lo = np.broadcast_to(np.asarray(self.box_lower, dtype=float), (n,))
            hi = np.broadcast_to(np.asarray(self.box_upper, dtype=float), (n,))
            return lo, hi
        return data_box(X)


def data_box(X, headroom: float = 0.2):
    """Per-feature min/max widened by ``headroom`` of the range on each side."""
    X = np.atleast_2d(X)
    lo, hi = X.min(axis=0), X.max(axis=0)
    pad = headroom * np.maximum(hi - lo, np.maximum(np.abs(hi), 1.0))
    return lo - pad, hi + pad


@dataclass(frozen=True, eq=False)
class DdbResult:
    distance: float
    boundary_point: np.ndarray
    iterations: int
    method: Method
    converged: bool


@dataclass(eq=False)
class DdbBatch(Sequence):
    """Column-wise results for a batch; indexes as a sequence of ``DdbResult``."""

    distances: np.ndarray
    points: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    method: Method
    warning: str | None = None

    def __len__(self):
        return len(self.distances)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[k] for k in range(*i.indices(len(self)))]
        return DdbResult(float(self.distances[i]), self.points[i], int(self.iterations[i]),
                         self.method, bool(self.converged[i]))

    @property
    def usable(self) -> np.ndarray:
        """Finite distances from converged rows, in input order."""
        return self.distances[self.converged & np.isfinite(self.distances)]

    @property
    def excluded(self) -> int:
        return len(self) - self.usable.size


def _rows(model, X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ValueError(f"expected rows of length {model.input_dim}, got shape {X.shape}")
    return X


def _check_direction(direction, n):
    if direction is None:
        raise ValueError("binary search needs a BoundaryDirection")
    u = np.asarray(direction.unit_direction)
    if u.shape != (n,):
        raise ValueError(f"direction has length {u.size}, model expects {n}")
    if not np.any(direction.weights):
        raise DegenerateDirectionError("zero LRT weight vector")
    return u


def binary_search_batch(model, X, direction: BoundaryDirection, config: SearchConfig = SearchConfig(),
                        trace: list | None = None) -> DdbBatch:
    """Bracket the label flip along the LRT normal by doubling, then bisect.

    Label-0 rows step toward larger LRT statistic (``-u``), label-1 rows toward
    smaller (``+u``).  ``x_l`` always carries label 0 and ``x_r`` label 1.  When
    ``trace`` is a list, each bisection appends ``(rows, x_l, x_r)`` copies.
    """
    X = _rows(model, X)
    u = _check_direction(direction, X.shape[1])
    labels = np.asarray(model.classify(X))
    step_dir = np.where(labels[:, None] == 0, -u, u)
    N = len(X)
    eps = np.full(N, float(config.initial_step))
    doublings = np.zeros(N, dtype=int)
    converged = np.ones(N, dtype=bool)

    pending = np.arange(N)
    while pending.size:
        flipped = model.classify(X[pending] + eps[pending, None] * step_dir[pending]) != labels[pending]
        stuck = pending[~flipped]
        exhausted = doublings[stuck] >= config.max_doublings
        converged[stuck[exhausted]] = False
        pending = stuck[~exhausted]
        eps[pending] *= 2.0
        doublings[pending] += 1

    far = X + eps[:, None] * step_dir
    zero = labels[:, None] == 0
    xl = np.where(zero, X, far)
    xr = np.where(zero, far, X)
    mid = far.copy()
    bisections = np.zeros(N, dtype=int)
    active = np.flatnonzero(converged & (np.linalg.norm(xl - xr, axis=1) > config.stop_threshold))
    while active.size:
        m = 0.5 * (xl[active] + xr[active])
        left = np.asarray(model.classify(m)) == 0
        mid[active] = m
        xl[active[left]] = m[left]
        xr[active[~left]] = m[~left]
        bisections[active] += 1
        if trace is not None:
            trace.append((active.copy(), xl[active].copy(), xr[active].copy()))
        active = active[np.linalg.norm(xl[active] - xr[active], axis=1) > config.stop_threshold]

    dist = np.linalg.norm(mid - X, axis=1)
    dist[~converged] = np.inf
    return DdbBatch(dist, mid, doublings + bisections, converged, Method.LRT_BINARY_SEARCH)


def deepfool_batch(model, X, config: SearchConfig = SearchConfig(), mask=None) -> DdbBatch:
    """Newton steps ``-g * grad / ||grad||^2`` on the margin until ``|g| <= tol``.

    A label flip alone does not stop the iteration: the first step usually
    overshoots a curved boundary, so stopping there overestimates the distance.

    ``mask`` (0/1 per coordinate) restricts the steps to a coordinate subset.
    """
    X = _rows(model, X)
    N = len(X)
    xk = X.copy()
    iters = np.zeros(N, dtype=int)
    converged = np.zeros(N, dtype=bool)
    active = np.arange(N)
    for k in range(config.max_iterations + 1):
        g = np.asarray(model.margin(xk[active]))
        done = np.abs(g) <= config.boundary_tol
        converged[active[done]] = True
        active, g = active[~done], g[~done]
        if not active.size or k == config.max_iterations:
            break
        grad = model.margin_gradient(xk[active])
        if mask is not None:
            grad = grad * mask
        nrm2 = np.einsum("ij,ij->i", grad, grad)
        ok = nrm2 > 1e-24
        active, g, grad, nrm2 = active[ok], g[ok], grad[ok], nrm2[ok]
        xk[active] -= (g / nrm2)[:, None] * grad
        iters[active] += 1
    dist = np.linalg.norm(xk - X, axis=1)
    return DdbBatch(dist, xk, iters, converged, Method.DEEPFOOL)


def _adam(grad, m, v, t, b1=0.9, b2=0.999):
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad ** 2
    return m, v, (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + 1e-12)


def lbfgs_batch(model, X, target_labels=None, config: SearchConfig = SearchConfig(),
                lower=None, upper=None) -> DdbBatch:
    """Penalty-method DDB: ``min C*||delta|| + CE(x + delta, target)`` in a box.

    The inner problem is solved by projected Adam steps.  ``C`` weights the
    norm, so a success raises ``C`` (shorter perturbations) and a failure lowers
    it; once bracketed, ``C`` is bisected geometrically.  Per-row ``lower`` /
    ``upper`` arrays override the box (equal bounds freeze a coordinate).
    """
    X = _rows(model, X)
    N = len(X)
    labels = np.asarray(model.classify(X))
    targets = 1 - labels if target_labels is None else np.broadcast_to(np.asarray(target_labels), (N,))
    if np.any(targets == labels):
        raise ValueError("target label must differ from the current label")
    box_lo, box_hi = config.box(X)
    lo = np.minimum(np.broadcast_to(box_lo if lower is None else lower, X.shape), X)
    hi = np.maximum(np.broadcast_to(box_hi if upper is None else upper, X.shape), X)
    scale = 0.5 * (box_hi - box_lo)
    sign = np.where(targets == 1, 1.0, -1.0)
    const = np.full(N, config.lbfgs_initial_const)
    c_ok = np.zeros(N)
    c_bad = np.full(N, np.inf)
    best = np.full(N, np.inf)
    points = X.copy()
    iters = 0
    for _ in range(config.lbfgs_search_steps):
        xa = X.copy()
        m = np.zeros_like(xa)
        v = np.zeros_like(xa)
        for t in range(1, config.lbfgs_steps + 1):
            g = np.asarray(model.margin(xa))
            grad_g = model.margin_gradient(xa)
            ok = (g > 0).astype(int) == targets
            delta = xa - X
            nrm = np.linalg.norm(delta, axis=1)
            better = ok & (nrm < best)
            best[better] = nrm[better]
            points[better] = xa[better]
            grad = (-sign * expit(-sign * g))[:, None] * grad_g
            grad += (const / np.where(nrm > 0, nrm, 1.0))[:, None] * delta
            m, v, step = _adam(grad, m, v, t)
            lr = config.lbfgs_learning_rate * (1.0 - (t - 1) / config.lbfgs_steps)
            xa = np.clip(xa - lr * scale * step, lo, hi)
            iters += 1
        won = (np.asarray(model.margin(xa)) > 0).astype(int) == targets
        c_ok = np.where(won, np.maximum(c_ok, const), c_ok)
        c_bad = np.where(won, c_bad, np.minimum(c_bad, const))
        const = np.where(np.isinf(c_bad), const * 2.0,
                         np.where(c_ok == 0, const * 0.5, np.sqrt(c_ok * c_bad)))
    return DdbBatch(best, points, np.full(N, iters), np.isfinite(best), Method.LBFGS)


def cw_batch(model, X, config: SearchConfig = SearchConfig()) -> DdbBatch:
    """Carlini-Wagner L2: Adam over ``rho`` with ``x = mid + half*tanh(rho)``.

    The objective is ``||delta||^2 + C*max(h, -kappa)`` where ``h`` is the
    original label's score minus the other label's.  ``C`` is binary-searched
    per row; the shortest successful point over all steps is returned.
    """
    X = _rows(model, X)
    N = len(X)
    lo, hi = config.box(X)
    half = 0.5 * (hi - lo)
    centre = 0.5 * (hi + lo)
    rho0 = np.arctanh(np.clip((X - centre) / half, -1 + 1e-9, 1 - 1e-9))
    labels = np.asarray(model.classify(X))
    sign = np.where(labels == 1, 1.0, -1.0)
    kappa = config.confidence
    const = np.full(N, config.cw_initial_const)
    c_lo = np.zeros(N)
    c_hi = np.full(N, np.inf)
    best = np.full(N, np.inf)
    points = X.copy()
    iters = 0
    for _ in range(config.cw_search_steps):
        rho = rho0.copy()
        m = np.zeros_like(rho)
        v = np.zeros_like(rho)
        hit = np.zeros(N, dtype=bool)
        for t in range(1, config.cw_steps + 1):
            th = np.tanh(rho)
            xa = centre + half * th
            g = np.asarray(model.margin(xa))
            grad_g = model.margin_gradient(xa)
            h = sign * g
            ok = h <= -kappa if kappa > 0 else h <= config.boundary_tol
            d = np.linalg.norm(xa - X, axis=1)
            better = ok & (d < best)
            best[better] = d[better]
            points[better] = xa[better]
            hit |= ok
            grad_x = 2.0 * (xa - X) + (const * sign * (h > -kappa))[:, None] * grad_g
            m, v, step = _adam(grad_x * half * (1.0 - th ** 2), m, v, t)
            lr = config.cw_learning_rate * (1.0 - (t - 1) / config.cw_steps)
            rho -= lr * step
            iters += 1
        c_hi = np.where(hit, np.minimum(c_hi, const), c_hi)
        c_lo = np.where(hit, c_lo, np.maximum(c_lo, const))
        const = np.where(np.isinf(c_hi), const * 10.0, 0.5 * (c_lo + c_hi))
    converged = np.isfinite(best)
    return DdbBatch(best, points, np.full(N, iters), converged, Method.CW)


def _single(batch: DdbBatch) -> DdbResult:
    return batch[0]


def binary_search_ddb(model, x, direction: BoundaryDirection, config: SearchConfig = SearchConfig()) -> DdbResult:
    return _single(binary_search_batch(model, x, direction, config))


def deepfool_ddb(model, x, config: SearchConfig = SearchConfig()) -> DdbResult:
    return _single(deepfool_batch(model, x, config))


def lbfgs_ddb(model, x, target_label=None, config: SearchConfig = SearchConfig()) -> DdbResult:
    return _single(lbfgs_batch(model, x, target_label, config))


def cw_ddb(model, x, config: SearchConfig = SearchConfig()) -> DdbResult:
    return _single(cw_batch(model, x, config))


def compute_ddb_set(model, data, method: Method | str, direction: BoundaryDirection | None = None,
                    config: SearchConfig = SearchConfig()) -> DdbBatch:
    """DDB for every record of ``data`` (a Dataset or an array of rows)."""
    method = Method(method)
    X = getattr(data, "values", data)
    if method is Method.LRT_BINARY_SEARCH:
        batch = binary_search_batch(model, X, direction, config)
    else:
        if direction is not None:
            raise ValueError(f"{method.value} does not take a search direction")
        batch = {Method.DEEPFOOL: deepfool_batch, Method.LBFGS: lbfgs_batch, Method.CW: cw_batch}[method](
            model, X, config=config)
    if len(batch) and batch.excluded > 0.1 * len(batch):
        batch.warning = f"{batch.excluded} of {len(batch)} {method.value} DDB computations did not converge"
        log.warning(batch.warning)
    return batch


def write_ddb_csv(batch: DdbBatch, path, timeslots=None) -> None:
    ts = np.arange(len(batch)) if timeslots is None else timeslots
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timeslot", "method", "distance", "iterations", "converged"])
        for t, d, k, c in zip(ts, batch.distances, batch.iterations, batch.converged):
            w.writerow([int(t), batch.method.value, repr(float(d)), int(k), int(c)])
