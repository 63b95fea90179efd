"""Adversarial spectrum attacks mounted from a subset of compromised nodes.

Perturbations only ever touch the controlled coordinates and are clamped so
that reported powers stay non-negative.  The attacker crafts against its own
model (the fusion model itself in white-box mode, a surrogate otherwise);
success is always judged by the true fusion model.

Node indices are 0-based throughout this module.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import ddb
from .fusion import FusionClassifier, TrainConfig, train
from .spectrum import Dataset, SensingVector

OVERSHOOT = 1.02
# boundary-seeking attacks only need a point past the attacker's boundary, not
# a tight minimum, so the penalty solver gets a much smaller budget here
ATTACK_SEARCH = ddb.SearchConfig(lbfgs_search_steps=3, lbfgs_steps=100, lbfgs_learning_rate=0.05)


class Mode(str, enum.Enum):
    WHITE_BOX = "white_box"
    SURROGATE = "surrogate"


class AttackMethod(str, enum.Enum):
    FGSM = "fgsm"
    PGD = "pgd"
    DEEPFOOL = "deepfool"
    LBFGS = "lbfgs"


class InfeasibleAttackError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AttackerKnowledge:
    fusion: FusionClassifier
    controlled_nodes: frozenset = frozenset()
    mode: Mode = Mode.SURROGATE
    surrogate: FusionClassifier | None = None

    def __post_init__(self):
        nodes = frozenset(int(j) for j in self.controlled_nodes)
        object.__setattr__(self, "controlled_nodes", nodes)
        object.__setattr__(self, "mode", Mode(self.mode))
        n = self.fusion.input_dim
        bad = sorted(j for j in nodes if not 0 <= j < n)
        if bad:
            raise ValueError(f"controlled node indices {bad} outside 0..{n - 1}")
        if (self.surrogate is not None) != (self.mode is Mode.SURROGATE):
            raise ValueError("a surrogate model is required in surrogate mode and only there")
        if self.surrogate is not None and self.surrogate.input_dim != n:
            raise ValueError("surrogate input dimension differs from the fusion model")

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.fusion.input_dim)
        m[sorted(self.controlled_nodes)] = 1.0
        return m

    @property
    def model(self) -> FusionClassifier:
        """The model the attacker crafts against."""
        return self.fusion if self.mode is Mode.WHITE_BOX else self.surrogate


@dataclass(frozen=True)
class AttackConfig:
    method: AttackMethod = AttackMethod.FGSM
    step_size: float = 1.0
    pgd_steps: int = 10
    occurrence_ratio: float = 1.0
    seed: int = 0
    search: ddb.SearchConfig = ATTACK_SEARCH

    def __post_init__(self):
        object.__setattr__(self, "method", AttackMethod(self.method))
        if not (np.isfinite(self.step_size) and self.step_size > 0):
            raise ValueError("step_size must be positive and finite")
        if self.pgd_steps < 1:
            raise ValueError("pgd_steps must be >= 1")
        if not 0.0 <= self.occurrence_ratio <= 1.0:
            raise ValueError("occurrence_ratio must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class AttackOutcome:
    original: SensingVector
    perturbed: SensingVector
    attacked: bool
    success: bool
    perturbation_norm: float


def train_surrogate(values, fusion_labels, config: TrainConfig = TrainConfig(seed=1)) -> FusionClassifier:
    """Fit the attacker's model to observed fusion-center decisions.

    ``train_accuracy`` of the result is its agreement with those decisions.
    """
    values = np.asarray(values, dtype=float)
    fusion_labels = np.asarray(fusion_labels)
    if values.ndim != 2 or len(values) == 0:
        raise ValueError("no observations to train on")
    if len(np.unique(fusion_labels)) < 2:
        raise ValueError("observations carry a single fusion label; cannot train a surrogate")
    return train(Dataset(values, fusion_labels), config)


def agreement(a, b, X) -> float:
    """Fraction of rows on which two models produce the same label."""
    return float(np.mean(np.asarray(a.classify(X)) == np.asarray(b.classify(X))))


def _flip_sign(model, X):
    # +1 raises the margin (label 0 -> 1), -1 lowers it
    return np.where(np.asarray(model.classify(X)) == 0, 1.0, -1.0)


def fgsm_perturb(model, X, mask, step_size: float) -> np.ndarray:
    """One signed-gradient step of ``step_size`` toward the other label."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    grad = model.margin_gradient(X)
    delta = step_size * _flip_sign(model, X)[:, None] * np.sign(grad) * mask
    return np.maximum(X + delta, 0.0)


def pgd_perturb(model, X, mask, step_size: float, steps: int) -> np.ndarray:
    """Normalized-gradient steps of L2 length ``step_size``, projected onto the
    controlled coordinates and the non-negative orthant; rows stop once the
    attacker's label flips."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    start = np.asarray(model.classify(X))
    sign = np.where(start == 0, 1.0, -1.0)
    xa = X.copy()
    active = np.arange(len(X))
    for _ in range(steps):
        grad = model.margin_gradient(xa[active]) * mask
        nrm = np.linalg.norm(grad, axis=1)
        ok = nrm > 0
        active, grad, nrm = active[ok], grad[ok], nrm[ok]
        if not active.size:
            break
        xa[active] = np.maximum(xa[active] + step_size * (sign[active] / nrm)[:, None] * grad, 0.0)
        active = active[np.asarray(model.classify(xa[active])) == start[active]]
        if not active.size:
            break
    return xa


def boundary_perturb(model, X, mask, method: AttackMethod, search: ddb.SearchConfig):
    """Masked DeepFool or penalty-method point past the attacker's boundary.

    Returns the perturbed rows and a per-row convergence flag; rows that did
    not converge are returned unchanged.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if method is AttackMethod.DEEPFOOL:
        batch = ddb.deepfool_batch(model, X, search, mask=mask)
    else:
        lo, hi = search.box(X)
        free = mask.astype(bool)
        lower = np.where(free, np.maximum(lo, 0.0), X)
        upper = np.where(free, hi, X)
        batch = ddb.lbfgs_batch(model, X, config=search, lower=lower, upper=upper)
    ok = batch.converged & np.isfinite(batch.distances)
    out = X.copy()
    out[ok] = np.maximum(X[ok] + OVERSHOOT * (batch.points[ok] - X[ok]), 0.0)
    return out, ok


def perturb(knowledge: AttackerKnowledge, X, config: AttackConfig):
    """Apply ``config.method`` to every row of ``X``; returns ``(X', ok)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != knowledge.fusion.input_dim:
        raise ValueError(f"expected rows of length {knowledge.fusion.input_dim}, got {X.shape[1]}")
    model, mask = knowledge.model, knowledge.mask
    ok = np.ones(len(X), dtype=bool)
    if not X.size or not mask.any():
        return X.copy(), ok
    if config.method is AttackMethod.FGSM:
        out = fgsm_perturb(model, X, mask, config.step_size)
    elif config.method is AttackMethod.PGD:
        out = pgd_perturb(model, X, mask, config.step_size, config.pgd_steps)
    else:
        out, ok = boundary_perturb(model, X, mask, config.method, config.search)
    # clamping can only touch controlled coordinates, but make the mask exact
    out = np.where(mask.astype(bool), out, X)
    return out, ok


@dataclass(frozen=True, eq=False)
class AttackTrace:
    """Column-wise attack outcomes over a timeslot stream."""

    timeslots: np.ndarray
    original: np.ndarray
    perturbed: np.ndarray
    labels: np.ndarray
    attacked: np.ndarray
    success: np.ndarray
    method: AttackMethod

    def __len__(self):
        return len(self.timeslots)

    @property
    def perturbation_norms(self) -> np.ndarray:
        return np.linalg.norm(self.perturbed - self.original, axis=1)

    @property
    def success_rate(self) -> float:
        n = int(self.attacked.sum())
        return float(self.success.sum() / n) if n else 0.0

    @property
    def outcomes(self) -> list[AttackOutcome]:
        norms = self.perturbation_norms
        return [AttackOutcome(SensingVector(int(t), x, int(y)), SensingVector(int(t), xp, int(y)),
                              bool(a), bool(s), float(d))
                for t, x, xp, y, a, s, d in zip(self.timeslots, self.original, self.perturbed,
                                                self.labels, self.attacked, self.success, norms)]

    def to_dataset(self, template: Dataset) -> Dataset:
        return Dataset(self.perturbed, self.labels, self.timeslots, template.scenario,
                       template.seed, template.columns)


def attack_schedule(count: int, ratio: float, seed: int) -> np.ndarray:
    """Independent Bernoulli(ratio) attack decision per stream position."""
    return np.random.default_rng(seed).random(count) < ratio


def schedule_attacks(data: Dataset, knowledge: AttackerKnowledge, config: AttackConfig) -> AttackTrace:
    attacked = attack_schedule(len(data), config.occurrence_ratio, config.seed)
    X = data.values
    out = np.array(X, copy=True)
    if attacked.any():
        out[attacked], _ = perturb(knowledge, X[attacked], config)
    fusion = knowledge.fusion
    success = attacked & (np.asarray(fusion.classify(out)) != np.asarray(fusion.classify(X)))
    return AttackTrace(data.timeslots, np.array(X), out, data.labels, attacked, success, config.method)


def _single_outcome(knowledge, x, config, timeslot=0, label=-1) -> AttackOutcome:
    x = np.asarray(x, dtype=float)
    out, _ = perturb(knowledge, x[None, :], config)
    fusion = knowledge.fusion
    success = fusion.classify(out[0]) != fusion.classify(x)
    return AttackOutcome(SensingVector(timeslot, x, label), SensingVector(timeslot, out[0], label),
                         True, bool(success), float(np.linalg.norm(out[0] - x)))


def fgsm_attack(knowledge, x, step_size: float = 1.0) -> AttackOutcome:
    return _single_outcome(knowledge, x, AttackConfig(AttackMethod.FGSM, step_size))


def pgd_attack(knowledge, x, step_size: float = 1.0, pgd_steps: int = 10) -> AttackOutcome:
    return _single_outcome(knowledge, x, AttackConfig(AttackMethod.PGD, step_size, pgd_steps))


def deepfool_attack(knowledge, x, search: ddb.SearchConfig = ATTACK_SEARCH) -> AttackOutcome:
    return _single_outcome(knowledge, x, AttackConfig(AttackMethod.DEEPFOOL, search=search))


def lbfgs_attack(knowledge, x, search: ddb.SearchConfig = ATTACK_SEARCH) -> AttackOutcome:
    return _single_outcome(knowledge, x, AttackConfig(AttackMethod.LBFGS, search=search))


@dataclass(frozen=True, eq=False)
class TargetedOutcome:
    perturbed: np.ndarray
    target_distance: float
    achieved_distance: float
    converged: bool
    # False when non-negative powers on the controlled nodes cannot reach the
    # target even in the attacker's own view
    feasible: bool = True

    @property
    def error(self) -> float:
        return abs(self.achieved_distance - self.target_distance)


def _nonnegative_min_norm_shift(x, w, r):
    """Smallest ``delta`` with ``w.delta = r`` and ``x + delta >= 0``.

    The solution has the form ``max(lam * w, -x)``, and ``w.delta(lam)`` is
    non-decreasing in ``lam``, so ``lam`` is found by root bracketing.  Returns
    ``(delta, feasible)``; when ``r`` is out of reach the extreme point on the
    reachable side is returned.
    """
    def reach(lam):
        return float(w @ np.maximum(lam * w, -x))

    lo_limit = -np.inf if np.any(w < 0) else -float(np.sum(w * x))
    hi_limit = np.inf if np.any(w > 0) else -float(np.sum(w * x))
    if r == 0.0:
        return np.zeros_like(x), True
    if not lo_limit < r < hi_limit:
        side = 1.0 if r > 0 else -1.0
        return np.where(side * w < 0, -x, 0.0), False
    lam = r / float(w @ w)
    a, b = (0.0, lam) if lam > 0 else (lam, 0.0)
    while reach(b) < r:
        b *= 2.0
    while reach(a) > r:
        a *= 2.0
    lam = optimize.brentq(lambda t: reach(t) - r, a, b, xtol=1e-14, rtol=1e-15)
    return np.maximum(lam * w, -x), True


def targeted_ddb_attack(fusion, direction: ddb.BoundaryDirection, x, target_distance: float,
                        controlled_nodes, believed_x=None,
                        search: ddb.SearchConfig = ddb.SearchConfig()) -> TargetedOutcome:
    """Oracle attacker that places ``x`` at a chosen distance past the linear
    LRT boundary by changing only the controlled coordinates.

    The change solves ``w_C . x'_C = s*||w|| * d_t - w_U . x_U - b`` with ``s``
    pointing to the opposite side of the boundary, at minimum norm subject to
    non-negative powers.  ``believed_x`` supplies the attacker's (possibly
    wrong) view of the uncontrolled coordinates.  The achieved distance is then
    measured on ``fusion`` by binary search along the same direction.
    """
    if target_distance < 0:
        raise ValueError("target distance must be non-negative")
    x = np.asarray(x, dtype=float)
    w = np.asarray(direction.weights, dtype=float)
    ctrl = np.zeros(x.size, dtype=bool)
    ctrl[sorted(int(j) for j in controlled_nodes)] = True
    if not np.any(w[ctrl]):
        raise InfeasibleAttackError("controlled nodes carry zero weight in the boundary statistic")
    view = x if believed_x is None else np.where(ctrl, x, np.asarray(believed_x, dtype=float))
    stat = float(w @ view + direction.bias)
    side = -1.0 if stat > 0 else 1.0
    goal = side * target_distance * float(np.linalg.norm(w))
    delta, feasible = _nonnegative_min_norm_shift(x[ctrl], w[ctrl], goal - stat)
    xp = x.copy()
    xp[ctrl] = np.maximum(x[ctrl] + delta, 0.0)
    res = ddb.binary_search_ddb(fusion, xp, direction, search)
    return TargetedOutcome(xp, float(target_distance), res.distance, res.converged, feasible)


def write_attack_csv(trace: AttackTrace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timeslot", "attacked", "success", "perturbation_norm", "method"])
        for t, a, s, d in zip(trace.timeslots, trace.attacked, trace.success, trace.perturbation_norms):
            w.writerow([int(t), int(a), int(s), repr(float(d)), trace.method.value])
