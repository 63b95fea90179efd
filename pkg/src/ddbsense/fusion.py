"""Fusion-center classifier: a small MLP over raw sensing vectors.

The network emits two scores ``(f_0, f_1)``.  Inputs are standardized inside
the model, so every public method takes raw power values and every gradient is
with respect to raw values.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .spectrum import Dataset

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


def _softplus(z):
    return np.logaddexp(0.0, z)


# activation and its derivative written in terms of the activation's output
ACTIVATIONS = {
    "tanh": (np.tanh, lambda a: 1.0 - a ** 2),
    "softplus": (_softplus, lambda a: -np.expm1(-a)),
}


class TrainingError(RuntimeError):
    def __init__(self, epoch, msg="non-finite loss"):
        super().__init__(f"training diverged at epoch {epoch}: {msg}")
        self.epoch = epoch


class PredictionScores(NamedTuple):
    score_0: float
    score_1: float


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.001
    hidden_sizes: tuple[int, ...] = (32, 32)
    activation: str = "softplus"
    seed: int = 0
    target_accuracy: float | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not (np.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ValueError("learning_rate must be positive and finite")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if any(h < 1 for h in self.hidden_sizes):
            raise ValueError("hidden sizes must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.target_accuracy is not None and not 0 < self.target_accuracy <= 1:
            raise ValueError("target_accuracy must lie in (0, 1]")


def _as_batch(x, dim):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != dim:
        raise ValueError(f"expected input dimension {dim}, got shape {x.shape}")
    return X, single


@dataclass(frozen=True, eq=False)
class FusionClassifier:
    weights: tuple
    biases: tuple
    mean: np.ndarray
    std: np.ndarray
    activation: str = "tanh"
    train_accuracy: float | None = field(default=None, compare=False)

    def __post_init__(self):
        ws = tuple(np.array(w, dtype=float) for w in self.weights)
        bs = tuple(np.array(b, dtype=float) for b in self.biases)
        mean = np.array(self.mean, dtype=float)
        std = np.array(self.std, dtype=float)
        for a in (*ws, *bs, mean, std):
            a.setflags(write=False)
        if not ws or len(ws) != len(bs):
            raise ValueError("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(ws, bs)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight/bias shape mismatch")
            if i and w.shape[0] != ws[i - 1].shape[1]:
                raise ValueError(f"layer {i}: input size does not match previous layer")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i}: non-finite parameters")
        if ws[-1].shape[1] != 2:
            raise ValueError("final layer must produce two scores")
        if mean.shape != (ws[0].shape[0],) or std.shape != mean.shape:
            raise ValueError("normalization statistics must match the input dimension")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std)) and np.all(std > 0)):
            raise ValueError("normalization statistics must be finite with positive std")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def affine(cls, w, b) -> "FusionClassifier":
        """Linear model with margin ``f_1 - f_0 = w.x + b`` and no normalization."""
        w = np.asarray(w, dtype=float)
        W = np.zeros((w.size, 2))
        W[:, 1] = w
        return cls((W,), (np.array([0.0, float(b)]),), np.zeros(w.size), np.ones(w.size))

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim] + [w.shape[1] for w in self.weights]

    def _forward(self, X):
        act = ACTIVATIONS[self.activation][0]
        acts = [(X - self.mean) / self.std]
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w + b
            acts.append(z if i == last else act(z))
        return acts

    def _backward(self, acts, dout):
        deriv = ACTIVATIONS[self.activation][1]
        d = dout
        for i in range(len(self.weights) - 1, -1, -1):
            d = d @ self.weights[i].T
            if i:
                d = d * deriv(acts[i])
        return d / self.std

    def scores(self, x) -> np.ndarray:
        X, single = _as_batch(x, self.input_dim)
        out = self._forward(X)[-1]
        return out[0] if single else out

    def margin(self, x):
        s = self.scores(x)
        return s[..., 1] - s[..., 0]

    def classify(self, x):
        """Label 1 iff ``f_1 > f_0``; exact ties go to label 0."""
        m = self.margin(x)
        return (m > 0).astype(int) if np.ndim(m) else int(m > 0)

    def margin_gradient(self, x) -> np.ndarray:
        X, single = _as_batch(x, self.input_dim)
        acts = self._forward(X)
        dout = np.tile([-1.0, 1.0], (X.shape[0], 1))
        g = self._backward(acts, dout)
        return g[0] if single else g

    def score_gradients(self, x) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of ``f_0`` and ``f_1`` with respect to the raw input."""
        X, single = _as_batch(x, self.input_dim)
        acts = self._forward(X)
        ones = np.ones((X.shape[0], 1))
        zeros = np.zeros_like(ones)
        g0 = self._backward(acts, np.hstack([ones, zeros]))
        g1 = self._backward(acts, np.hstack([zeros, ones]))
        return (g0[0], g1[0]) if single else (g0, g1)


class CountingModel:
    """Proxy that counts forward and gradient evaluations (in rows)."""

    def __init__(self, model):
        self.model = model
        self.forward_evals = 0
        self.gradient_evals = 0

    @property
    def input_dim(self):
        return self.model.input_dim

    @staticmethod
    def _rows(x):
        return 1 if np.ndim(x) == 1 else len(x)

    def scores(self, x):
        self.forward_evals += self._rows(x)
        return self.model.scores(x)

    def margin(self, x):
        self.forward_evals += self._rows(x)
        return self.model.margin(x)

    def classify(self, x):
        self.forward_evals += self._rows(x)
        return self.model.classify(x)

    def margin_gradient(self, x):
        self.gradient_evals += self._rows(x)
        return self.model.margin_gradient(x)

    def score_gradients(self, x):
        self.gradient_evals += self._rows(x)
        return self.model.score_gradients(x)


def predict_scores(model: FusionClassifier, x) -> PredictionScores:
    s = model.scores(_single(model, x))
    return PredictionScores(float(s[0]), float(s[1]))


def classify(model: FusionClassifier, x) -> int:
    return int(model.classify(_single(model, x)))


def score_margin(model: FusionClassifier, x) -> float:
    return float(model.margin(_single(model, x)))


def input_gradient(model: FusionClassifier, x) -> np.ndarray:
    return model.margin_gradient(_single(model, x))


def _single(model, x):
    x = np.asarray(x, dtype=float)
    if x.shape != (model.input_dim,):
        raise ValueError(f"expected a vector of length {model.input_dim}, got shape {x.shape}")
    return x


def _init_params(sizes, rng):
    ws, bs = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return ws, bs


def train(dataset: Dataset, config: TrainConfig = TrainConfig()) -> FusionClassifier:
    """Mini-batch SGD with momentum on softmax cross-entropy."""
    X, y = dataset.values, dataset.labels
    if len(np.unique(y)) < 2:
        raise ValueError("training data must contain both labels")
    rng = np.random.default_rng(config.seed)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    Z = (X - mean) / std
    sizes = [X.shape[1], *config.hidden_sizes, 2]
    ws, bs = _init_params(sizes, rng)
    vw = [np.zeros_like(w) for w in ws]
    vb = [np.zeros_like(b) for b in bs]
    onehot = np.eye(2)[y]
    n = len(y)
    last = len(ws) - 1
    act, deriv = ACTIVATIONS[config.activation]
    acc = 0.0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            acts = [Z[idx]]
            for i, (w, b) in enumerate(zip(ws, bs)):
                z = acts[-1] @ w + b
                acts.append(z if i == last else act(z))
            logits = acts[-1]
            shifted = logits - logits.max(axis=1, keepdims=True)
            log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
            t = onehot[idx]
            total -= np.sum(t * log_p)
            d = (np.exp(log_p) - t) / len(idx)
            for i in range(last, -1, -1):
                gw = acts[i].T @ d + config.weight_decay * ws[i]
                gb = d.sum(axis=0)
                if i:
                    d = (d @ ws[i].T) * deriv(acts[i])
                vw[i] = config.momentum * vw[i] - config.learning_rate * gw
                vb[i] = config.momentum * vb[i] - config.learning_rate * gb
                ws[i] += vw[i]
                bs[i] += vb[i]
        if not np.isfinite(total) or not all(np.all(np.isfinite(w)) for w in ws):
            raise TrainingError(epoch)
        model = FusionClassifier(tuple(ws), tuple(bs), mean, std, config.activation)
        acc = float(np.mean(model.classify(X) == y))
        log.debug("epoch %d loss %.5f accuracy %.4f", epoch, total / n, acc)
        if config.target_accuracy is not None and acc >= config.target_accuracy:
            break
    return replace(model, train_accuracy=acc)


def accuracy(model, dataset: Dataset) -> float:
    return float(np.mean(model.classify(dataset.values) == dataset.labels))


def save(model: FusionClassifier, path) -> None:
    arrays = {"format_version": np.array(FORMAT_VERSION), "mean": model.mean, "std": model.std,
              "activation": np.array(model.activation), "n_layers": np.array(len(model.weights))}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays[f"w{i}"] = w
        arrays[f"b{i}"] = b
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load(path) -> FusionClassifier:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["format_version"])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version}")
        k = int(z["n_layers"])
        return FusionClassifier(tuple(z[f"w{i}"] for i in range(k)), tuple(z[f"b{i}"] for i in range(k)),
                                z["mean"], z["std"], str(z["activation"]))
