"""Fine-tuning with no regularization, L2, or elastic weight consolidation.

The objective minimized by every routine here is

    mean token NLL on the batch + strength * sum_j F_j (theta_j - anchor_j)^2

with ``F = 1`` for L2 and ``F`` a diagonal empirical Fisher estimate for
EWC. Averaging the data term per token keeps the useful range of
``strength`` independent of corpus size.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .seqmodel import TokenBatch, ToyNeuralModel, make_batch

log = logging.getLogger(__name__)

MODES = ("none", "l2", "ewc")


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class FisherEstimate:
    values: np.ndarray
    samples: int


@dataclass
class RegularizerConfig:
    mode: str = "none"
    strength: float = 0.0
    anchor: np.ndarray | None = None
    fisher: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.strength < 0:
            raise ValueError("regularization strength must be non-negative")
        if self.mode != "none" and self.anchor is None:
            raise ValueError(f"mode {self.mode!r} needs an anchor parameter vector")
        if self.mode == "ewc":
            if self.fisher is None:
                raise ValueError("ewc mode needs a Fisher vector")
            if np.any(np.asarray(self.fisher) < 0):
                raise ValueError("Fisher entries must be non-negative")

    @property
    def weights(self) -> np.ndarray | None:
        if self.mode == "none":
            return None
        if self.mode == "l2":
            return np.ones_like(self.anchor)
        return np.asarray(self.fisher, dtype=float)

    def check(self, model: ToyNeuralModel) -> None:
        if self.mode == "none":
            return
        if self.anchor.shape != model.theta.shape or self.weights.shape != model.theta.shape:
            raise ValueError(f"regularizer shapes {self.anchor.shape} do not match model parameters {model.theta.shape}")


def _as_batch(model, data) -> TokenBatch:
    return data if isinstance(data, TokenBatch) else make_batch(data, model.src_vocab_size)


def estimate_fisher_diagonal(model: ToyNeuralModel, data, samples: int | None = None,
                             rng: np.random.Generator | None = None) -> FisherEstimate:
    """Mean over target tokens of the squared per-token log-likelihood gradient.

    With ``samples`` at least the number of tokens (or None) every token is
    used exactly once; otherwise ``samples`` tokens are drawn without
    replacement from ``rng``.
    """
    batch = _as_batch(model, data) if len(data) else None
    if batch is None or len(batch) == 0:
        raise ValueError("cannot estimate Fisher information from empty data")
    if samples is not None and samples < 1:
        raise ValueError("samples must be >= 1")
    if samples is not None and samples < len(batch):
        rng = rng if rng is not None else np.random.default_rng(0)
        batch = batch.subset(np.sort(rng.choice(len(batch), size=samples, replace=False)))
    values = model.squared_token_gradients(batch) / len(batch)
    return FisherEstimate(values, len(batch))


def penalty(theta: np.ndarray, cfg: RegularizerConfig) -> float:
    if cfg.mode == "none":
        return 0.0
    d = theta - cfg.anchor
    return float(cfg.strength * np.sum(cfg.weights * d * d))


def regularized_loss(model: ToyNeuralModel, data, cfg: RegularizerConfig) -> float:
    cfg.check(model)
    batch = _as_batch(model, data)
    nll = -model.log_likelihood(batch) / len(batch)
    if cfg.mode == "none":
        return nll
    return nll + penalty(model.theta, cfg)


def regularized_gradient(model: ToyNeuralModel, data, cfg: RegularizerConfig) -> np.ndarray:
    """Gradient of `regularized_loss` (the descent direction is its negation)."""
    cfg.check(model)
    batch = _as_batch(model, data)
    g = -model.gradient(batch) / len(batch)
    if cfg.mode == "none":
        return g
    return g + 2.0 * cfg.strength * cfg.weights * (model.theta - cfg.anchor)


@dataclass
class TrainTrace:
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    penalty: list[float] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "loss", "penalty"])
            for row in zip(self.steps, self.loss, self.penalty):
                w.writerow([row[0], repr(row[1]), repr(row[2])])


def _minibatches(n: int, batch_size: int | None, rng: np.random.Generator):
    if batch_size is None or batch_size >= n:
        while True:
            yield np.arange(n)
    while True:
        perm = rng.permutation(n)
        for i in range(0, n, batch_size):
            yield np.sort(perm[i : i + batch_size])


def fine_tune(model: ToyNeuralModel, data: Sequence, cfg: RegularizerConfig | None = None, steps: int = 1000,
              learning_rate: float = 1.0, batch_size: int | None = 32, seed: int = 0):
    """Fixed-learning-rate descent on shuffled minibatches of sentence pairs.

    The data term takes a plain gradient step; the quadratic penalty is
    applied as its exact proximal step,

        theta <- (theta - lr * g_data + c * anchor) / (1 + c),  c = 2 lr strength F,

    which coincides with a gradient step to first order but stays stable
    for any strength. With strength 0 it reduces to plain gradient descent.
    Returns ``(new_model, trace)``; the input model is not modified.
    ``batch_size=None`` means full-batch descent.
    """
    cfg = cfg if cfg is not None else RegularizerConfig()
    if steps < 0:
        raise ValueError("steps must be >= 0")
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    if not len(data):
        raise ValueError("cannot fine-tune on empty data")
    cfg.check(model)
    out = model.copy()
    trace = TrainTrace()
    pairs = list(data)
    order = _minibatches(len(pairs), batch_size, np.random.default_rng(seed))
    shrink = None if cfg.mode == "none" else 2.0 * learning_rate * cfg.strength * cfg.weights
    full = make_batch(pairs, model.src_vocab_size) if batch_size is None or batch_size >= len(pairs) else None
    for step in range(steps):
        idx = next(order)
        batch = full if full is not None else make_batch([pairs[i] for i in idx], model.src_vocab_size)
        loss = regularized_loss(out, batch, cfg)
        grad = -out.gradient(batch) / len(batch)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise NumericalError(f"non-finite loss or gradient at step {step} (loss={loss})")
        trace.steps.append(step)
        trace.loss.append(loss)
        trace.penalty.append(penalty(out.theta, cfg))
        theta = out.theta - learning_rate * grad
        if shrink is not None:
            theta = (theta + shrink * cfg.anchor) / (1.0 + shrink)
        out.set_theta(theta)
    return out, trace


def train_epochs(model, data, epochs: int, batch_size: int | None = 32, **kw):
    """`fine_tune` with the step count expressed in passes over ``data``."""
    per_epoch = 1 if batch_size is None else -(-len(data) // batch_size)
    return fine_tune(model, data, steps=epochs * per_epoch, batch_size=batch_size, **kw)


def perplexity(model, data) -> float:
    """exp of the mean negative log-likelihood per target token (end marker included)."""
    if isinstance(model, ToyNeuralModel):
        batch = _as_batch(model, data)
        return float(np.exp(-model.log_likelihood(batch) / len(batch)))
    n = sum(len(y) + 1 for _, y in data)
    return float(np.exp(-model.log_likelihood(data) / n))
