"""Ensemble weighting schemes for K models and T tasks.

Per-step weights are ``W = lam @ p(t | h_i, x)`` where ``lam`` is a K x T
column-stochastic matrix and the task posterior is tracked as one log
accumulator per task:

    alpha_t = log p(t | x) + sum_{j < i} log sum_k lam[k, t] p_k(y_j | h_j, x)

Five schemes fix the prior and ``lam``:

    scheme        prior p(t|x)       lam            posterior updates
    uniform       1/T                1/K            no
    is            source LMs         identity       no
    identity_bi   1/T                identity       yes
    bi            1/T                from LMs       yes
    bi_is         source LMs         from LMs       yes
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .ngram import NgramLm, log_prob_sentence

SCHEMES = ("uniform", "is", "identity_bi", "bi", "bi_is")
ADAPTIVE = frozenset({"identity_bi", "bi", "bi_is"})
INFORMATIVE = frozenset({"is", "bi_is"})
_TOL = 1e-9


def logsumexp(a: np.ndarray, axis: int | None = None, keepdims: bool = False):
    """log(sum(exp(a))) with the maximum factored out; all -inf gives -inf.

    Same result as scipy.special.logsumexp; inlined because the decoder calls
    it on tiny vectors hundreds of thousands of times and scipy's per-call
    overhead dominated decoding time.
    """
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out if keepdims else (np.squeeze(out, axis=axis) if axis is not None else out.reshape(()).item())


@dataclass(frozen=True)
class LambdaMatrix:
    values: np.ndarray
    models: tuple[str, ...] = ()
    tasks: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError("lambda must be a non-empty K x T matrix")
        if np.any(v < 0) or np.any(np.abs(v.sum(axis=0) - 1.0) > _TOL):
            raise ValueError("lambda columns must be probability vectors")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        K, T = v.shape
        object.__setattr__(self, "models", tuple(self.models) or tuple(f"model{k + 1}" for k in range(K)))
        object.__setattr__(self, "tasks", tuple(self.tasks) or tuple(f"task{t + 1}" for t in range(T)))
        if len(self.models) != K or len(self.tasks) != T:
            raise ValueError("name lists must match the lambda shape")

    @property
    def K(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    def to_tsv(self) -> str:
        buf = io.StringIO()
        buf.write("model\t" + "\t".join(self.tasks) + "\n")
        for name, row in zip(self.models, self.values):
            buf.write(name + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_tsv(cls, text: str) -> "LambdaMatrix":
        lines = [ln.split("\t") for ln in text.strip("\n").split("\n")]
        tasks = tuple(lines[0][1:])
        models = tuple(ln[0] for ln in lines[1:])
        return cls(np.array([[float(v) for v in ln[1:]] for ln in lines[1:]]), models, tasks)


def identity_lambda(K: int, T: int | None = None, names: Sequence[str] = ()) -> LambdaMatrix:
    if T is not None and T != K:
        raise ValueError(f"identity lambda needs K == T (got K={K}, T={T})")
    return LambdaMatrix(np.eye(K), tuple(names), tuple(names))


def uniform_lambda(K: int, T: int | None = None, names: Sequence[str] = ()) -> LambdaMatrix:
    T = K if T is None else T
    return LambdaMatrix(np.full((K, T), 1.0 / K), tuple(names) if len(names) == K else (),
                        tuple(names) if len(names) == T else ())


def estimate_lambda(lms: Sequence[NgramLm], validation: Sequence[Sequence[Sequence[int]]],
                    normalize: bool = True, names: Sequence[str] = ()) -> LambdaMatrix:
    """Domain-task weights from how well each source LM scores each task's validation set.

    ``validation[t]`` holds the source sentences of task t and ``lms[k]``
    scores domain k. Per sentence the score is ``exp(log G_k(x) / |x|)``
    when ``normalize`` is set and the raw probability ``G_k(x)`` otherwise;
    scores are summed over the set and each column is normalized over k.
    All sums are done in log space.
    """
    K, T = len(lms), len(validation)
    if K < 1 or T < 1:
        raise ValueError("need at least one LM and one task")
    log_gbar = np.empty((K, T))
    for t, sents in enumerate(validation):
        if len(sents) == 0:
            raise ValueError(f"validation set for task {t} is empty")
        for k, lm in enumerate(lms):
            scores = np.array([log_prob_sentence(lm, x) for x in sents])
            if normalize:
                scores = scores / np.array([max(len(x), 1) for x in sents])
            log_gbar[k, t] = logsumexp(scores)
    lam = np.exp(log_gbar - logsumexp(log_gbar, axis=0, keepdims=True))
    return LambdaMatrix(lam, tuple(names), tuple(names)) if len(names) == K == T else LambdaMatrix(lam)


@dataclass(frozen=True)
class EnsembleSpec:
    models: tuple
    lam: LambdaMatrix
    scheme: str = "bi"
    lms: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "lms", tuple(self.lms))
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        K, T = self.lam.K, self.lam.T
        if len(self.models) != K:
            raise ValueError(f"lambda has {K} rows but {len(self.models)} models were given")
        if self.scheme == "uniform" and not np.allclose(self.lam.values, 1.0 / K, rtol=0, atol=_TOL):
            raise ValueError("uniform scheme requires lambda == 1/K everywhere")
        if self.scheme in ("is", "identity_bi") and (K != T or not np.array_equal(self.lam.values, np.eye(K))):
            raise ValueError(f"{self.scheme} scheme requires an identity lambda with K == T")
        if self.scheme in INFORMATIVE and len(self.lms) != T:
            raise ValueError(f"{self.scheme} scheme needs one source LM per task ({T}), got {len(self.lms)}")
        sizes = {m.vocab_size for m in self.models}
        if len(sizes) != 1:
            raise ValueError("all models must share one target vocabulary")

    @property
    def K(self) -> int:
        return self.lam.K

    @property
    def T(self) -> int:
        return self.lam.T

    @property
    def vocab_size(self) -> int:
        return self.models[0].vocab_size

    @property
    def adaptive(self) -> bool:
        return self.scheme in ADAPTIVE


def make_spec(scheme: str, models, lms=(), lam: LambdaMatrix | None = None) -> EnsembleSpec:
    """Build the spec for ``scheme``; ``lam`` is only consulted for bi / bi_is."""
    K = len(models)
    if scheme == "uniform":
        lam = uniform_lambda(K)
    elif scheme in ("is", "identity_bi"):
        lam = identity_lambda(K)
    elif lam is None:
        raise ValueError(f"scheme {scheme!r} needs an estimated lambda")
    return EnsembleSpec(tuple(models), lam, scheme, tuple(lms) if scheme in INFORMATIVE else ())


@dataclass(frozen=True)
class TaskPosteriorState:
    alpha: np.ndarray

    @cached_property
    def posterior(self) -> np.ndarray:
        return np.exp(self.alpha - logsumexp(self.alpha))


def init_posterior(spec: EnsembleSpec, x: Sequence[int]) -> TaskPosteriorState:
    """Prior p(t | x): uniform, or proportional to each task's source LM score."""
    T = spec.T
    if spec.scheme in INFORMATIVE:
        joint = np.array([log_prob_sentence(lm, x) for lm in spec.lms])
        if not np.any(np.isfinite(joint)):
            joint = np.zeros(T)
        alpha = joint - logsumexp(joint)
    else:
        alpha = np.full(T, -np.log(T))
    return TaskPosteriorState(alpha)


def update_posterior(state: TaskPosteriorState, spec: EnsembleSpec, token_probs) -> TaskPosteriorState:
    """Fold one committed token into the task posterior.

    ``token_probs[k]`` is p_k(y_i | h_i, x) for the token actually chosen.
    Static schemes ignore the history, so their state is returned as is.
    """
    if not spec.adaptive:
        return state
    mix = np.asarray(token_probs, dtype=float) @ spec.lam.values
    if not np.any(mix > 0):
        raise ValueError("every task assigns the committed token zero probability")
    with np.errstate(divide="ignore"):
        return TaskPosteriorState(state.alpha + np.log(mix))


def ensemble_weights(state: TaskPosteriorState, spec: EnsembleSpec) -> np.ndarray:
    return spec.lam.values @ state.posterior


def model_steps(spec: EnsembleSpec, x, histories) -> np.ndarray:
    """K x len(histories) x V array of every model's next-token distribution."""
    return np.stack([m.step_batch(x, histories) for m in spec.models])


def combined_step(spec: EnsembleSpec, state: TaskPosteriorState, x, h) -> np.ndarray:
    """Mixture ``sum_k W_k p_k(. | h, x)`` under the current posterior."""
    w = ensemble_weights(state, spec)
    return w @ model_steps(spec, x, [h])[:, 0, :]

