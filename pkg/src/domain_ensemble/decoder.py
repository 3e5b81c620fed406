"""Beam search and exhaustive search over an adaptive ensemble.

Each hypothesis carries its own task posterior, updated with the tokens it
has committed, so hypotheses that share a beam can disagree about the task.
Scores are sums of log mixture probabilities; ``max_len`` counts emitted
tokens including the end marker.
"""

from __future__ import annotations

import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import BOS_ID, EOS_ID
from .ensemble import EnsembleSpec, TaskPosteriorState, ensemble_weights, init_posterior, model_steps, update_posterior

log = logging.getLogger(__name__)

MAX_EXHAUSTIVE = 200_000


class SearchSpaceTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class TrajectoryStep:
    token: int
    weights: np.ndarray
    posterior: np.ndarray


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    state: TaskPosteriorState
    finished: bool = False
    trail: tuple[TrajectoryStep, ...] = ()

    @property
    def output(self) -> tuple[int, ...]:
        return self.tokens[:-1] if self.finished else self.tokens


@dataclass(frozen=True)
class DecodeResult:
    tokens: tuple[int, ...]
    score: float
    finished: bool
    trajectory: tuple[TrajectoryStep, ...]


def _expand(spec: EnsembleSpec, x, hyps: Sequence[Hypothesis], length_norm: bool, limit: int | None = None):
    """One-token extensions of ``hyps``, best first, as (key, tokens, parent, token, score).

    With ``limit`` only the top ``limit`` (plus anything tied with the last
    of them) are built.
    """
    probs = model_steps(spec, x, [h.tokens for h in hyps])
    weights = np.stack([ensemble_weights(h.state, spec) for h in hyps])
    mix = np.einsum("nk,knv->nv", weights, probs)
    with np.errstate(divide="ignore"):
        scores = np.array([h.score for h in hyps])[:, None] + np.log(mix)
    scores[:, BOS_ID] = -np.inf
    keys = scores / np.array([len(h.tokens) + 1 for h in hyps])[:, None] if length_norm else scores
    flat = keys.ravel()
    valid = np.flatnonzero(flat > -np.inf)
    if limit is not None and len(valid) > limit:
        cut = np.partition(flat[valid], len(valid) - limit)[len(valid) - limit]
        valid = valid[flat[valid] >= cut]
    V = spec.vocab_size
    cands = [(-flat[i], hyps[i // V].tokens + (int(i % V),), i // V, int(i % V), float(scores.flat[i])) for i in valid]
    cands.sort(key=lambda c: (c[0], c[1]))
    return cands, probs, weights


def _child(spec, h: Hypothesis, y: int, score: float, probs_n: np.ndarray, weights_n: np.ndarray) -> Hypothesis:
    step = TrajectoryStep(y, weights_n, h.state.posterior)
    return Hypothesis(h.tokens + (y,), score, update_posterior(h.state, spec, probs_n[:, y]),
                      finished=(y == EOS_ID), trail=h.trail + (step,))


def _result(h: Hypothesis) -> DecodeResult:
    trail = h.trail[:-1] if h.finished else h.trail
    return DecodeResult(h.output, h.score, h.finished, trail)


def beam_decode(spec: EnsembleSpec, x: Sequence[int], beam_size: int = 4, max_len: int = 50,
                length_norm: bool = False) -> DecodeResult:
    """Highest-scoring finished hypothesis found by beam search.

    Ties are broken by the lexicographically smaller token sequence. If
    nothing finishes within ``max_len`` tokens the best unfinished
    hypothesis is returned with ``finished=False``.
    """
    if beam_size < 1 or max_len < 1:
        raise ValueError("beam_size and max_len must be >= 1")
    x = tuple(x)
    active = [Hypothesis((), 0.0, init_posterior(spec, x))]
    completed: list[Hypothesis] = []

    def rank(h):
        return (-(h.score / len(h.tokens) if length_norm else h.score), h.tokens)

    for _ in range(max_len):
        cands, probs, weights = _expand(spec, x, active, length_norm, limit=beam_size)
        nxt = []
        for _, _, n, y, score in cands[:beam_size]:
            child = _child(spec, active[n], y, score, probs[:, n, :], weights[n])
            (completed if child.finished else nxt).append(child)
        active = nxt
        if not active:
            break
        if completed and not length_norm:
            # scores only decrease as hypotheses grow
            if max(h.score for h in active) < max(h.score for h in completed):
                break
    if completed:
        return _result(min(completed, key=rank))
    log.warning("no hypothesis finished within %d tokens", max_len)
    return _result(min(active, key=rank))


def exhaustive_decode(spec: EnsembleSpec, x: Sequence[int], max_len: int, limit: int = MAX_EXHAUSTIVE) -> DecodeResult:
    """Exact argmax over all sequences of at most ``max_len`` tokens ending in the end marker."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    branching = spec.vocab_size - 2
    prefixes = sum(branching**i for i in range(max_len))
    if prefixes > limit:
        raise SearchSpaceTooLarge(f"{prefixes} prefixes exceed the limit of {limit}")
    x = tuple(x)
    best: Hypothesis | None = None
    frontier = [Hypothesis((), 0.0, init_posterior(spec, x))]
    for _ in range(max_len):
        nxt = []
        for h in frontier:
            cands, probs, weights = _expand(spec, x, [h], False)
            for _, _, _, y, score in cands:
                child = _child(spec, h, y, score, probs[:, 0, :], weights[0])
                if child.finished:
                    if best is None or (child.score, _neg(child.tokens)) > (best.score, _neg(best.tokens)):
                        best = child
                else:
                    nxt.append(child)
        frontier = nxt
    if best is None:
        raise ValueError("no finished sequence has non-zero probability")
    return _result(best)


def _neg(tokens):
    # makes max() prefer the lexicographically smaller sequence
    return tuple(-t for t in tokens) + (1,)


def decode_corpus(spec: EnsembleSpec, sources: Sequence[Sequence[int]], beam_size: int = 4, max_len: int = 50,
                  workers: int = 1, length_norm: bool = False) -> list[DecodeResult]:
    """Decode every source; output order always follows input order."""
    if workers <= 1:
        return [beam_decode(spec, x, beam_size, max_len, length_norm) for x in sources]
    with ProcessPoolExecutor(workers) as pool:
        return list(pool.map(_decode_one, [(spec, tuple(x), beam_size, max_len, length_norm) for x in sources]))


def _decode_one(args):
    return beam_decode(*args)


def trajectory_tsv(result: DecodeResult, tokens: Sequence[str] | None = None) -> str:
    """Rows of step, token, W_1..W_K, posterior_1..posterior_T."""
    if not result.trajectory:
        return "step\ttoken\n"
    K = len(result.trajectory[0].weights)
    T = len(result.trajectory[0].posterior)
    buf = io.StringIO()
    buf.write("\t".join(["step", "token"] + [f"W_{k + 1}" for k in range(K)] + [f"posterior_{t + 1}" for t in range(T)]) + "\n")
    for i, st in enumerate(result.trajectory, start=1):
        name = tokens[st.token] if tokens is not None else str(st.token)
        vals = [f"{v:.6f}" for v in st.weights] + [f"{v:.6f}" for v in st.posterior]
        buf.write("\t".join([str(i), name] + vals) + "\n")
    return buf.getvalue()
