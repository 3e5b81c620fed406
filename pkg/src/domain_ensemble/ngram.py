"""Backoff n-gram language models over token ids.

Smoothing is interpolated absolute discounting. Because the lower-order
distribution is interpolated rather than backed off to, the model can be
stored exactly in ARPA layout: every seen n-gram carries its interpolated
probability and every seen context carries the leftover mass as its
backoff weight.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .corpus import BOS_ID, EOS_ID

log = logging.getLogger(__name__)

NEG_INF = float("-inf")
LN10 = math.log(10.0)


@dataclass
class NgramLm:
    """An n-gram model; ``probs[n]`` and ``backoffs[n]`` are keyed by contexts of length n."""

    order: int
    vocab_size: int
    discount: float
    probs: list[dict[tuple[int, ...], dict[int, float]]]
    backoffs: list[dict[tuple[int, ...], float]]

    def __post_init__(self):
        if self.order < 1:
            raise ValueError("order must be >= 1")

    @property
    def predictable(self) -> list[int]:
        """Ids that can be predicted: every id except the begin marker."""
        return [i for i in range(self.vocab_size) if i != BOS_ID]

    def logprob(self, token: int, context: Sequence[int] = ()) -> float:
        """Natural-log p(token | context), walking the backoff chain."""
        context = tuple(context[max(0, len(context) - self.order + 1) :]) if self.order > 1 else ()
        bow = 0.0
        while True:
            n = len(context)
            dist = self.probs[n].get(context)
            if dist is not None and token in dist:
                return bow + dist[token]
            if n == 0:
                return NEG_INF
            bow += self.backoffs[n].get(context, 0.0)
            context = context[1:]

    def distribution(self, context: Sequence[int] = ()) -> np.ndarray:
        """Full probability vector over ids (begin marker gets 0)."""
        out = np.zeros(self.vocab_size)
        for t in self.predictable:
            out[t] = math.exp(self.logprob(t, context))
        return out

    def contexts(self):
        for n in range(self.order):
            yield from self.probs[n].keys()


def _pad(ids: Sequence[int], order: int) -> list[int]:
    return [BOS_ID] * (order - 1) + list(ids) + [EOS_ID]


def train_ngram(mono: Sequence[Sequence[int]], order: int = 4, vocab_size: int | None = None, discount: float = 0.75) -> NgramLm:
    """Train an interpolated absolute-discounting model on id sequences.

    ``vocab_size`` defaults to one past the largest id seen. ``discount=0``
    gives unsmoothed maximum-likelihood estimates.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if not mono:
        raise ValueError("cannot train an n-gram model on an empty corpus")
    if not 0.0 <= discount < 1.0:
        raise ValueError("discount must lie in [0, 1)")
    if vocab_size is None:
        vocab_size = max(max(s, default=0) for s in mono) + 1
    vocab_size = max(vocab_size, EOS_ID + 1)

    counts = [defaultdict(lambda: defaultdict(int)) for _ in range(order)]
    for sent in mono:
        padded = _pad(sent, order)
        for j in range(order - 1, len(padded)):
            tok = padded[j]
            for n in range(order):
                counts[n][tuple(padded[j - n : j])][tok] += 1

    n_predictable = vocab_size - 1
    probs: list[dict] = [dict() for _ in range(order)]
    backoffs: list[dict] = [dict() for _ in range(order)]

    uni = counts[0][()]
    total = sum(uni.values())
    gamma = discount * len(uni) / total
    base = gamma / n_predictable
    dist0 = {}
    for t in range(vocab_size):
        if t == BOS_ID:
            continue
        p = max(uni.get(t, 0) - discount, 0.0) / total + base
        dist0[t] = math.log(p) if p > 0 else NEG_INF
    probs[0][()] = dist0

    lm = NgramLm(order, vocab_size, discount, probs, backoffs)
    for n in range(1, order):
        for ctx, follow in counts[n].items():
            cnt = sum(follow.values())
            gamma = discount * len(follow) / cnt
            dist = {}
            for t, c in follow.items():
                lower = math.exp(lm.logprob(t, ctx[1:]))
                dist[t] = math.log((c - discount) / cnt + gamma * lower)
            probs[n][ctx] = dist
            backoffs[n][ctx] = math.log(gamma) if gamma > 0 else NEG_INF
    return lm


def log_prob_sentence(lm: NgramLm, x: Sequence[int]) -> float:
    """Sum of natural-log conditional probabilities, end marker included."""
    padded = _pad(x, lm.order)
    total = 0.0
    for j in range(lm.order - 1, len(padded)):
        total += lm.logprob(padded[j], padded[max(0, j - lm.order + 1) : j])
    return total


def posterior_from_logprobs(logps, priors=None) -> tuple[np.ndarray, bool]:
    """Normalize ``log p(x|t) + log p(t)`` over tasks.

    Returns ``(posterior, fallback)``; ``fallback`` is True when every task
    scored -inf and a uniform vector was substituted.
    """
    logps = np.asarray(logps, dtype=float)
    T = len(logps)
    if T == 0:
        raise ValueError("need at least one task")
    if priors is None:
        log_prior = np.full(T, -math.log(T))
    else:
        priors = np.asarray(priors, dtype=float)
        if priors.shape != (T,) or np.any(priors < 0) or abs(priors.sum() - 1.0) > 1e-9:
            raise ValueError("priors must be a probability vector with one entry per task")
        with np.errstate(divide="ignore"):
            log_prior = np.log(priors)
    joint = logps + log_prior
    if not np.any(np.isfinite(joint)):
        return np.full(T, 1.0 / T), True
    return np.exp(joint - logsumexp(joint)), False


def source_task_posterior(lms: Sequence[NgramLm], x: Sequence[int], priors=None) -> np.ndarray:
    """p(t | x) proportional to G_t(x) p(t), computed in log space."""
    post, fallback = posterior_from_logprobs([log_prob_sentence(lm, x) for lm in lms], priors)
    if fallback:
        log.warning("all source LMs assign zero probability; using uniform task posterior")
    return post


# --------------------------------------------------------------------------
# ARPA-style text format


def _fmt(v: float) -> str:
    return "-99" if v == NEG_INF else f"{v / LN10:.10f}"


def _parse(v: str) -> float:
    f = float(v)
    return NEG_INF if f <= -99 else f * LN10


def write_arpa(lm: NgramLm, path, vocab=None) -> None:
    """Write ``lm`` as log10 probabilities, one n-gram per line, grouped by order."""
    name = (lambda i: vocab.tokens[i]) if vocab is not None else str
    sections = []
    for n in range(lm.order):
        rows = []
        for ctx, dist in lm.probs[n].items():
            for tok, lp in dist.items():
                gram = ctx + (tok,)
                bow = lm.backoffs[n + 1].get(gram) if n + 1 < lm.order else None
                rows.append((gram, lp, bow))
        if n + 1 < lm.order:
            # begin-marker contexts are never predicted, so they need their own rows
            seen = {r[0] for r in rows}
            rows.extend((g, NEG_INF, b) for g, b in lm.backoffs[n + 1].items() if g not in seen)
        rows.sort(key=lambda r: r[0])
        sections.append(rows)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# order={lm.order} vocab_size={lm.vocab_size} discount={lm.discount!r}\n\n")
        f.write("\\data\\\n")
        for n, rows in enumerate(sections, start=1):
            f.write(f"ngram {n}={len(rows)}\n")
        for n, rows in enumerate(sections, start=1):
            f.write(f"\n\\{n}-grams:\n")
            for gram, lp, bow in rows:
                line = f"{_fmt(lp)}\t{' '.join(name(t) for t in gram)}"
                if bow is not None:
                    line += f"\t{_fmt(bow)}"
                f.write(line + "\n")
        f.write("\n\\end\\\n")


def read_arpa(path, vocab=None) -> NgramLm:
    """Inverse of `write_arpa` (values round-trip to ~1e-10 in log10)."""
    ident = (lambda s: vocab.index[s]) if vocab is not None else int
    meta = {}
    probs: list[dict] = []
    backoffs: list[dict] = []
    n = 0
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.rstrip("\n")
            if line.startswith("#"):
                for kv in line[1:].split():
                    k, v = kv.split("=")
                    meta[k] = v
            elif line.startswith("ngram "):
                probs.append({})
                backoffs.append({})
            elif line.endswith("-grams:"):
                n = int(line[1:].split("-")[0])
            elif line and n and not line.startswith("\\"):
                fields = line.split("\t")
                gram = tuple(ident(t) for t in fields[1].split(" "))
                if len(fields) == 3:
                    backoffs[n][gram] = _parse(fields[2])
                if gram[-1] == BOS_ID:
                    continue
                probs[n - 1].setdefault(gram[:-1], {})[gram[-1]] = _parse(fields[0])
    order = int(meta.get("order", len(probs)))
    return NgramLm(order, int(meta["vocab_size"]), float(meta["discount"]), probs, backoffs)
