"""Conditional next-token models p(y_i | y_<i, x) over target ids.

Two implementations share the `ConditionalSequenceModel` contract:

* `TableModel`: smoothed count tables keyed by the previous target token
  and the source token at the current position.
* `ToyNeuralModel`: previous-target embedding, mean source embedding and
  the embedding of the source token at the current position, concatenated,
  one tanh hidden layer, softmax output. Parameters live in
  one flat float64 vector so that regularizers and Fisher estimates can
  treat them uniformly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .corpus import BOS_ID, EOS_ID

CHECKPOINT_VERSION = 1


@runtime_checkable
class ConditionalSequenceModel(Protocol):
    vocab_size: int

    def step(self, x: Sequence[int], h: Sequence[int]) -> np.ndarray:
        """Next-token distribution given source ``x`` and emitted history ``h``."""

    def step_batch(self, x: Sequence[int], histories: Sequence[Sequence[int]]) -> np.ndarray:
        """Row-stacked `step` for several histories of the same source."""


def vocab_hash(tokens) -> str | None:
    """Short digest of a token list (or a Vocabulary) for checkpoint headers."""
    if tokens is None:
        return None
    tokens = getattr(tokens, "tokens", tokens)
    return hashlib.sha256("\n".join(tokens).encode("utf-8")).hexdigest()[:16]


# --------------------------------------------------------------------------
# count-based model


def _position_feature(x: Sequence[int], i: int) -> int:
    return x[i] if i < len(x) else EOS_ID


class TableModel:
    """p(y | prev, a) where ``a`` is the source token aligned to the current position.

    Lookup order: ``(prev, a)``, ``(prev, None)``, ``a``, unigram. Every
    stored vector must be a probability distribution.
    """

    def __init__(self, vocab_size: int, tables: dict, backoff: dict | None = None, unigram=None):
        self.vocab_size = vocab_size
        self.tables = {k: np.asarray(v, dtype=float) for k, v in tables.items()}
        self.backoff = {k: np.asarray(v, dtype=float) for k, v in (backoff or {}).items()}
        if unigram is None:
            unigram = np.full(vocab_size, 1.0 / (vocab_size - 1))
            unigram[BOS_ID] = 0.0
        self.unigram = np.asarray(unigram, dtype=float)
        for v in [*self.tables.values(), *self.backoff.values(), self.unigram]:
            if v.shape != (vocab_size,) or np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
                raise ValueError("every table entry must be a distribution over the vocabulary")

    @classmethod
    def train(cls, pairs: Sequence[tuple[Sequence[int], Sequence[int]]], vocab_size: int, alpha: float = 0.1, beta: float = 1.0) -> "TableModel":
        """Estimate tables from id pairs with Dirichlet-style backoff smoothing.

        ``alpha`` is an add-alpha pseudo-count for the unigram and ``beta``
        the concentration pulling each conditional toward its backoff.
        """
        if not pairs:
            raise ValueError("cannot train on an empty corpus")
        V = vocab_size
        uni = np.zeros(V)
        by_feat: dict[int, np.ndarray] = {}
        by_ctx: dict[tuple[int, int], np.ndarray] = {}
        for x, y in pairs:
            prev = BOS_ID
            for i, tok in enumerate(list(y) + [EOS_ID]):
                a = _position_feature(x, i)
                uni[tok] += 1
                by_feat.setdefault(a, np.zeros(V))[tok] += 1
                by_ctx.setdefault((prev, a), np.zeros(V))[tok] += 1
                prev = tok
        support = np.ones(V)
        support[BOS_ID] = 0.0
        unigram = (uni + alpha * support) / (uni.sum() + alpha * support.sum())
        backoff = {a: (c + beta * unigram) / (c.sum() + beta) for a, c in by_feat.items()}
        tables = {k: (c + beta * backoff[k[1]]) / (c.sum() + beta) for k, c in by_ctx.items()}
        return cls(V, tables, backoff, unigram)

    def _lookup(self, prev: int, a: int) -> np.ndarray:
        v = self.tables.get((prev, a))
        if v is None:
            v = self.tables.get((prev, None))
        if v is None:
            v = self.backoff.get(a, self.unigram)
        return v

    def step(self, x, h):
        prev = h[-1] if len(h) else BOS_ID
        return self._lookup(prev, _position_feature(x, len(h))).copy()

    def step_batch(self, x, histories):
        return np.stack([self.step(x, h) for h in histories])

    def log_likelihood(self, pairs) -> float:
        return sum(float(np.log(self.step(x, y[:i])[tok])) for x, y in pairs for i, tok in enumerate(list(y) + [EOS_ID]))

    def save(self, path) -> None:
        keys = sorted(self.tables, key=lambda k: (k[0], -1 if k[1] is None else k[1]))
        feats = sorted(self.backoff)
        V = self.vocab_size
        header = {"kind": "table", "vocab_size": V, "table_keys": [[k[0], k[1]] for k in keys], "backoff_keys": feats}
        arrays = {
            "unigram": self.unigram,
            "tables": np.stack([self.tables[k] for k in keys]) if keys else np.zeros((0, V)),
            "backoff": np.stack([self.backoff[a] for a in feats]) if feats else np.zeros((0, V)),
        }
        write_checkpoint(path, header, arrays)


# --------------------------------------------------------------------------
# neural model


@dataclass
class TokenBatch:
    """Flattened target tokens of a set of sentence pairs.

    ``avg`` is the (sentences x source vocab) matrix whose rows average the
    source one-hots, so ``avg @ src_emb`` gives each mean source embedding.
    ``aligned`` holds the source id at each token's position (the end
    marker past the end of the source).
    """

    prev: np.ndarray
    tgt: np.ndarray
    sent: np.ndarray
    avg: np.ndarray
    aligned: np.ndarray

    def __len__(self) -> int:
        return len(self.tgt)

    def subset(self, idx) -> "TokenBatch":
        idx = np.asarray(idx)
        return TokenBatch(self.prev[idx], self.tgt[idx], self.sent[idx], self.avg, self.aligned[idx])


def make_batch(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], src_vocab_size: int) -> TokenBatch:
    if not pairs:
        raise ValueError("empty batch")
    prev, tgt, sent, aligned = [], [], [], []
    avg = np.zeros((len(pairs), src_vocab_size))
    for s, (x, y) in enumerate(pairs):
        if len(x) == 0:
            raise ValueError(f"pair {s} has an empty source")
        np.add.at(avg[s], np.asarray(x), 1.0 / len(x))
        ys = list(y) + [EOS_ID]
        prev.extend([BOS_ID] + list(y))
        tgt.extend(ys)
        sent.extend([s] * len(ys))
        aligned.extend(_position_feature(x, i) for i in range(len(ys)))
    return TokenBatch(np.array(prev), np.array(tgt), np.array(sent), avg, np.array(aligned))


class ToyNeuralModel:
    """Feed-forward next-token model; see module docstring for the architecture."""

    def __init__(self, src_vocab_size: int, tgt_vocab_size: int, src_dim: int = 32, tgt_dim: int = 16,
                 hidden: int = 64, theta: np.ndarray | None = None, seed: int | None = None,
                 init_scale: float = 0.1):
        self.src_vocab_size = src_vocab_size
        self.vocab_size = tgt_vocab_size
        self.src_dim, self.tgt_dim, self.hidden = src_dim, tgt_dim, hidden
        self.layout = [
            ("tgt_emb", (tgt_vocab_size, tgt_dim)),
            ("src_emb", (src_vocab_size, src_dim)),
            ("aln_emb", (src_vocab_size, src_dim)),
            ("W", (hidden, tgt_dim + 2 * src_dim)),
            ("b", (hidden,)),
            ("U", (tgt_vocab_size, hidden)),
            ("c", (tgt_vocab_size,)),
        ]
        self.size = sum(int(np.prod(s)) for _, s in self.layout)
        if theta is None:
            rng = np.random.default_rng(seed)
            theta = rng.uniform(-init_scale, init_scale, size=self.size)
        self.set_theta(theta)

    def set_theta(self, theta) -> None:
        theta = np.array(theta, dtype=float)
        if theta.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got shape {theta.shape}")
        self.theta = theta
        self.params = self.unflatten(theta)
        self._src_cache = (None, None)

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        out, i = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = flat[i : i + n].reshape(shape)
            i += n
        return out

    def slices(self) -> dict[str, slice]:
        out, i = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = slice(i, i + n)
            i += n
        return out

    def copy(self) -> "ToyNeuralModel":
        return ToyNeuralModel(self.src_vocab_size, self.vocab_size, self.src_dim, self.tgt_dim, self.hidden, theta=self.theta.copy())

    # -- inference --------------------------------------------------------

    def _mean_src(self, x) -> np.ndarray:
        key = tuple(x)
        if self._src_cache[0] != key:
            self._src_cache = (key, self.params["src_emb"][list(key)].mean(axis=0))
        return self._src_cache[1]

    def step_batch(self, x, histories):
        p = self.params
        prevs = np.array([h[-1] if len(h) else BOS_ID for h in histories])
        src = np.broadcast_to(self._mean_src(x), (len(prevs), self.src_dim))
        aligned = np.array([_position_feature(x, len(h)) for h in histories])
        z = np.concatenate([p["tgt_emb"][prevs], src, p["aln_emb"][aligned]], axis=1)
        hid = np.tanh(z @ p["W"].T + p["b"])
        return _softmax(hid @ p["U"].T + p["c"])

    def step(self, x, h):
        return self.step_batch(x, [h])[0]

    # -- training quantities ---------------------------------------------

    def _forward(self, batch: TokenBatch):
        p = self.params
        mean_src = batch.avg @ p["src_emb"]
        z = np.concatenate([p["tgt_emb"][batch.prev], mean_src[batch.sent], p["aln_emb"][batch.aligned]], axis=1)
        hid = np.tanh(z @ p["W"].T + p["b"])
        return z, hid, hid @ p["U"].T + p["c"]

    def log_likelihood(self, data) -> float:
        """Sum of log p over every target token (end marker included)."""
        batch = data if isinstance(data, TokenBatch) else make_batch(data, self.src_vocab_size)
        _, _, logits = self._forward(batch)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted[np.arange(len(batch)), batch.tgt] - np.log(np.exp(shifted).sum(axis=1))
        return float(logp.sum())

    def _backward_signals(self, batch: TokenBatch):
        z, hid, logits = self._forward(batch)
        probs = _softmax(logits)
        dlogits = -probs
        dlogits[np.arange(len(batch)), batch.tgt] += 1.0
        da = (dlogits @ self.params["U"]) * (1.0 - hid**2)
        dz = da @ self.params["W"]
        return z, hid, probs, dlogits, da, dz

    def gradient(self, data) -> np.ndarray:
        """Gradient of `log_likelihood` w.r.t. the flat parameter vector (sum over tokens)."""
        batch = data if isinstance(data, TokenBatch) else make_batch(data, self.src_vocab_size)
        z, hid, _, dlogits, da, dz = self._backward_signals(batch)
        g = np.zeros(self.size)
        gv = self.unflatten(g)
        dt, ds = self.tgt_dim, self.src_dim
        np.add.at(gv["tgt_emb"], batch.prev, dz[:, :dt])
        per_sent = np.zeros((batch.avg.shape[0], ds))
        np.add.at(per_sent, batch.sent, dz[:, dt : dt + ds])
        gv["src_emb"][:] = batch.avg.T @ per_sent
        np.add.at(gv["aln_emb"], batch.aligned, dz[:, dt + ds :])
        gv["W"][:] = da.T @ z
        gv["b"][:] = da.sum(axis=0)
        gv["U"][:] = dlogits.T @ hid
        gv["c"][:] = dlogits.sum(axis=0)
        return g

    def squared_token_gradients(self, data) -> np.ndarray:
        """Sum over tokens of the elementwise square of each per-token gradient.

        Each per-token gradient is a sum of rank-one blocks, so the squares
        reduce to products of squared factors without materializing them.
        """
        batch = data if isinstance(data, TokenBatch) else make_batch(data, self.src_vocab_size)
        z, hid, _, dlogits, da, dz = self._backward_signals(batch)
        g = np.zeros(self.size)
        gv = self.unflatten(g)
        dt, ds = self.tgt_dim, self.src_dim
        np.add.at(gv["tgt_emb"], batch.prev, dz[:, :dt] ** 2)
        # one token touches every source row of its sentence, scaled by avg[s, v]
        a2 = batch.avg[batch.sent] ** 2
        gv["src_emb"][:] = a2.T @ (dz[:, dt : dt + ds] ** 2)
        np.add.at(gv["aln_emb"], batch.aligned, dz[:, dt + ds :] ** 2)
        gv["W"][:] = (da**2).T @ (z**2)
        gv["b"][:] = (da**2).sum(axis=0)
        gv["U"][:] = (dlogits**2).T @ (hid**2)
        gv["c"][:] = (dlogits**2).sum(axis=0)
        return g

    # -- checkpoints ------------------------------------------------------

    def save(self, path, src_vocab=None, tgt_vocab=None) -> None:
        header = {
            "kind": "neural",
            "src_vocab_size": self.src_vocab_size,
            "tgt_vocab_size": self.vocab_size,
            "src_dim": self.src_dim,
            "tgt_dim": self.tgt_dim,
            "hidden": self.hidden,
            "layout": [[n, list(s)] for n, s in self.layout],
            "src_vocab_hash": vocab_hash(src_vocab),
            "tgt_vocab_hash": vocab_hash(tgt_vocab),
        }
        write_checkpoint(path, header, {"theta": self.theta})


# --------------------------------------------------------------------------
# checkpoint files
#
#   8 bytes   magic b"DENSCKPT"
#   4 bytes   header length n, little-endian uint32
#   n bytes   UTF-8 JSON header (sorted keys): model metadata plus
#             "version" and "arrays", a list of [name, shape]
#   rest      each listed array as little-endian float64, C order

MAGIC = b"DENSCKPT"


def write_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    header = dict(header, version=CHECKPOINT_VERSION, arrays=[[k, list(np.shape(v))] for k, v in arrays.items()])
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(blob).to_bytes(4, "little"))
        f.write(blob)
        for v in arrays.values():
            f.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    n = int.from_bytes(data[8:12], "little")
    header = json.loads(data[12 : 12 + n].decode("utf-8"))
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    arrays, off = {}, 12 + n
    for name, shape in header["arrays"]:
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(shape).astype(float)
        off += 8 * count
    if off != len(data):
        raise ValueError(f"{path}: trailing or missing bytes")
    return header, arrays


def load_model(path, src_vocab=None, tgt_vocab=None):
    """Load a checkpoint written by either model's ``save``.

    When vocabularies are given their hashes must match the recorded ones.
    """
    meta, arrays = read_checkpoint(path)
    if meta["kind"] == "table":
        tables = {(k[0], k[1]): v for k, v in zip(meta["table_keys"], arrays["tables"])}
        backoff = {a: v for a, v in zip(meta["backoff_keys"], arrays["backoff"])}
        return TableModel(meta["vocab_size"], tables, backoff, arrays["unigram"])
    for key, vocab in (("src_vocab_hash", src_vocab), ("tgt_vocab_hash", tgt_vocab)):
        if vocab is not None and meta.get(key) is not None and meta[key] != vocab_hash(vocab):
            raise ValueError(f"{path}: {key} does not match the supplied vocabulary")
    return ToyNeuralModel(meta["src_vocab_size"], meta["tgt_vocab_size"], meta["src_dim"], meta["tgt_dim"],
                          meta["hidden"], theta=arrays["theta"])


def _softmax(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)
