"""Tokenization, length filtering, BPE and vocabularies for parallel text."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

UNK, BOS, EOS = "<unk>", "<s>", "</s>"
UNK_ID, BOS_ID, EOS_ID = 0, 1, 2
RESERVED = (UNK, BOS, EOS)

BPE_JOINER = "@@"
END_OF_WORD = "</w>"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class CorpusFormatError(ValueError):
    """Raised for malformed corpus files; carries the offending line numbers."""

    def __init__(self, path, line_numbers):
        self.path = str(path)
        self.line_numbers = list(line_numbers)
        shown = ", ".join(str(n) for n in self.line_numbers[:20])
        more = "" if len(self.line_numbers) <= 20 else f" (+{len(self.line_numbers) - 20} more)"
        super().__init__(f"{self.path}: malformed lines {shown}{more}")


def tokenize(text: str) -> tuple[str, ...]:
    """Split on whitespace and separate punctuation characters."""
    return tuple(_TOKEN_RE.findall(text))


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[str, ...]
    raw: str = ""

    @classmethod
    def from_text(cls, text: str) -> "Sentence":
        text = text.strip()
        return cls(tokenize(text), text)

    def __len__(self) -> int:
        return len(self.tokens)

    def detok(self) -> str:
        return " ".join(self.tokens).replace(BPE_JOINER + " ", "")


@dataclass(frozen=True)
class ParallelCorpus:
    pairs: tuple[tuple[Sentence, Sentence], ...]
    domain_tag: str = ""

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def sources(self) -> list[Sentence]:
        return [s for s, _ in self.pairs]

    @property
    def targets(self) -> list[Sentence]:
        return [t for _, t in self.pairs]


@dataclass(frozen=True)
class FilterReport:
    kept: int
    dropped: int
    malformed: tuple[int, ...] = ()

    def __str__(self) -> str:
        return f"{self.kept} kept, {self.dropped} dropped"


def filter_pair(src, tgt, min_len=3, max_len=120, max_ratio=4.5) -> bool:
    """Length and length-ratio filter for a sentence pair.

    ``src`` and ``tgt`` may be Sentences or any sized token sequences.
    """
    n, m = len(src), len(tgt)
    if not (min_len <= n <= max_len and min_len <= m <= max_len):
        return False
    return max(n / m, m / n) <= max_ratio


def _read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n").rstrip("\r") for line in f]


def load_parallel(path, min_len=3, max_len=120, max_ratio=4.5, domain_tag=None):
    """Read a tab-separated parallel file and drop pairs failing `filter_pair`.

    Returns ``(corpus, report)``. Lines without exactly one tab raise
    CorpusFormatError listing every bad line number (1-based).
    """
    lines = _read_lines(path)
    bad, pairs = [], []
    for lineno, line in enumerate(lines, start=1):
        fields = line.split("\t")
        if len(fields) != 2:
            bad.append(lineno)
            continue
        pairs.append((Sentence.from_text(fields[0]), Sentence.from_text(fields[1])))
    if bad:
        raise CorpusFormatError(path, bad)
    kept = tuple(p for p in pairs if filter_pair(*p, min_len=min_len, max_len=max_len, max_ratio=max_ratio))
    tag = domain_tag if domain_tag is not None else Path(path).stem
    return ParallelCorpus(kept, tag), FilterReport(len(kept), len(pairs) - len(kept))


def load_mono(path) -> list[Sentence]:
    return [Sentence.from_text(line) for line in _read_lines(path) if line.strip()]


def write_parallel(path, corpus: ParallelCorpus) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s, t in corpus.pairs:
            f.write(" ".join(s.tokens) + "\t" + " ".join(t.tokens) + "\n")


def write_mono(path, sentences: Iterable[Sentence]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in sentences:
            f.write(" ".join(s.tokens) + "\n")


# --------------------------------------------------------------------------
# BPE


@dataclass(frozen=True)
class BpeModel:
    merges: tuple[tuple[str, str], ...] = ()

    @property
    def merge_count(self) -> int:
        return len(self.merges)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for left, right in self.merges:
                f.write(f"{left} {right}\n")

    @classmethod
    def load(cls, path) -> "BpeModel":
        merges = []
        for lineno, line in enumerate(_read_lines(path), start=1):
            if not line.strip():
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise CorpusFormatError(path, [lineno])
            merges.append((parts[0], parts[1]))
        return cls(tuple(merges))


def _word_symbols(word: str) -> tuple[str, ...]:
    chars = list(word)
    chars[-1] = chars[-1] + END_OF_WORD
    return tuple(chars)


def _merge_symbols(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    left, right = pair
    out, i = [], 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
            out.append(left + right)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def _pair_counts(vocab: dict[tuple[str, ...], int]) -> Counter:
    counts: Counter = Counter()
    for symbols, freq in vocab.items():
        for pair in zip(symbols, symbols[1:]):
            counts[pair] += freq
    return counts


def train_bpe(mono: Sequence[Sentence], merges: int) -> BpeModel:
    """Learn up to ``merges`` merge operations from word frequencies.

    Ties on pair frequency go to the lexicographically smallest pair.
    """
    if merges < 0:
        raise ValueError("merges must be >= 0")
    words = Counter(w for s in mono for w in _join_subwords(s.tokens))
    if not words:
        raise ValueError("cannot train BPE on an empty corpus")
    vocab = {_word_symbols(w): c for w, c in sorted(words.items())}
    learned = []
    for _ in range(merges):
        counts = _pair_counts(vocab)
        if not counts:
            break
        best_count = max(counts.values())
        best = min(p for p, c in counts.items() if c == best_count)
        learned.append(best)
        vocab = {_merge_symbols(sym, best): c for sym, c in vocab.items()}
    return BpeModel(tuple(learned))


def _join_subwords(tokens: Sequence[str]) -> list[str]:
    """Undo a previous segmentation: glue ``x@@ y`` back into ``xy``."""
    words, buf = [], ""
    for tok in tokens:
        if tok.endswith(BPE_JOINER):
            buf += tok[: -len(BPE_JOINER)]
        else:
            words.append(buf + tok)
            buf = ""
    if buf:
        words.append(buf)
    return words


class _Segmenter:
    def __init__(self, model: BpeModel):
        self.model = model
        self.cache: dict[str, tuple[str, ...]] = {}

    def __call__(self, word: str) -> tuple[str, ...]:
        seg = self.cache.get(word)
        if seg is None:
            symbols = _word_symbols(word)
            for pair in self.model.merges:
                if len(symbols) == 1:
                    break
                symbols = _merge_symbols(symbols, pair)
            last = symbols[-1][: -len(END_OF_WORD)]
            seg = tuple(s + BPE_JOINER for s in symbols[:-1]) + (last,)
            self.cache[word] = seg
        return seg


_segmenters: dict[int, _Segmenter] = {}


def apply_bpe(model: BpeModel, s: Sentence) -> Sentence:
    """Segment every word of ``s`` with the merges of ``model``, in learned order.

    Input that is already segmented is re-joined first, so the operation
    is idempotent.
    """
    seg = _segmenters.get(id(model))
    if seg is None or seg.model is not model:
        seg = _segmenters[id(model)] = _Segmenter(model)
    out = []
    for w in _join_subwords(s.tokens):
        out.extend(seg(w))
    return Sentence(tuple(out), s.raw)


# --------------------------------------------------------------------------
# Vocabulary


@dataclass
class Vocabulary:
    """Token <-> id map with reserved ids 0 (unk), 1 (bos), 2 (eos)."""

    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:3]) != RESERVED:
            raise ValueError(f"vocabulary must start with {RESERVED}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def encode(self, tokens: Iterable[str]) -> tuple[int, ...]:
        return tuple(self.index.get(t, UNK_ID) for t in tokens)

    def decode(self, ids: Iterable[int]) -> tuple[str, ...]:
        return tuple(self.tokens[i] for i in ids)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for t in self.tokens:
                f.write(t + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls([t for t in _read_lines(path) if t])


def build_vocab(corpora: Iterable[Iterable[Sentence]], min_count: int = 1) -> Vocabulary:
    """Collect tokens from any number of sentence collections.

    Order: reserved ids, then by descending count, ties lexicographic.
    """
    counts: Counter = Counter()
    for sentences in corpora:
        for s in sentences:
            counts.update(s.tokens)
    for r in RESERVED:
        counts.pop(r, None)
    ordered = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + ordered)
