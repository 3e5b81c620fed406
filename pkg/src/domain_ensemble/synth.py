"""Seeded synthetic translation domains.

Every sentence fills slots ``0..L-1`` in order, one source word per slot.
Each slot has a pool of words shared by all domains plus a pool exclusive
to each domain. Translation is word-for-word through a fixed mapping;
a fraction of the shared words ("ambiguous" words) translate differently
in every domain, which is what makes domain-blind ensembling lossy.
With probability ``noise`` a target word is replaced by its alternate
translation (the primary one with a trailing "v"), so that even a perfect
model keeps some uncertainty.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .corpus import ParallelCorpus, Sentence, write_parallel

SPLITS = ("train", "valid", "test")
DATA_STREAM = 0


@dataclass(frozen=True)
class SynthConfig:
    seed: int
    n_domains: int = 2
    n_slots: int = 6
    words_per_slot: int = 6
    overlap: float = 0.34
    ambiguity: float = 0.5
    noise: float = 0.1
    min_len: int = 3
    n_train: int = 800
    n_valid: int = 100
    n_test: int = 200

    def validate(self) -> None:
        if not 0.0 <= self.overlap <= 1.0:
            raise ValueError("overlap must lie in [0, 1]")
        if not 0.0 <= self.ambiguity <= 1.0:
            raise ValueError("ambiguity must lie in [0, 1]")
        if not 0.0 <= self.noise < 0.5:
            raise ValueError("noise must lie in [0, 0.5)")
        if self.n_domains < 1 or self.n_slots < 1 or self.words_per_slot < 1:
            raise ValueError("domain count, slot count and words per slot must be positive")
        if not 1 <= self.min_len <= self.n_slots:
            raise ValueError("min_len must lie in [1, n_slots]")
        if min(self.n_train, self.n_valid, self.n_test) < 1:
            raise ValueError("every split needs at least one sentence")

    @property
    def n_shared(self) -> int:
        return int(round(self.overlap * self.words_per_slot))

    @property
    def n_exclusive(self) -> int:
        return self.words_per_slot - self.n_shared

    @property
    def n_ambiguous(self) -> int:
        return int(round(self.ambiguity * self.n_shared))


def domain_name(d: int) -> str:
    return f"dom{d}"


class Grammar:
    """Word pools and translation tables for all domains of one config."""

    def __init__(self, cfg: SynthConfig):
        cfg.validate()
        self.cfg = cfg
        self.shared = [[f"s{i}c{j}" for j in range(cfg.n_shared)] for i in range(cfg.n_slots)]
        self.exclusive = [
            [[f"s{i}d{d}x{j}" for j in range(cfg.n_exclusive)] for i in range(cfg.n_slots)]
            for d in range(cfg.n_domains)
        ]
        self.ambiguous = {w for pool in self.shared for w in pool[: cfg.n_ambiguous]}

    def pool(self, d: int, slot: int) -> list[str]:
        return self.shared[slot] + self.exclusive[d][slot]

    def neutral(self, slot: int) -> list[str]:
        return [w for w in self.shared[slot] if w not in self.ambiguous]

    def translate_word(self, w: str, d: int) -> str:
        t = "t" + w[1:]
        return t + f"d{d}" if w in self.ambiguous else t

    def translate(self, words, d: int) -> list[str]:
        return [self.translate_word(w, d) for w in words]

    def noisy_translate(self, words, d: int, rng: np.random.Generator) -> list[str]:
        out = self.translate(words, d)
        if self.cfg.noise > 0:
            flips = rng.random(len(out)) < self.cfg.noise
            out = [t + "v" if f else t for t, f in zip(out, flips)]
        return out

    def sample(self, rng: np.random.Generator, d: int) -> list[str]:
        L = int(rng.integers(self.cfg.min_len, self.cfg.n_slots + 1))
        return [self.pool(d, i)[int(rng.integers(len(self.pool(d, i))))] for i in range(L)]

    def probe(self, rng: np.random.Generator, d: int) -> tuple[list[str], int]:
        """Sentence over all slots: neutral words in the first half, domain-``d`` words after.

        Returns the words and the index of the first exclusive word.
        """
        half = self.cfg.n_slots // 2
        if any(not self.neutral(i) for i in range(half)) or self.cfg.n_exclusive == 0:
            raise ValueError("config has no neutral or no exclusive words to build probes from")
        words = [self.neutral(i)[int(rng.integers(len(self.neutral(i))))] for i in range(half)]
        words += [self.exclusive[d][i][int(rng.integers(self.cfg.n_exclusive))] for i in range(half, self.cfg.n_slots)]
        return words, half


def _pair(words: list[str], trans: list[str]) -> tuple[Sentence, Sentence]:
    return Sentence(tuple(words), " ".join(words)), Sentence(tuple(trans), " ".join(trans))


def generate(cfg: SynthConfig) -> dict[str, dict[str, ParallelCorpus]]:
    """Return ``{domain: {split: corpus}}``; identical output for identical configs."""
    g = Grammar(cfg)
    rng = np.random.default_rng([cfg.seed, DATA_STREAM])
    sizes = {"train": cfg.n_train, "valid": cfg.n_valid, "test": cfg.n_test}
    out = {}
    for d in range(cfg.n_domains):
        name = domain_name(d)
        out[name] = {}
        for split in SPLITS:
            pairs = []
            for _ in range(sizes[split]):
                w = g.sample(rng, d)
                pairs.append(_pair(w, g.noisy_translate(w, d, rng)))
            out[name][split] = ParallelCorpus(tuple(pairs), name)
    return out


def make_probes(cfg: SynthConfig, d: int, n: int, seed_offset: int = 1):
    """``n`` probe pairs for domain ``d`` plus the first-exclusive index."""
    g = Grammar(cfg)
    rng = np.random.default_rng([cfg.seed, DATA_STREAM, seed_offset, d])
    probes = []
    for _ in range(n):
        w, k = g.probe(rng, d)
        probes.append((_pair(w, g.translate(w, d)), k))
    return probes


def write_domains(data, out_dir, cfg: SynthConfig | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, splits in data.items():
        for split, corpus in splits.items():
            path = out_dir / f"{name}.{split}.tsv"
            write_parallel(path, corpus)
            written.append(path)
    if cfg is not None:
        (out_dir / "synth_config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    return written
