"""Experiment configuration: an INI file with one section per pipeline stage.

Values are parsed according to the type of each field's default; list
fields are comma separated. Command-line overrides use ``section.key=value``.

Example::

    [experiment]
    seeds = 1, 2, 3

    [data]
    source = synthetic
    overlap = 0.5

    [domain.news]          ; only read when source = files
    train = corpora/news.train.tsv
    valid = corpora/news.valid.tsv
    test = corpora/news.test.tsv
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentSection:
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3])
    workers: int = 1


@dataclass
class DataSection:
    source: str = "synthetic"
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
    # corpus filtering and subwords, used when source = files
    min_len_filter: int = 1
    max_len_filter: int = 120
    max_ratio: float = 4.5
    bpe_merges: int = 0
    min_count: int = 1


@dataclass
class LmSection:
    order: int = 4
    discount: float = 0.75
    normalize_lambda: bool = True


@dataclass
class ModelSection:
    kind: str = "neural"
    src_dim: int = 32
    tgt_dim: int = 16
    hidden: int = 64
    init_scale: float = 0.1
    epochs: int = 100
    learning_rate: float = 1.0
    batch_size: int = 32


@dataclass
class FinetuneSection:
    epochs: int = 30
    learning_rate: float = 1.0
    batch_size: int = 32
    strengths: list[float] = field(default_factory=lambda: [1e-4, 1e-3, 0.01, 0.1, 1.0, 10.0, 100.0, 1000.0])
    fisher_samples: int = 0
    match_tolerance: float = 0.02


@dataclass
class DecodeSection:
    beam_size: int = 4
    max_len_factor: int = 2
    max_len_extra: int = 2
    length_norm: bool = False
    probes: int = 10
    probe_scheme: str = "bi"


SECTIONS = {
    "experiment": ExperimentSection,
    "data": DataSection,
    "lm": LmSection,
    "model": ModelSection,
    "finetune": FinetuneSection,
    "decode": DecodeSection,
}


@dataclass
class DomainPaths:
    name: str
    train: Path
    valid: Path
    test: Path


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    data: DataSection = field(default_factory=DataSection)
    lm: LmSection = field(default_factory=LmSection)
    model: ModelSection = field(default_factory=ModelSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    decode: DecodeSection = field(default_factory=DecodeSection)
    domains: list[DomainPaths] = field(default_factory=list)

    def validate(self) -> None:
        d = self.data
        if d.source not in ("synthetic", "files"):
            raise ConfigError(f"data.source must be 'synthetic' or 'files', got {d.source!r}")
        if not self.experiment.seeds:
            raise ConfigError("experiment.seeds must list at least one seed")
        if d.source == "files":
            if len(self.domains) < 1:
                raise ConfigError("data.source = files needs at least one [domain.NAME] section")
            for dom in self.domains:
                for split in ("train", "valid", "test"):
                    p = getattr(dom, split)
                    if not p.exists():
                        raise ConfigError(f"domain {dom.name}: {split} file {p} does not exist")
        elif not 0.0 <= d.overlap <= 1.0 or not 0.0 <= d.ambiguity <= 1.0:
            raise ConfigError("data.overlap and data.ambiguity must lie in [0, 1]")
        if self.model.kind not in ("neural", "table"):
            raise ConfigError(f"model.kind must be 'neural' or 'table', got {self.model.kind!r}")
        if self.decode.beam_size < 1:
            raise ConfigError("decode.beam_size must be >= 1")
        if any(s < 0 for s in self.finetune.strengths):
            raise ConfigError("finetune.strengths must be non-negative")

    @property
    def n_domains(self) -> int:
        return len(self.domains) if self.data.source == "files" else self.data.n_domains

    def to_dict(self) -> dict:
        out = {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
        out["domains"] = [{"name": d.name, "train": str(d.train), "valid": str(d.valid), "test": str(d.test)}
                          for d in self.domains]
        return out

    def to_ini(self) -> str:
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for f in dataclasses.fields(getattr(self, name)):
                v = getattr(getattr(self, name), f.name)
                lines.append(f"{f.name} = {_format(v)}")
            lines.append("")
        for d in self.domains:
            lines += [f"[domain.{d.name}]", f"train = {d.train}", f"valid = {d.valid}", f"test = {d.test}", ""]
        return "\n".join(lines)


def _format(v) -> str:
    if isinstance(v, list):
        return ", ".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            elem = type(default[0]) if default else str
            return [elem(x.strip()) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def _set(cfg: ExperimentConfig, section: str, key: str, raw: str) -> None:
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section [{section}]")
    obj = getattr(cfg, section)
    if key not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    setattr(obj, key, _parse(raw, getattr(obj, key), f"{section}.{key}"))


def load_config(path=None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Read ``path`` (if given), apply ``section.key=value`` overrides, validate."""
    cfg = ExperimentConfig()
    if path is not None:
        path = Path(path)
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            if not parser.read(path):
                raise ConfigError(f"config file {path} not found")
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        for section in parser.sections():
            if section.startswith("domain."):
                sec = parser[section]
                missing = [k for k in ("train", "valid", "test") if k not in sec]
                if missing:
                    raise ConfigError(f"[{section}] is missing {', '.join(missing)}")
                base = path.parent
                cfg.domains.append(DomainPaths(section[len("domain."):], *(base / sec[k] for k in ("train", "valid", "test"))))
                continue
            for key, raw in parser[section].items():
                _set(cfg, section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        _set(cfg, section, key, raw)
    cfg.validate()
    return cfg
