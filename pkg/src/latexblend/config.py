"""Run configuration: TOML sections, named RNG sub-streams and content hashes."""
from __future__ import annotations

import dataclasses
import json
import os
import zlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np
import tomli

from .backbone import BackboneConfig, PretrainConfig
from .container import config_hash
from .customization import FinetuneConfig
from .data import Concept, CorpusConfig, Obj
from .sampler import GuidanceConfig, SamplerConfig


class ConfigError(ValueError):
    pass


@dataclass
class OracleConfig:
    seed: int = 0
    train_size: int = 12000
    test_size: int = 1000
    steps: int = 2500
    batch: int = 64
    min_accuracy: float = 0.95


@dataclass
class ExperimentConfig:
    n_samples: int = 32
    n_pairs: int = 20
    gate_samples: int = 20  # per noun, for the backbone-quality gate
    steps: int = 50


_SECTIONS = {
    "corpus": CorpusConfig, "backbone": BackboneConfig, "pretrain": PretrainConfig,
    "oracle": OracleConfig, "finetune": FinetuneConfig, "sampler": SamplerConfig,
    "guidance": GuidanceConfig, "experiment": ExperimentConfig,
}
# sections whose ``seed`` field is drawn from the root seed
_STREAMS = ("corpus", "pretrain", "oracle", "finetune", "sampler")


def default_home() -> Path:
    return Path(os.environ.get("LTXB_HOME", Path.home() / ".latexblend"))


def substream(root_seed: int, name: str) -> int:
    """Deterministic 31-bit seed for the named stream."""
    ss = np.random.SeedSequence([root_seed, zlib.crc32(name.encode())])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


def _build(cls, values: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    if "concepts" in kw:
        kw["concepts"] = tuple(c if isinstance(c, Concept) else
                               Concept(c["name"], c["identifier"], Obj(**c["obj"])) for c in kw["concepts"])
    return cls(**kw)


@dataclass
class RunConfig:
    """Root seed plus one dataclass per section; section seeds derive from the root."""

    seed: int = 0
    sections: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for name, cls in _SECTIONS.items():
            sec = self.sections.get(name)
            if sec is None:
                sec = cls()
            elif isinstance(sec, dict):
                sec = _build(cls, sec)
            if name in _STREAMS:
                sec = replace(sec, seed=substream(self.seed, name))
            self.sections[name] = sec

    def __getattr__(self, name):
        sections = self.__dict__.get("sections", {})
        if name in sections:
            return sections[name]
        raise AttributeError(name)

    @classmethod
    def from_toml(cls, text: str, seed: int | None = None) -> "RunConfig":
        try:
            raw = tomli.loads(text)
        except tomli.TOMLDecodeError as e:
            raise ConfigError(str(e)) from e
        root = raw.pop("seed", 0)
        unknown = set(raw) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        return cls(root if seed is None else seed, dict(raw))

    @classmethod
    def load(cls, path: str | Path | None = None, seed: int | None = None) -> "RunConfig":
        if path is None:
            return cls(seed or 0)
        return cls.from_toml(Path(path).read_text(encoding="utf-8"), seed)

    def to_dict(self) -> dict:
        return {"seed": self.seed,
                **{k: json.loads(json.dumps(dataclasses.asdict(v))) for k, v in self.sections.items()}}

    def hash(self, *names: str) -> str:
        """Hash of the whole config, or of only the named sections (plus the root seed)."""
        d = self.to_dict()
        if names:
            d = {"seed": d["seed"], **{n: d[n] for n in names}}
        return config_hash(d)

    def dump_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({**self.to_dict(), "hash": self.hash()}, indent=2,
                                         sort_keys=True), encoding="utf-8")
