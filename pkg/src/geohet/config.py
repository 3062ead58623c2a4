"""Run configuration: one JSON document, strict keys, every field defaulted."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .condenc import CondEncConfig
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .geodata import GenConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class GraphSection:
    k_clusters: int = 64
    k_nn: int = 8
    sigma: float = 1.0
    mu: float | None = None  # None: mean KNN edge length
    d_cond: int = 32
    walk_length: int = 20
    walks_per_node: int = 10
    window: int = 5
    p: float = 1.0
    q: float = 1.0
    seed: int = 0


@dataclass
class EncoderSection:
    L: int | None = None  # None: taken from the data
    d_model: int = 32
    n_blocks: int = 2
    eps: float = 1e-6
    ffn_hidden: int | None = None


@dataclass
class DecoderSection:
    intercept: bool = False
    loss_weights: list = field(default_factory=lambda: [1.0, 1.0])


@dataclass
class PathsSection:
    data_dir: str | None = None
    graph: str | None = None
    out_dir: str | None = None
    checkpoint: str | None = None


SECTIONS = {
    "data": GenConfig,
    "graph": GraphSection,
    "encoder": EncoderSection,
    "condenc": CondEncConfig,
    "decoder": DecoderSection,
    "train": TrainConfig,
    "paths": PathsSection,
}


@dataclass
class RunConfig:
    data: GenConfig = field(default_factory=GenConfig)
    graph: GraphSection = field(default_factory=GraphSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    condenc: CondEncConfig = field(default_factory=CondEncConfig)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsSection = field(default_factory=PathsSection)

    @classmethod
    def from_dict(cls, doc: dict | None) -> "RunConfig":
        doc = doc or {}
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        parts = {}
        for name, section_cls in SECTIONS.items():
            body = doc.get(name) or {}
            if not isinstance(body, dict):
                raise ConfigError(f"section {name!r} must be an object")
            known = {f.name for f in fields(section_cls)}
            bad = set(body) - known
            if bad:
                raise ConfigError(f"unknown key(s) in {name}: {', '.join(f'{name}.{k}' for k in sorted(bad))}")
            try:
                parts[name] = section_cls(**body)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name} section: {exc}") from exc
        cfg = cls(**parts)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)

    def validate(self) -> None:
        d = self.data
        if d.n_locations < 1:
            raise ConfigError("data.n_locations must be >= 1")
        if d.n_times < 1 or d.L < 1 or d.D < 1:
            raise ConfigError("data.n_times, data.L and data.D must be >= 1")
        if not d.noise_std >= 0 or d.noise_std == float("inf"):
            raise ConfigError("data.noise_std must be finite and >= 0")
        if self.graph.k_clusters < 1 or self.graph.k_nn < 0 or self.graph.k_nn >= self.graph.k_clusters:
            raise ConfigError("graph.k_nn must lie in [0, graph.k_clusters)")
        if self.graph.d_cond < 2 or self.graph.d_cond % 2:
            raise ConfigError("graph.d_cond must be even and >= 2")
        if self.encoder.d_model % 2:
            raise ConfigError("encoder.d_model must be even")
        if len(self.decoder.loss_weights) != 2:
            raise ConfigError("decoder.loss_weights needs two entries")

    def to_dict(self) -> dict:
        return {name: asdict(getattr(self, name)) for name in SECTIONS}

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode("utf-8")).hexdigest()

    def with_overrides(self, overrides: dict[str, object]) -> "RunConfig":
        """Apply ``{"section.key": value}`` overrides and re-validate."""
        doc = self.to_dict()
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if section not in doc or not key:
                raise ConfigError(f"bad override {dotted!r}")
            doc[section][key] = value
        return RunConfig.from_dict(doc)

    def model_config(self, L: int, D: int) -> ModelConfig:
        if self.encoder.L is not None and self.encoder.L != L:
            raise ConfigError(f"encoder.L={self.encoder.L} but the data has windows of length {L}")
        enc = EncoderConfig(L=L, D=D, d_model=self.encoder.d_model, n_blocks=self.encoder.n_blocks,
                            eps=self.encoder.eps, ffn_hidden=self.encoder.ffn_hidden)
        dec = DecoderConfig(intercept=self.decoder.intercept,
                            loss_weights=tuple(float(w) for w in self.decoder.loss_weights))
        return ModelConfig(enc, dataclasses.replace(self.condenc), dec)


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))
