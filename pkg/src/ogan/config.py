"""Experiment configuration: one TOML file fully determines a run.

Every key is declared here with its default; unknown keys are rejected so
a typo cannot silently fall back to a default. ``docs/config.md`` mirrors
this schema.
"""

from __future__ import annotations

import hashlib
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .labelnet import LabelPredictorConfig
from .models import GanConfig
from .ontology import Ontology
from .textemb import WordVectorTable, hashed_table, load_word_vectors
from .trainer import TrainError, TrainSchedule

__all__ = ["ConfigError", "ExperimentConfig", "load_config", "dump_config"]


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    ontology: str = "ontology.json"
    word_vectors: str = ""  # GloVe text file; empty selects the hashed table
    dataset: str = "runs/data"
    extractor: str = "runs/extractor.pt"
    labelnet: str = "runs/labelnet.pt"
    out: str = "runs/train"


@dataclass
class TextSection:
    dim: int = 50
    hashed_seed: int = 0


@dataclass
class DataSection:
    num_examples: int = 6000
    resolution: int = 32


@dataclass
class GanSection:
    d_z: int = 64
    base_channels: int = 128
    min_channels: int = 32
    channels: list = field(default_factory=list)  # empty: halve from base_channels per stage
    max_resolution: int = 32
    gp_lambda: float = 10.0
    head_weights: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    drift: float = 1e-3
    mbstd: bool = True


@dataclass
class ScheduleSection:
    images_per_stage: int = 60_000
    images_per_fade: int = 30_000
    n_critic: int = 5
    batch_size: int = 32
    batch_size_by_resolution: dict = field(default_factory=lambda: {"32": 16})
    lr: float = 1e-3
    betas: list = field(default_factory=lambda: [0.0, 0.99])
    num_stages: int = 0  # 0: all stages up to max_resolution
    max_steps: int = 0  # 0: no cap
    checkpoint_every: int = 0
    metrics_every: int = 0


@dataclass
class LabelnetSection:
    hidden: int = 64
    max_len: int = 32
    dropout: float = 0.1
    lr: float = 3e-3
    epochs: int = 8
    batch_size: int = 64
    holdout: float = 0.1


@dataclass
class ExtractorSection:
    epochs: int = 4
    batch_size: int = 64
    lr: float = 1e-3
    feature_dim: int = 64


@dataclass
class MetricsSection:
    n_real: int = 1000
    n_fake: int = 1000
    n_splits: int = 1
    batch: int = 100


_SECTIONS = {
    "paths": Paths,
    "text": TextSection,
    "data": DataSection,
    "gan": GanSection,
    "schedule": ScheduleSection,
    "labelnet": LabelnetSection,
    "extractor": ExtractorSection,
    "metrics": MetricsSection,
}


def _coerce(name, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    elif isinstance(default, dict):
        ok = isinstance(value, dict)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{name}: expected {type(default).__name__}, got {value!r}")
    return value


def _build_section(cls, raw, section):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"[{section}] must be a table")
    defaults = cls()
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"[{section}]: unknown keys {sorted(unknown)}")
    values = {k: _coerce(f"{section}.{k}", v, getattr(defaults, k)) for k, v in raw.items()}
    return cls(**values)


@dataclass
class ExperimentConfig:
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    text: TextSection = field(default_factory=TextSection)
    data: DataSection = field(default_factory=DataSection)
    gan: GanSection = field(default_factory=GanSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    labelnet: LabelnetSection = field(default_factory=LabelnetSection)
    extractor: ExtractorSection = field(default_factory=ExtractorSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    base_dir: Path = field(default_factory=Path.cwd, compare=False)

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> "ExperimentConfig":
        unknown = set(doc) - set(_SECTIONS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
        seed = _coerce("seed", doc.get("seed", 0), 0)
        sections = {k: _build_section(c, doc.get(k), k) for k, c in _SECTIONS.items()}
        cfg = cls(seed=seed, base_dir=Path(base_dir) if base_dir else Path.cwd(), **sections)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = {"seed": self.seed}
        for k in _SECTIONS:
            d[k] = asdict(getattr(self, k))
        return d

    def validate(self):
        # building the component configs runs their own invariant checks
        try:
            self.gan_config(Ontology(("A",), (("a", 0),)), True)
            self.train_schedule()
            LabelPredictorConfig(d_e=self.text.dim, num_labels=1, **self._labelnet_kwargs())
        except (ValueError, TrainError) as exc:
            raise ConfigError(str(exc)) from None
        if self.text.dim <= 0:
            raise ConfigError("text.dim must be positive")

    def resolve(self, p: str) -> Path:
        path = Path(p).expanduser()
        return path if path.is_absolute() else (self.base_dir / path)

    def config_hash(self) -> str:
        return hashlib.sha256(dump_config(self).encode("utf-8")).hexdigest()

    # -- component configs

    def gan_config(self, ontology: Ontology, use_ontology: bool = True) -> GanConfig:
        g = self.gan
        return GanConfig(
            num_labels=ontology.num_labels(use_ontology), d_z=g.d_z, d_e=self.text.dim,
            base_channels=g.base_channels, min_channels=g.min_channels,
            max_resolution=g.max_resolution, channels=list(g.channels) or None,
            use_ontology=use_ontology, gp_lambda=g.gp_lambda, head_weights=tuple(g.head_weights),
            drift=g.drift, mbstd=g.mbstd, init_seed=self.seed,
        )

    def train_schedule(self) -> TrainSchedule:
        s = self.schedule
        return TrainSchedule(
            images_per_stage=s.images_per_stage, images_per_fade=s.images_per_fade,
            n_critic=s.n_critic, batch_size=s.batch_size,
            batch_size_by_resolution=dict(s.batch_size_by_resolution), lr=s.lr,
            betas=tuple(s.betas), num_stages=s.num_stages or None, max_steps=s.max_steps or None,
            seed=self.seed, checkpoint_every=s.checkpoint_every, metrics_every=s.metrics_every,
        )

    def _labelnet_kwargs(self) -> dict:
        return asdict(self.labelnet)

    def labelnet_config(self, num_labels: int) -> LabelPredictorConfig:
        return LabelPredictorConfig(d_e=self.text.dim, num_labels=num_labels, seed=self.seed,
                                    **self._labelnet_kwargs())

    def word_table(self) -> WordVectorTable:
        if self.paths.word_vectors:
            table = load_word_vectors(self.resolve(self.paths.word_vectors))
            if table.dim != self.text.dim:
                raise ConfigError(
                    f"word vectors have dimension {table.dim} but text.dim = {self.text.dim}"
                )
            return table
        return hashed_table(self.text.dim, self.text.hashed_seed)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return ExperimentConfig.from_dict(doc, base_dir=path.resolve().parent)


def dump_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())
