"""Experiment configuration: one JSON document with corpus, model, train, eval and sweep sections."""

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

from .corpus import CorpusConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

SWEEP_KINDS = ("gates", "lambda", "layers")
DEFAULT_GRIDS = {
    "gates": [0.0, 0.25, 0.5, 0.75, 1.0],
    "lambda": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
    "layers": [1, 2, 3, 4],
}


def _strict(cls, d, section):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return cls(**d)


@dataclass
class EvalConfig:
    split: str = "test"
    batch_size: int = 64

    def __post_init__(self):
        if self.split not in ("train", "dev", "test"):
            raise ConfigError(f"eval split must be train/dev/test, got {self.split!r}")
        if self.batch_size < 1:
            raise ConfigError("eval batch_size must be >= 1")


@dataclass
class SweepConfig:
    kind: str = "lambda"
    grid: Optional[list] = None
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    inference_only: bool = False

    def __post_init__(self):
        if self.kind not in SWEEP_KINDS:
            raise ConfigError(f"sweep kind must be one of {SWEEP_KINDS}, got {self.kind!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.grid is not None:
            check_grid(self.kind, self.grid)

    def resolved_grid(self):
        return list(self.grid) if self.grid is not None else list(DEFAULT_GRIDS[self.kind])


def check_grid(kind, grid):
    if not grid:
        raise ConfigError("sweep grid is empty")
    if kind == "layers":
        if any(int(g) != g or g < 1 for g in grid):
            raise ConfigError(f"layer grid values must be integers >= 1, got {grid}")
    elif any(not 0.0 <= g <= 1.0 for g in grid):
        raise ConfigError(f"{kind} grid values must lie in [0, 1], got {grid}")


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=10, learning_rate=3e-3))
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        unknown = set(d) - {"corpus", "model", "train", "eval", "sweep"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        default = cls()
        train = {**default.train.to_dict(), **d.get("train", {})}
        return cls(
            _strict(CorpusConfig, d.get("corpus", {}), "corpus"),
            _strict(ModelConfig, d.get("model", {}), "model"),
            _strict(TrainConfig, train, "train"),
            _strict(EvalConfig, d.get("eval", {}), "eval"),
            _strict(SweepConfig, d.get("sweep", {}), "sweep"),
        )

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(data)

    def to_dict(self):
        return {
            "corpus": self.corpus.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "eval": asdict(self.eval),
            "sweep": asdict(self.sweep),
        }
