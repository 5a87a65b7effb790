"""Flat run configuration: ``section.key = value`` lines, ``#`` comments.

Every key has a default; a config file and ``--set key=value`` overrides are
merged on top, then the whole thing is validated before any work starts.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .global_search import GlobalSearchConfig
from .local_search import LocalSearchConfig
from .metrics import parse_metric
from .search_space import build_global_space
from .data import SynthTaskConfig
from .tcn import TrainingConfig

# key -> default; the default's type is the key's type
DEFAULTS: dict[str, object] = {
    "seed": 0,
    "data.root": "",
    "data.num_classes": 6,
    "data.num_videos": 40,
    "data.min_length": 400,
    "data.max_length": 600,
    "data.feature_dim": 12,
    "data.mean_segment_length": 60.0,
    "data.segment_dist": "geometric",
    "data.noise": 1.5,
    "data.long_range": 0.5,
    "data.drift_amplitude": 1.0,
    "data.order_strength": 0.8,
    "data.prototype_scale": 1.5,
    "data.num_folds": 4,
    "data.fold": 0,
    "global.iterations": 100,
    "global.population": 50,
    "global.mutation_prob": 0.2,
    "global.epochs": 5,
    "global.k": 2,
    "global.T": 10,
    "global.shape": "10,10,10,10",
    "local.iterations": 10,
    "local.fraction": 0.1,
    "local.samples": 3,
    "local.epochs_per_update": 3,
    "local.pmf": "abs",
    "tcn.hidden": 16,
    "train.optimizer": "sgd",
    "train.lr": 0.05,
    "train.momentum": 0.9,
    "train.batch_size": 1,
    "train.smooth_weight": 0.15,
    "train.smooth_clip": 16.0,
    "train.grad_clip": 1.0,
    "eval.epochs": 20,
    "eval.folds": "all",
    "metrics.fitness": "f1@0.1",
    "metrics.thresholds": "0.1,0.25,0.5",
}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            if key == "train.grad_clip" and raw.lower() in ("none", "off", ""):
                return None
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    values = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{n}: unknown key {key!r}")
        values[key] = _coerce(key, raw)
    return values


@dataclass
class RunConfig:
    values: dict[str, object] = field(default_factory=lambda: dict(DEFAULTS))

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: list[str] | None = None,
             **direct) -> RunConfig:
        values = dict(DEFAULTS)
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"{path}: config file not found")
            values.update(parse_config_text(path.read_text(), str(path)))
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = _coerce(key, raw)
        for key, value in direct.items():
            key = key.replace("__", ".")
            if key not in DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            values[key] = value
        cfg = cls(values)
        cfg.validate()
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    def validate(self) -> None:
        # building each typed config runs its own checks
        self.synth_config()
        self.global_config()
        self.local_config()
        self.training_config(1)
        parse_metric(self["metrics.fitness"])
        self.thresholds()
        if self["data.num_folds"] < 2:
            raise ConfigError("data.num_folds must be >= 2")
        if not 0 <= self["data.fold"] < self["data.num_folds"]:
            raise ConfigError(f"data.fold must lie in [0, {self['data.num_folds']})")
        if self["eval.epochs"] < 1 or self["tcn.hidden"] < 1:
            raise ConfigError("eval.epochs and tcn.hidden must be >= 1")

    def echo(self) -> str:
        """Effective configuration in the same ``key = value`` format."""
        return "".join(f"{k} = {'none' if v is None else v}\n" for k, v in sorted(self.values.items()))

    def shape(self) -> tuple[int, ...]:
        try:
            return tuple(int(v) for v in str(self["global.shape"]).split(","))
        except ValueError:
            raise ConfigError(f"global.shape: expected comma-separated integers") from None

    def thresholds(self) -> tuple[float, ...]:
        try:
            taus = tuple(float(v) for v in str(self["metrics.thresholds"]).split(","))
        except ValueError:
            raise ConfigError("metrics.thresholds: expected comma-separated numbers") from None
        for t in taus:
            parse_metric(f"f1@{t}")
        return taus

    def synth_config(self) -> SynthTaskConfig:
        v = self.values
        return SynthTaskConfig(
            num_classes=v["data.num_classes"], num_videos=v["data.num_videos"],
            length_range=(v["data.min_length"], v["data.max_length"]),
            feature_dim=v["data.feature_dim"], mean_segment_length=v["data.mean_segment_length"],
            segment_dist=v["data.segment_dist"], noise=v["data.noise"],
            long_range=v["data.long_range"], drift_amplitude=v["data.drift_amplitude"],
            order_strength=v["data.order_strength"], prototype_scale=v["data.prototype_scale"],
            seed=v["seed"])

    def global_config(self) -> GlobalSearchConfig:
        v = self.values
        try:
            space = build_global_space(v["global.k"], v["global.T"])
        except OverflowError as exc:
            raise ConfigError(str(exc)) from None
        return GlobalSearchConfig(
            iterations=v["global.iterations"], population_size=v["global.population"],
            mutation_prob=v["global.mutation_prob"], epochs=v["global.epochs"], seed=v["seed"],
            space=space, shape=self.shape())

    def local_config(self) -> LocalSearchConfig:
        v = self.values
        return LocalSearchConfig(
            iterations=v["local.iterations"], fraction=v["local.fraction"], samples=v["local.samples"],
            epochs_per_update=v["local.epochs_per_update"], pmf=v["local.pmf"], seed=v["seed"])

    def training_config(self, epochs: int) -> TrainingConfig:
        v = self.values
        return TrainingConfig(
            epochs=epochs, optimizer=v["train.optimizer"], lr=v["train.lr"],
            momentum=v["train.momentum"], batch_size=v["train.batch_size"],
            smooth_weight=v["train.smooth_weight"], smooth_clip=v["train.smooth_clip"],
            grad_clip=v["train.grad_clip"], seed=v["seed"])
