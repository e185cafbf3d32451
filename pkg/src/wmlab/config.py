"""Experiment configuration: one human-readable YAML document per run.

A config file alone reproduces a run; unknown keys are rejected; CLI
``--set dotted.key=value`` overrides file values; the merged effective
config is written next to the outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigurationError
from .losses import LossWeights
from .media import StripeTaskConfig, synthesize_task, load_dataset
from .training import TrainSchedule

RECIPES = ("table1", "table2", "table2_dagger", "table4", "table5_lambda",
           "table6_size", "table7_multi", "table8_self", "channel_sweep",
           "ss_baseline")

# the Table-2 desk matrix: four architectures with L2 plus UNet loss combos
DEFAULT_ATTACKS = (
    {"arch": "cnet", "losses": ["l2"]},
    {"arch": "res9", "losses": ["l2"]},
    {"arch": "res16", "losses": ["l2"]},
    {"arch": "unet", "losses": ["l2"]},
    {"arch": "unet", "losses": ["l1"]},
    {"arch": "unet", "losses": ["l1", "adversarial"]},
    {"arch": "unet", "losses": ["l2", "adversarial"]},
)


def _from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**data)


@dataclass
class DatasetConfig:
    seed: int = 7
    n: int = 576
    size: tuple[int, int] = (64, 64)
    split_counts: tuple[int, int, int] = (256, 256, 64)
    task: str = "stripe_removal"
    stripe_amplitude: float = 0.25
    channels: int = 1
    dir: str | None = None  # load a materialized dataset instead of synthesizing

    def __post_init__(self):
        self.size = tuple(self.size)
        self.split_counts = tuple(self.split_counts)

    def build(self):
        if self.dir:
            return load_dataset(Path(self.dir))
        cfg = StripeTaskConfig(stripe_amplitude=self.stripe_amplitude,
                               channels=self.channels)
        return synthesize_task(self.seed, self.n, self.size, self.task, cfg,
                               self.split_counts)


@dataclass
class WatermarkConfig:
    seed: int = 100
    native_size: tuple[int, int] | None = None  # None -> cover size
    pad_value: float = 1.0

    def __post_init__(self):
        if self.native_size is not None:
            self.native_size = tuple(self.native_size)

    def build(self, cover_size, channels=1):
        from .media import WatermarkSpec, make_watermark
        native = self.native_size or tuple(cover_size)
        logo = make_watermark(self.seed, native, channels)
        return WatermarkSpec.from_native(logo, tuple(cover_size), self.pad_value)


@dataclass
class SchedulesConfig:
    initial: TrainSchedule = field(default_factory=lambda: TrainSchedule(
        epochs=50, batch_size=8, lr=2e-4))
    adversarial: TrainSchedule = field(default_factory=lambda: TrainSchedule(
        epochs=25, batch_size=8, lr=1e-4))
    surrogate: TrainSchedule = field(default_factory=lambda: TrainSchedule(
        epochs=40, batch_size=16, lr=1e-4))
    task: TrainSchedule = field(default_factory=lambda: TrainSchedule(
        epochs=50, batch_size=8, lr=2e-4))

    @classmethod
    def parse(cls, data: dict, where: str):
        out = cls()
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"{where}: unknown keys {sorted(unknown)}")
        for name, sub in data.items():
            base = getattr(out, name).to_dict()
            if not isinstance(sub, dict):
                raise ConfigurationError(f"{where}.{name}: expected a mapping")
            bad = set(sub) - set(base)
            if bad:
                raise ConfigurationError(f"{where}.{name}: unknown keys {sorted(bad)}")
            base.update(sub)
            base["betas"] = tuple(base["betas"])
            setattr(out, name, TrainSchedule(**base))
        return out


@dataclass
class RecipeOptions:
    """Per-recipe extras; only the ones a recipe reads matter to it."""

    lambdas: tuple = (0.1, 0.5, 1.0, 2.0, 10.0)   # table5_lambda
    wm_sizes: tuple = (32, 64)                    # table6_size (desk-max = cover)
    k: int = 2                                    # table7_multi watermark count
    multi_seeds: tuple = (100, 101)               # table7_multi watermark seeds
    pool_seeds: tuple = tuple(range(200, 208))    # table4 overwriting pool
    attacker_seeds: tuple = (300, 301, 302)       # table4 attacker watermarks
    widths: tuple = (8, 16, 32, 64)               # channel_sweep CNet widths
    n_covers: int = 100                           # ss_baseline
    n_bits: int = 64
    alpha: float = 0.03
    block_size: int = 8

    def __post_init__(self):
        for name in ("lambdas", "wm_sizes", "multi_seeds", "pool_seeds",
                     "attacker_seeds", "widths"):
            setattr(self, name, tuple(getattr(self, name)))


@dataclass
class ExperimentConfig:
    recipe: str = "table1"
    seed: int = 7
    out_dir: str | None = None
    scale: str = "desk"
    width_multiplier: int = 2
    bundle_dir: str | None = None   # prerequisite checkpoint dir (table1 output)
    cells_dir: str | None = None    # reuse trained surrogate cells (table2 output)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    watermark: WatermarkConfig = field(default_factory=WatermarkConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    schedules: SchedulesConfig = field(default_factory=SchedulesConfig)
    attacks: tuple = DEFAULT_ATTACKS
    options: RecipeOptions = field(default_factory=RecipeOptions)

    def __post_init__(self):
        if self.recipe not in RECIPES:
            raise ConfigurationError(f"unknown recipe {self.recipe!r}; choose from {RECIPES}")
        if self.scale not in ("desk", "micro"):
            raise ConfigurationError(f"scale must be desk or micro, got {self.scale!r}")

    # -- dict / yaml round trip ------------------------------------------
    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigurationError("config root must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"config: unknown keys {sorted(unknown)}")
        kwargs = dict(data)
        if "dataset" in kwargs:
            kwargs["dataset"] = _from_dict(DatasetConfig, kwargs["dataset"], "dataset")
        if "watermark" in kwargs:
            kwargs["watermark"] = _from_dict(WatermarkConfig, kwargs["watermark"], "watermark")
        if "weights" in kwargs:
            kwargs["weights"] = _from_dict(LossWeights, kwargs["weights"], "weights")
        if "schedules" in kwargs:
            kwargs["schedules"] = SchedulesConfig.parse(kwargs["schedules"], "schedules")
        if "options" in kwargs:
            kwargs["options"] = _from_dict(RecipeOptions, kwargs["options"], "options")
        if "attacks" in kwargs:
            atts = kwargs["attacks"]
            if not isinstance(atts, (list, tuple)):
                raise ConfigurationError("attacks: expected a list")
            for att in atts:
                bad = set(att) - {"arch", "losses", "channels"}
                if bad:
                    raise ConfigurationError(f"attacks: unknown keys {sorted(bad)}")
            kwargs["attacks"] = tuple(atts)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return {
            "recipe": self.recipe,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "scale": self.scale,
            "width_multiplier": self.width_multiplier,
            "bundle_dir": self.bundle_dir,
            "cells_dir": self.cells_dir,
            "dataset": {"seed": self.dataset.seed, "n": self.dataset.n,
                        "size": list(self.dataset.size),
                        "split_counts": list(self.dataset.split_counts),
                        "task": self.dataset.task,
                        "stripe_amplitude": self.dataset.stripe_amplitude,
                        "channels": self.dataset.channels,
                        "dir": self.dataset.dir},
            "watermark": {"seed": self.watermark.seed,
                          "native_size": list(self.watermark.native_size)
                          if self.watermark.native_size else None,
                          "pad_value": self.watermark.pad_value},
            "weights": self.weights.to_dict(),
            "schedules": {name: getattr(self.schedules, name).to_dict()
                          for name in ("initial", "adversarial", "surrogate", "task")},
            "attacks": [dict(a) for a in self.attacks],
            "options": {"lambdas": list(self.options.lambdas),
                        "wm_sizes": list(self.options.wm_sizes),
                        "k": self.options.k,
                        "multi_seeds": list(self.options.multi_seeds),
                        "pool_seeds": list(self.options.pool_seeds),
                        "attacker_seeds": list(self.options.attacker_seeds),
                        "widths": list(self.options.widths),
                        "n_covers": self.options.n_covers,
                        "n_bits": self.options.n_bits,
                        "alpha": self.options.alpha,
                        "block_size": self.options.block_size},
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, default_flow_style=None)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigurationError(f"invalid YAML: {e}") from e
        return cls.from_dict(data or {})

    @classmethod
    def load(cls, path: Path) -> "ExperimentConfig":
        return cls.from_yaml(Path(path).read_text())

    def save(self, path: Path) -> None:
        Path(path).write_text(self.to_yaml())


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``dotted.key=value`` overrides (values parsed as YAML)."""
    data = cfg.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigurationError(f"override {item!r}: bad value ({e})") from e
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigurationError(f"override {item!r}: unknown section {part!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigurationError(f"override {item!r}: unknown key {parts[-1]!r}")
        node[parts[-1]] = value
    return ExperimentConfig.from_dict(data)


def micro_preset(cfg: ExperimentConfig) -> ExperimentConfig:
    """Shrink a config for smoke runs: tiny data, few epochs, narrow nets."""
    data = cfg.to_dict()
    data["scale"] = "micro"
    data["dataset"].update({"n": 96, "size": [32, 32], "split_counts": [48, 32, 16]})
    if data["watermark"]["native_size"]:
        data["watermark"]["native_size"] = [32, 32]
    data["width_multiplier"] = 1
    for name, epochs in (("initial", 6), ("adversarial", 4), ("surrogate", 6), ("task", 6)):
        data["schedules"][name]["epochs"] = epochs
        data["schedules"][name]["eval_every"] = 0
    data["options"].update({"n_covers": 20, "wm_sizes": [16, 32],
                            "widths": [8, 16], "pool_seeds": [200, 201],
                            "attacker_seeds": [300]})
    return ExperimentConfig.from_dict(data)
