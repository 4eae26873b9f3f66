"""Experiment configuration: nested dataclasses, YAML files, dotted overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError
from .network import LayerSpec, NetworkSpec, toy_network
from .snn import SimConfig
from .synops import LossConfig


@dataclass
class DataConfig:
    root: str | None = None  # prepared dataset directory; synthetic when unset
    classes: int = 4
    per_class: int = 200
    sensor: list = field(default_factory=lambda: [16, 16])
    frame_events: int = 3000
    noise: float = 0.1
    test_fraction: float = 0.2
    seed: int = 0


@dataclass
class NetworkConfig:
    channels: list = field(default_factory=lambda: [4, 8])
    padding: int = 1
    dropout: float = 0.0
    output_activation: bool = False
    # explicit layer list (LayerSpec dicts); overrides channels/padding/dropout
    layers: list | None = None

    def build(self, input_shape, num_classes):
        if self.layers:
            layers = tuple(LayerSpec.from_dict(d) for d in self.layers)
            return NetworkSpec(input_shape, layers, self.output_activation)
        spec = toy_network(input_shape, num_classes, tuple(self.channels), self.dropout, self.padding)
        return NetworkSpec(spec.input_shape, spec.layers, self.output_activation)


@dataclass
class LossSection:
    mode: str = "none"
    target: float = 0.0
    alpha: float | None = None

    def build(self):
        return LossConfig(self.mode, self.target, self.alpha)


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    milestones: list = field(default_factory=list)
    decay: float = 0.1
    weight_decay: float = 0.0
    decoupled: bool = False


@dataclass
class TrainingConfig:
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    quantize: bool = False


@dataclass
class SweepConfig:
    halvings: int = 5
    targets: list = field(default_factory=list)  # explicit S0 list; halving when empty
    mode: str = "synop"
    quantize: bool = True
    alpha: float | None = None  # required for spike-L1
    finetune_epochs: int = 30
    lr: float = 1e-3
    weight_decay: float = 1e-3
    accuracy_floor: float = 1.5  # multiple of chance level


@dataclass
class ConversionConfig:
    rhos: list = field(default_factory=lambda: [0.25, 0.5, 1.0, 2.0, 4.0])
    robust_normalize: bool = True
    percentile: float = 99.0
    compensation: list = field(default_factory=lambda: [1.0, 1.5, 2.0])


@dataclass
class SimulationConfig:
    mode: str = "event-replay"
    dt_us: int = 1000
    n_dt: int = 10
    threshold: float = 1.0
    v_floor: bool = False
    checkpoints: list = field(default_factory=lambda: [10, 20, 30, 40, 50])

    def build(self):
        return SimConfig(self.mode, self.dt_us, self.n_dt, self.threshold, True, self.v_floor)


@dataclass
class ReportConfig:
    joules_per_synop: float = 1e-11


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossSection = field(default_factory=LossSection)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    conversion: ConversionConfig = field(default_factory=ConversionConfig)
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return _build(cls, d or {}, "")

    def with_overrides(self, overrides):
        return ExperimentConfig.from_dict(apply_overrides(self.to_dict(), overrides))

    def dump(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


def _build(cls, d, prefix):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config key {prefix}{unknown[0]}")
    kwargs = {}
    for name, value in d.items():
        f = fields[name]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        else:
            kwargs[name] = _coerce(value, default, f"{prefix}{name}")
    return cls(**kwargs)


def _coerce(value, default, key):
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key}: expected a string, got {value!r}")
    return value


def _number_or_str(value):
    # YAML 1.1 reads "1e-6" (no dot) as a string
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            pass
    return value


def apply_overrides(tree, overrides):
    """Apply ``dotted.key=value`` strings (values parsed as YAML) to a config dict."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = tree
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown config key {key}")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown config key {key}")
        node[parts[-1]] = _number_or_str(yaml.safe_load(raw))
    return tree


def load_config(path=None, overrides=()):
    tree = ExperimentConfig().to_dict()
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text()) or {}
        tree = _merge(tree, loaded, "")
    return ExperimentConfig.from_dict(apply_overrides(tree, overrides))


def _merge(base, new, prefix):
    if not isinstance(new, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    out = dict(base)
    for k, v in new.items():
        if k not in base:
            raise ConfigError(f"unknown config key {prefix}{k}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{prefix}{k}.")
        else:
            out[k] = v
    return out
