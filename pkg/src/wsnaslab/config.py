"""Experiment configuration: one JSON file, nine sections, strict keys.

Every section maps onto a dataclass elsewhere in the package; unknown
sections or unknown keys inside a section raise instead of being ignored,
so a typo never silently runs with defaults.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SyntheticDatasetSpec
from .metrics import MetricConfig
from .protocol import ProtocolConfig
from .searchspace import SearchSpaceSpec
from .supernet import MacroParams, SuperNetConfig

CONFIG_SECTIONS = (
    "space",
    "macro",
    "supernet",
    "protocol",
    "metrics",
    "dataset",
    "eval",
    "benchmark",
    "output",
)


def _check_keys(d: dict, known: set[str], where: str) -> None:
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass(frozen=True)
class EvalSettings:
    """How shared-weight evaluation runs after training."""

    supernet_seeds: tuple[int, ...] = (0, 1, 2)
    bn_mode: str = "batch"

    def __post_init__(self):
        if not self.supernet_seeds:
            raise ValueError("need at least one super-net seed")
        if len(set(self.supernet_seeds)) != len(self.supernet_seeds):
            raise ValueError("super-net seeds must be distinct")
        if self.bn_mode not in ("batch", "tracked"):
            raise ValueError(f"unknown bn_mode {self.bn_mode!r}")

    def to_dict(self) -> dict:
        return {"supernet_seeds": list(self.supernet_seeds), "bn_mode": self.bn_mode}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalSettings":
        _check_keys(d, {"supernet_seeds", "bn_mode"}, "eval")
        kwargs = dict(d)
        if "supernet_seeds" in kwargs:
            kwargs["supernet_seeds"] = tuple(int(s) for s in kwargs["supernet_seeds"])
        return cls(**kwargs)


@dataclass(frozen=True)
class BenchmarkSettings:
    """Where the ground-truth table lives and how it was (or will be) built."""

    path: str = "benchmark.jsonl"
    base_seed: int = 0
    run_seeds: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if not self.run_seeds:
            raise ValueError("need at least one benchmark run seed")
        if len(set(self.run_seeds)) != len(self.run_seeds):
            raise ValueError("benchmark run seeds must be distinct")

    def to_dict(self) -> dict:
        return {"path": self.path, "base_seed": self.base_seed, "run_seeds": list(self.run_seeds)}

    @classmethod
    def from_dict(cls, d: dict) -> "BenchmarkSettings":
        _check_keys(d, {"path", "base_seed", "run_seeds"}, "benchmark")
        kwargs = dict(d)
        if "run_seeds" in kwargs:
            kwargs["run_seeds"] = tuple(int(s) for s in kwargs["run_seeds"])
        return cls(**kwargs)


@dataclass(frozen=True)
class OutputSettings:
    directory: str = "runs/default"

    def to_dict(self) -> dict:
        return {"directory": self.directory}

    @classmethod
    def from_dict(cls, d: dict) -> "OutputSettings":
        _check_keys(d, {"directory"}, "output")
        return cls(**d)


@dataclass
class ExperimentConfig:
    space: SearchSpaceSpec = field(default_factory=SearchSpaceSpec)
    macro: MacroParams = field(default_factory=MacroParams)
    supernet: SuperNetConfig = field(default_factory=SuperNetConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    dataset: SyntheticDatasetSpec = field(default_factory=SyntheticDatasetSpec)
    eval: EvalSettings = field(default_factory=EvalSettings)
    benchmark: BenchmarkSettings = field(default_factory=BenchmarkSettings)
    output: OutputSettings = field(default_factory=OutputSettings)

    def to_dict(self) -> dict:
        return {name: getattr(self, name).to_dict() for name in CONFIG_SECTIONS}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        _check_keys(d, set(CONFIG_SECTIONS), "config")
        parsers = {
            "space": SearchSpaceSpec.from_dict,
            "macro": MacroParams.from_dict,
            "supernet": SuperNetConfig.from_dict,
            "protocol": ProtocolConfig.from_dict,
            "metrics": MetricConfig.from_dict,
            "dataset": SyntheticDatasetSpec.from_dict,
            "eval": EvalSettings.from_dict,
            "benchmark": BenchmarkSettings.from_dict,
            "output": OutputSettings.from_dict,
        }
        kwargs = {}
        for name, section in d.items():
            if not isinstance(section, dict):
                raise ValueError(f"section {name!r} must be an object, got {type(section).__name__}")
            kwargs[name] = parsers[name](section)
        return cls(**kwargs)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: not valid JSON ({e})") from e
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: top level must be an object")
    try:
        return ExperimentConfig.from_dict(raw)
    except (ValueError, TypeError) as e:
        raise ValueError(f"{path}: {e}") from e


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


__all__ = [
    "CONFIG_SECTIONS",
    "BenchmarkSettings",
    "EvalSettings",
    "ExperimentConfig",
    "OutputSettings",
    "load_config",
    "save_config",
]
