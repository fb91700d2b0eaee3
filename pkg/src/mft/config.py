"""Run configuration: JSON file plus command-line overrides.

Every section rejects unknown keys. Defaults::

    {
      "seed": 0,                      # drives synthesis and training
      "data_dir": null,
      "out_dir": "runs",
      "model":    MFTConfig fields,
      "train":    TrainConfig fields except "seed",
      "sampling": {"overlap": 0.8, "tte_min": 30, "tte_max": 60},
      "synth":    {"n_tracks": 200, "noise": 0.05, "weights": [...], "bias": null,
                   "positive_rate": 0.333.., "signal": "all"},
      "grad_check": {"model_dim": 8, "heads": 2, "n_frames": 4, "ffn_hidden": 16,
                     "mlp_hidden": 8, "batch_size": 3, "step": 1e-5, "tolerance": 1e-4},
      "variants": ["full", "v1", "v2", "v3", "v4", "v5"]
    }
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError
from .evaluate import VARIANTS
from .model import MFTConfig
from .synth import ScenarioRule, e_only_rule
from .train import TrainConfig


def _reject_unknown(section: str, d: Mapping, allowed) -> None:
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {sorted(unknown)}")


@dataclass
class SamplingSettings:
    overlap: float = 0.8
    tte_min: int = 30
    tte_max: int = 60

    def __post_init__(self):
        if not 0 <= self.overlap < 1:
            raise ConfigError("sampling.overlap must be in [0, 1)")
        if not 0 <= self.tte_min <= self.tte_max:
            raise ConfigError("sampling needs 0 <= tte_min <= tte_max")

    @property
    def tte_range(self) -> tuple[int, int]:
        return (self.tte_min, self.tte_max)


@dataclass
class SynthSettings:
    n_tracks: int = 200
    noise: float = 0.05
    weights: tuple[float, ...] = ScenarioRule.__dataclass_fields__["weights"].default
    bias: float | None = None
    positive_rate: float = 1.0 / 3.0
    signal: str = "all"  # "all" or "e_only"

    def __post_init__(self):
        self.weights = tuple(self.weights)
        if self.signal not in ("all", "e_only"):
            raise ConfigError("synth.signal must be 'all' or 'e_only'")
        if self.n_tracks < 10:
            raise ConfigError("synth.n_tracks must be at least 10")

    def rule(self, flavor: str) -> ScenarioRule:
        if self.signal == "e_only":
            return e_only_rule(self.noise, flavor)
        return ScenarioRule(self.weights, self.bias, self.noise, flavor, positive_rate=self.positive_rate)


@dataclass
class GradCheckSettings:
    model_dim: int = 8
    heads: int = 2
    n_frames: int = 4
    ffn_hidden: int = 16
    mlp_hidden: int = 8
    batch_size: int = 3
    step: float = 1e-5
    tolerance: float = 1e-4


@dataclass
class RunConfig:
    seed: int = 0
    data_dir: str | None = None
    out_dir: str = "runs"
    model: MFTConfig = field(default_factory=MFTConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampling: SamplingSettings = field(default_factory=SamplingSettings)
    synth: SynthSettings = field(default_factory=SynthSettings)
    grad_check: GradCheckSettings = field(default_factory=GradCheckSettings)
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))

    def __post_init__(self):
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        self.train = replace(self.train, seed=self.seed)
        for name in self.variants:
            if name not in VARIANTS:
                raise ConfigError(f"unknown variant {name!r}; expected one of {list(VARIANTS)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"].pop("seed")
        d["synth"]["weights"] = list(self.synth.weights)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunConfig":
        top = {f.name for f in fields(cls)}
        _reject_unknown("config", d, top)
        kwargs: dict[str, Any] = {k: d[k] for k in ("seed", "data_dir", "out_dir", "variants") if k in d}
        sections = {
            "model": MFTConfig,
            "train": TrainConfig,
            "sampling": SamplingSettings,
            "synth": SynthSettings,
            "grad_check": GradCheckSettings,
        }
        for key, klass in sections.items():
            if key not in d:
                continue
            sub = d[key]
            if not isinstance(sub, Mapping):
                raise ConfigError(f"config section {key!r} must be an object")
            allowed = {f.name for f in fields(klass)} - ({"seed"} if key == "train" else set())
            _reject_unknown(key, sub, allowed)
            try:
                kwargs[key] = klass(**sub)
            except TypeError as exc:
                raise ConfigError(f"config section {key!r}: {exc}") from None
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    return RunConfig.from_dict(raw)


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Apply command-line flags; ``None`` means "not given"."""
    seed = overrides.get("seed")
    if seed is not None:
        cfg.seed = seed
        cfg.train = replace(cfg.train, seed=seed)
    if overrides.get("out") is not None:
        cfg.out_dir = overrides["out"]
    if overrides.get("data") is not None:
        cfg.data_dir = overrides["data"]
    if overrides.get("flavor") is not None:
        cfg.model = replace(cfg.model, flavor=overrides["flavor"])
    tmin, tmax = overrides.get("tte_min"), overrides.get("tte_max")
    if tmin is not None or tmax is not None:
        cfg.sampling = SamplingSettings(
            cfg.sampling.overlap,
            cfg.sampling.tte_min if tmin is None else tmin,
            cfg.sampling.tte_max if tmax is None else tmax,
        )
    if overrides.get("variants"):
        for name in overrides["variants"]:
            if name not in VARIANTS:
                raise ConfigError(f"unknown variant {name!r}; expected one of {list(VARIANTS)}")
        cfg.variants = list(overrides["variants"])
    return cfg
