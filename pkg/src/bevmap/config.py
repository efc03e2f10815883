"""Run configuration: one JSON document that fully specifies any CLI command.

Sections mirror the module configs.  Parsing is strict: unknown keys are
hard errors so a typo never silently falls back to a default.  An effective
snapshot of the resolved config is written next to every command's
artifacts, and rerunning from that snapshot reproduces the run.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Any

from .attention import ALL_VARIANTS, VARIANT_SCALE_THEN_SAMPLE


class ConfigError(ValueError):
    pass


@dataclass
class ExtentSection:
    x_min: float = -30.0
    x_max: float = 30.0
    y_min: float = -15.0
    y_max: float = 15.0
    h: int = 200
    w: int = 100


@dataclass
class ScenesSection:
    count: int = 200
    n_points: int = 20
    extent: ExtentSection = field(default_factory=ExtentSection)
    divider_count: list = field(default_factory=lambda: [2, 4])
    crossing_count: list = field(default_factory=lambda: [1, 2])
    boundary_count: list = field(default_factory=lambda: [1, 2])
    divider_curvature: list = field(default_factory=lambda: [0.0, 0.004])
    divider_span: list = field(default_factory=lambda: [1.0, 1.0])
    divider_lanes: int = 0
    lane_jitter: float = 0.3
    crossing_size: list = field(default_factory=lambda: [4.0, 8.0])
    crossing_slots: int = 0
    slot_jitter: float = 1.0
    boundary_margin: float = 1.5
    noise_sd: float = 0.1


@dataclass
class FeaturesSection:
    channels: int = 32
    num_levels: int = 2
    truncation: float = 3.0
    noise_sd: float = 0.01


@dataclass
class DecoderSection:
    n_instances: int = 50
    n_prior: int = 9
    n_layers: int = 6
    n_heads: int = 8
    ffn_dim: int = 256
    head_hidden: int = 64
    variant: str = VARIANT_SCALE_THEN_SAMPLE
    num_points_attn: int = 4
    init_sd: float = 0.02


@dataclass
class PriorsSection:
    k: int = 50
    n_pri: int = 9
    max_iters: int = 100


@dataclass
class LossSection:
    lambda_var: float = 1.0
    lambda_dist: float = 1.0
    delta_v: float = 0.5
    delta_d: float = 3.0
    lambda_cls: float = 2.0
    lambda_pts: float = 5.0
    lambda_disc: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0


@dataclass
class TrainSection:
    steps: int = 2000
    lr: float = 0.1
    optimizer: str = "adagrad"
    prior_mode: str = "prior"
    feature_noise_sd: float = 0.0


@dataclass
class EvalSection:
    thresholds: list = field(default_factory=lambda: [0.5, 1.0, 1.5])


@dataclass
class BenchSection:
    channels: int = 256
    n_heads: int = 8
    num_levels: int = 3
    num_points: int = 4
    queries: int = 1000
    h: int = 200
    w: int = 100
    repeats: int = 100


@dataclass
class IoSection:
    out_dir: str = "runs/out"
    data_dir: str = ""
    val_dir: str = ""
    priors_path: str = ""
    checkpoint_path: str = ""


@dataclass
class RunConfig:
    seed: int = 0
    scenes: ScenesSection = field(default_factory=ScenesSection)
    features: FeaturesSection = field(default_factory=FeaturesSection)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    priors: PriorsSection = field(default_factory=PriorsSection)
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)
    io: IoSection = field(default_factory=IoSection)

    def __post_init__(self):
        if self.decoder.variant not in ALL_VARIANTS:
            raise ConfigError(f"decoder.variant must be one of {ALL_VARIANTS}")


# --------------------------------------------------------------------------
# Strict dict <-> dataclass conversion
# --------------------------------------------------------------------------


def _from_dict(cls, doc: dict, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(doc).__name__}")
    known = {f.name: f for f in fields(cls)}
    kwargs: dict[str, Any] = {}
    for key, value in doc.items():
        if key not in known:
            raise ConfigError(f"unknown config key {path + key!r}")
        ftype = known[key].type
        default = known[key].default_factory() if known[key].default_factory is not dataclasses.MISSING else None
        if is_dataclass(default):
            kwargs[key] = _from_dict(type(default), value, f"{path}{key}.")
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(doc: dict) -> RunConfig:
    return _from_dict(RunConfig, doc, "")


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path: str) -> RunConfig:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno}: {e.msg}") from e
    doc.pop("command", None)  # snapshots carry the command they came from
    return config_from_dict(doc)


def save_config(cfg: RunConfig, path: str, command: str | None = None) -> None:
    doc = config_to_dict(cfg)
    if command is not None:
        doc["command"] = command
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply `section.key=value` overrides; values parse as JSON, else strings."""
    doc = config_to_dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key.path=value")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        parts = dotted.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"override {dotted!r}: no such section {part!r}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"override {dotted!r}: unknown key {parts[-1]!r}")
        node[parts[-1]] = value
    return config_from_dict(doc)
