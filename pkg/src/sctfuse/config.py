"""Declarative run configuration.

One YAML file drives a run: `model` and `loss` mirror GeneratorConfig and
LossConfig, `train` mirrors TrainConfig, `backbone` selects the frozen
encoder (real weights or deterministic standin), and `data` points at a
manifest of paired volumes. The environment variable SCTFUSE_DATA_ROOT
overrides `data.root` so one config file works across machines.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import (
    MODE_PRETRAINED,
    MODE_STANDIN,
    BackboneHandle,
    TapSpec,
    ViTGeometry,
    default_taps,
    load_backbone,
)
from .data import PairedDataset, load_manifest_cases, read_manifest, split_dataset
from .errors import ConfigError
from .generator import GeneratorConfig
from .losses import LossConfig
from .training import TrainConfig

DATA_ROOT_ENV = "SCTFUSE_DATA_ROOT"
TASKS = ("cbct2ct", "mri2ct")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class DataConfig:
    root: str
    task: str = "cbct2ct"
    size: int = 256
    split_seed: int = 0
    manifest: str = "manifest.json"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"data.task must be one of {TASKS}, got {self.task!r}")
        if not self.root:
            raise ConfigError(f"data.root is required (or set {DATA_ROOT_ENV})")

    @property
    def source_modality(self) -> str:
        return "MRI" if self.task == "mri2ct" else "CBCT"

    @property
    def manifest_path(self) -> str:
        return str(Path(self.root) / self.manifest)


# Short spellings accepted in YAML for the canonical mode names.
MODE_ALIASES = {
    "standin": MODE_STANDIN,
    "pretrained": MODE_PRETRAINED,
}


@dataclass(frozen=True)
class BackboneConfig:
    mode: str = MODE_STANDIN
    weights_path: str | None = None
    taps: tuple[int, ...] | None = None
    seed: int = 0
    depth: int = 12
    embed_dim: int = 768
    num_heads: int = 12
    patch_size: int = 16

    def __post_init__(self):
        mode = MODE_ALIASES.get(self.mode, self.mode)
        object.__setattr__(self, "mode", mode)
        if mode not in (MODE_PRETRAINED, MODE_STANDIN):
            raise ConfigError(
                f"backbone.mode must be {MODE_PRETRAINED!r} or {MODE_STANDIN!r}, "
                f"got {self.mode!r}"
            )

    def geometry(self) -> ViTGeometry:
        return ViTGeometry(
            depth=self.depth,
            embed_dim=self.embed_dim,
            num_heads=self.num_heads,
            patch_size=self.patch_size,
        )


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig
    data: DataConfig
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    out_dir: str = "runs/run"


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name) or {}
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be a mapping, got {type(value).__name__}")
    return value


def _check_keys(section: dict, allowed: tuple[str, ...], name: str) -> None:
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key {name}.{unknown[0]!r}; allowed: {sorted(allowed)}")


def load_run_config(path: str, env: dict | None = None) -> RunConfig:
    """Parse and validate one YAML run configuration."""
    env = dict(os.environ if env is None else env)
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must be a mapping at top level")
    _check_keys(raw, ("train", "model", "loss", "backbone", "data", "out_dir"), "top-level")

    model_raw = _section(raw, "model")
    _check_keys(model_raw, ("variant", "encoder_channels", "input_size", "levels"), "model")
    model_kwargs = dict(model_raw)
    if "encoder_channels" in model_kwargs:
        model_kwargs["encoder_channels"] = tuple(model_kwargs["encoder_channels"])
    model_cfg = GeneratorConfig(**model_kwargs)

    backbone_raw = _section(raw, "backbone")
    _check_keys(
        backbone_raw,
        ("mode", "weights_path", "taps", "seed", "depth", "embed_dim", "num_heads", "patch_size"),
        "backbone",
    )
    backbone_kwargs = dict(backbone_raw)
    if backbone_kwargs.get("taps") is not None:
        backbone_kwargs["taps"] = tuple(backbone_kwargs["taps"])
    backbone_cfg = BackboneConfig(**backbone_kwargs)

    if backbone_cfg.taps is not None:
        taps = TapSpec(backbone_cfg.taps)
    else:
        taps = default_taps(backbone_cfg.depth, model_cfg.levels)
    taps.validate_for(backbone_cfg.depth)

    loss_raw = _section(raw, "loss")
    _check_keys(loss_raw, ("lambda_mldp", "perceptual_enabled"), "loss")
    loss_cfg = LossConfig(taps=taps, **loss_raw)

    train_raw = _section(raw, "train")
    _check_keys(
        train_raw,
        ("learning_rate", "batch_size", "epochs", "seed", "optimizer", "checkpoint_every"),
        "train",
    )
    train_cfg = TrainConfig(loss=loss_cfg, model=model_cfg, **train_raw)

    data_raw = _section(raw, "data")
    _check_keys(data_raw, ("root", "task", "size", "split_seed", "manifest"), "data")
    data_kwargs = dict(data_raw)
    if env.get(DATA_ROOT_ENV):
        data_kwargs["root"] = env[DATA_ROOT_ENV]
    if "root" not in data_kwargs:
        raise ConfigError(f"data.root is required (or set {DATA_ROOT_ENV})")
    if "size" not in data_kwargs:
        data_kwargs["size"] = model_cfg.input_size
    data_cfg = DataConfig(**data_kwargs)
    if data_cfg.size != model_cfg.input_size:
        raise ConfigError(
            f"data.size {data_cfg.size} must equal model.input_size {model_cfg.input_size}"
        )

    out_dir = raw.get("out_dir", f"runs/{Path(path).stem}")
    if not isinstance(out_dir, str):
        raise ConfigError(f"out_dir must be a string, got {type(out_dir).__name__}")
    return RunConfig(train=train_cfg, data=data_cfg, backbone=backbone_cfg, out_dir=out_dir)


def make_backbone(cfg: BackboneConfig) -> BackboneHandle:
    """Load the frozen encoder this config describes."""
    return load_backbone(
        cfg.mode, weights_path=cfg.weights_path, geometry=cfg.geometry(), seed=cfg.seed
    )


def load_split_datasets(cfg: RunConfig) -> dict[str, PairedDataset]:
    """Manifest -> deterministic 7:1:2 split -> one PairedDataset per split."""
    data = cfg.data
    entries = read_manifest(data.manifest_path)
    ids = [e["case_id"] for e in entries]
    split_ids = dict(zip(SPLITS, split_dataset(ids, seed=data.split_seed)))
    return {
        name: load_manifest_cases(
            data.manifest_path,
            case_ids=split_ids[name],
            source_modality=data.source_modality,
            split=name,
            size=data.size,
        )
        for name in SPLITS
    }
