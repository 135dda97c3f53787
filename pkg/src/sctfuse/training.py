"""Training loop and checkpointing for the translation recipe.

Adam on the trainable parameters only, slice-level shuffling reseeded per
epoch, a per-epoch validation L1 pass with best-checkpoint selection, and
abort-with-diagnostics on a non-finite loss. The frozen backbone never
enters the optimizer or the checkpoint file.
"""

from __future__ import annotations

import math
import pickle
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .backbone import BackboneHandle
from .errors import CheckpointError, ConfigError, ContractError, NonFiniteLossError
from .generator import FusionGenerator, GeneratorConfig, build_generator
from .losses import LossBreakdown, LossConfig, total_loss

FORMAT_VERSION = 1

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 4
    epochs: int = 100
    seed: int = 0
    optimizer: str = "adam"
    checkpoint_every: int = 0  # epochs between periodic checkpoints; 0 disables
    loss: LossConfig = field(default_factory=LossConfig)
    model: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be at least 1")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be non-negative")


@dataclass
class TrainLog:
    """Per-step loss records plus validation history and artifact paths."""

    records: list[dict] = field(default_factory=list)
    val_records: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    grad_coverage: dict | None = None
    wall_seconds: float = 0.0

    def append(self, step: int, epoch: int, breakdown: LossBreakdown, lam: float) -> None:
        if self.records and step <= self.records[-1]["step"]:
            raise ContractError(f"non-increasing step {step}")
        rec = {"step": step, "epoch": epoch, **breakdown.detached()}
        combined = rec["l1"] + lam * rec["mldp"]
        if abs(rec["total"] - combined) > 1e-6 * max(1.0, abs(combined)):
            raise ContractError(f"loss identity violated at step {step}: {rec}")
        self.records.append(rec)

    def losses(self, key: str = "total") -> list[float]:
        return [r[key] for r in self.records]


@dataclass
class TrainResult:
    model: FusionGenerator
    log: TrainLog
    final_checkpoint: str | None = None
    best_checkpoint: str | None = None


def save_checkpoint(model: FusionGenerator, path: str, train_state: dict | None = None) -> None:
    """Serialize trainable weights + config; the backbone stays out by design."""
    payload = {
        "format_version": FORMAT_VERSION,
        "model_config": model.config.to_dict(),
        "backbone": model.backbone.describe() if model.backbone is not None else None,
        "backbone_recipe": model.backbone.recipe if model.backbone is not None else None,
        "state_dict": model.state_dict(),
        "train_state": train_state or {},
    }
    torch.save(payload, path)


def load_checkpoint(
    path: str,
    backbone: BackboneHandle | None,
    expected_config: GeneratorConfig | None = None,
) -> FusionGenerator:
    """Rebuild a model from a checkpoint, validating version and config."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, ValueError, EOFError, pickle.UnpicklingError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version = payload["format_version"]
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {version} not supported (expected {FORMAT_VERSION})"
        )
    cfg = GeneratorConfig.from_dict(payload["model_config"])
    if expected_config is not None and cfg != expected_config:
        raise ConfigError(f"checkpoint config {cfg} differs from expected {expected_config}")
    stored = payload.get("backbone")
    if stored is not None:
        if backbone is None:
            raise ConfigError(f"{path} was trained with a backbone; none was given")
        if backbone.describe() != stored:
            raise ConfigError(
                f"backbone mismatch: checkpoint has {stored}, got {backbone.describe()}"
            )
    model = build_generator(cfg, backbone)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def _stack_batch(dataset, indices: list[int]) -> tuple[torch.Tensor, torch.Tensor]:
    src = torch.stack([dataset.slice_pair(i)[0] for i in indices]).to(torch.float32)
    tgt = torch.stack([dataset.slice_pair(i)[1] for i in indices]).to(torch.float32)
    return src, tgt


def validate_l1(model: FusionGenerator, dataset, batch_size: int = 4) -> float:
    """Global mean absolute error over every validation slice."""
    was_training = model.training
    model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(dataset), batch_size):
            idx = list(range(start, min(start + batch_size, len(dataset))))
            src, tgt = _stack_batch(dataset, idx)
            pred = model(src)
            total += (pred - tgt).abs().sum().item()
            count += tgt.numel()
    if was_training:
        model.train()
    return total / count


def train(
    cfg: TrainConfig,
    dataset,
    backbone: BackboneHandle | None,
    val_dataset=None,
    out_dir: str | None = None,
    resume_from: str | None = None,
) -> TrainResult:
    """Run the full recipe; returns the trained model, log, checkpoint paths.

    `resume_from` warm-starts the weights from a compatible checkpoint;
    optimizer state starts fresh.
    """
    if len(dataset) == 0:
        raise ContractError("training dataset is empty")
    out = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(cfg.seed)
    model = build_generator(cfg.model, backbone)
    if resume_from is not None:
        warm = load_checkpoint(resume_from, backbone, expected_config=cfg.model)
        model.load_state_dict(warm.state_dict())
    opt = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS
    )
    checksum_start = backbone.checksum() if backbone is not None else None

    log = TrainLog()
    result = TrainResult(model=model, log=log)
    best_val = math.inf
    step = 0
    t0 = time.monotonic()

    for epoch in range(1, cfg.epochs + 1):
        order = list(range(len(dataset)))
        random.Random(cfg.seed * 100003 + epoch).shuffle(order)
        model.train()
        for start in range(0, len(order), cfg.batch_size):
            indices = order[start : start + cfg.batch_size]
            src, tgt = _stack_batch(dataset, indices)
            pred = model(src)
            breakdown = total_loss(pred, tgt, backbone, cfg.loss)
            step += 1
            if not breakdown.is_finite():
                raise NonFiniteLossError(
                    f"non-finite loss at step {step}",
                    record={"step": step, "epoch": epoch, **breakdown.detached()},
                )
            opt.zero_grad()
            breakdown.total.backward()
            if step == 1:
                missing = [n for n, p in model.named_parameters() if p.grad is None]
                log.grad_coverage = {"checked_at_step": 1, "missing": missing}
            opt.step()
            log.append(step, epoch, breakdown, cfg.loss.lambda_mldp)

        if val_dataset is not None and len(val_dataset) > 0:
            val = validate_l1(model, val_dataset, cfg.batch_size)
            log.val_records.append({"epoch": epoch, "val_l1": val})
            if out is not None and val < best_val:
                best_val = val
                path = str(out / "best.pt")
                save_checkpoint(model, path, {"epoch": epoch, "val_l1": val})
                result.best_checkpoint = path

        if out is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            path = str(out / f"epoch{epoch:04d}.pt")
            save_checkpoint(model, path, {"epoch": epoch})
            log.checkpoints.append(path)

    if checksum_start is not None and backbone.checksum() != checksum_start:
        raise ContractError("frozen backbone changed during training")

    if out is not None:
        path = str(out / "final.pt")
        save_checkpoint(model, path, {"epoch": cfg.epochs, "steps": step})
        log.checkpoints.append(path)
        result.final_checkpoint = path

    log.wall_seconds = time.monotonic() - t0
    return result
