"""Training objective: pixel-space L1 plus a frozen-feature perceptual term.

The perceptual term runs prediction and target through the frozen
transformer and sums, over the tapped blocks, the mean absolute
difference of the feature grids. Every reduction is a per-element mean
so the two terms stay on comparable scales at any resolution, and the
default weighting adds them one-to-one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .backbone import BackboneHandle, TapSpec, extract_features, prepare_backbone_input
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class LossConfig:
    lambda_mldp: float = 1.0
    taps: TapSpec = field(default_factory=TapSpec)
    perceptual_enabled: bool = True

    def __post_init__(self):
        if self.lambda_mldp < 0:
            raise ConfigError(f"lambda_mldp must be non-negative, got {self.lambda_mldp}")


@dataclass
class LossBreakdown:
    """Scalar tensors; `total` carries the autograd graph.

    total = l1 + lambda * mldp, accumulated in that order every call.
    """

    l1: torch.Tensor
    mldp: torch.Tensor
    total: torch.Tensor

    def detached(self) -> dict[str, float]:
        return {"l1": self.l1.item(), "mldp": self.mldp.item(), "total": self.total.item()}

    def is_finite(self) -> bool:
        return bool(torch.isfinite(self.total))


def _check_pair(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all elements."""
    _check_pair(pred, target)
    return F.l1_loss(pred, target)


def mldp_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    backbone: BackboneHandle,
    taps: TapSpec | None = None,
) -> torch.Tensor:
    """Summed mean-|diff| of frozen features at each tapped block.

    The target is ground truth, so its features are computed without
    gradient; the prediction keeps its graph, and gradients flow to it
    through the frozen weights.
    """
    _check_pair(pred, target)
    if taps is None:
        taps = TapSpec()
    taps.validate_for(backbone.block_count)
    pred_feats = extract_features(
        backbone, prepare_backbone_input(pred, backbone.patch_size), taps
    )
    with torch.no_grad():
        target_feats = extract_features(
            backbone, prepare_backbone_input(target, backbone.patch_size), taps
        )
    terms = [F.l1_loss(p.data, t.data) for p, t in zip(pred_feats, target_feats)]
    return sum(terms[1:], start=terms[0])


def total_loss(
    pred: torch.Tensor,
    target: torch.Tensor,
    backbone: BackboneHandle | None,
    cfg: LossConfig | None = None,
) -> LossBreakdown:
    """Combined objective: l1 + lambda * perceptual term.

    With the perceptual term disabled or weighted zero, the backbone is
    not invoked and total equals l1 exactly.
    """
    if cfg is None:
        cfg = LossConfig()
    l1 = l1_loss(pred, target)
    if not cfg.perceptual_enabled or cfg.lambda_mldp == 0.0:
        zero = torch.zeros((), dtype=l1.dtype, device=l1.device)
        return LossBreakdown(l1=l1, mldp=zero, total=l1)
    if backbone is None:
        raise ConfigError("perceptual term enabled but no backbone given")
    mldp = mldp_loss(pred, target, backbone, cfg.taps)
    return LossBreakdown(l1=l1, mldp=mldp, total=l1 + cfg.lambda_mldp * mldp)
