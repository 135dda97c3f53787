"""Encoder-decoder translation network with transformer-feature fusion.

Four variants share one UNet-style decoder and differ in what feeds its
skip connections:

  cross-fusion  per level, the frozen-transformer grid is projected 1x1,
                bilinearly aligned to the CNN grid, channel-concatenated,
                merged by a 3x3 conv + batch norm + GELU, then refined by
                a zero-initialized residual 3x3 conv (identity at start)
  concat        alignment and concatenation only, with a 1x1 reducer
  cnn-only      plain UNet; the transformer is never invoked
  vit-only      no CNN encoder; per-level 1x1 projections of the
                transformer grids, upsampled to each level's resolution

The frozen backbone is held by reference and is invisible to
``parameters()``, so optimizers and checkpoints see trainable weights
only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import (
    BackboneHandle,
    FeatureGrid,
    TapSpec,
    default_taps,
    extract_features,
    prepare_backbone_input,
)
from .errors import ConfigError, ShapeError

VARIANTS = ("cross-fusion", "concat", "cnn-only", "vit-only")


@dataclass(frozen=True)
class GeneratorConfig:
    variant: str = "cross-fusion"
    encoder_channels: tuple[int, ...] = (64, 128, 256, 512)
    input_size: int = 256
    levels: int = 4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if len(self.encoder_channels) != self.levels:
            raise ConfigError(
                f"encoder_channels has {len(self.encoder_channels)} entries "
                f"for {self.levels} levels"
            )
        if any(c < 1 for c in self.encoder_channels):
            raise ConfigError(f"channel counts must be positive, got {self.encoder_channels}")
        stride = 2 ** (self.levels - 1)
        if self.input_size % stride != 0 or self.input_size % 16 != 0:
            raise ConfigError(
                f"input_size {self.input_size} must be divisible by {stride} and by 16"
            )

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "encoder_channels": list(self.encoder_channels),
            "input_size": self.input_size,
            "levels": self.levels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(
            variant=d["variant"],
            encoder_channels=tuple(d["encoder_channels"]),
            input_size=int(d["input_size"]),
            levels=int(d.get("levels", len(d["encoder_channels"]))),
        )


def align_to(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize to `size`; exact identity when already there."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


class ConvBlock(nn.Module):
    """Two rounds of 3x3 conv, batch norm, GELU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.GELU(),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.GELU(),
        )

    def forward(self, x):
        return self.body(x)


class CnnEncoder(nn.Module):
    """Cascaded conv blocks with 2x2 max-pooling between levels.

    Level i output keeps 1/2^(i-1) of the input resolution, so level 1 is
    full size.
    """

    def __init__(self, in_ch: int, channels: tuple[int, ...]):
        super().__init__()
        blocks = []
        prev = in_ch
        for c in channels:
            blocks.append(ConvBlock(prev, c))
            prev = c
        self.blocks = nn.ModuleList(blocks)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x) -> list[torch.Tensor]:
        out = []
        for i, block in enumerate(self.blocks):
            if i > 0:
                x = self.pool(x)
            x = block(x)
            out.append(x)
        return out


class CrossFusion(nn.Module):
    """Merge one CNN grid with one transformer grid at the CNN resolution.

    The refinement conv starts at zero so the module is initially the
    plain merged output plus nothing.
    """

    def __init__(self, vit_dim: int, channels: int):
        super().__init__()
        self.project = nn.Conv2d(vit_dim, channels, 1)
        self.fuse = nn.Conv2d(2 * channels, channels, 3, padding=1)
        self.norm = nn.BatchNorm2d(channels)
        self.act = nn.GELU()
        self.refine = nn.Conv2d(channels, channels, 3, padding=1)
        nn.init.zeros_(self.refine.weight)
        nn.init.zeros_(self.refine.bias)

    def merge(self, f_cnn: torch.Tensor, f_vit: torch.Tensor) -> torch.Tensor:
        """Projection, alignment, concatenation, conv-norm-act. No refinement."""
        if f_cnn.shape[0] != f_vit.shape[0]:
            raise ShapeError(
                f"batch mismatch: cnn {f_cnn.shape[0]} vs transformer {f_vit.shape[0]}"
            )
        aligned = align_to(self.project(f_vit), f_cnn.shape[-2:])
        return self.act(self.norm(self.fuse(torch.cat([f_cnn, aligned], dim=1))))

    def forward(self, f_cnn: torch.Tensor, f_vit: torch.Tensor) -> torch.Tensor:
        merged = self.merge(f_cnn, f_vit)
        return merged + self.refine(merged)


class ConcatFusion(nn.Module):
    """Alignment plus concatenation only, reduced back by a 1x1 conv."""

    def __init__(self, vit_dim: int, channels: int):
        super().__init__()
        self.project = nn.Conv2d(vit_dim, channels, 1)
        self.reduce = nn.Conv2d(2 * channels, channels, 1)

    def forward(self, f_cnn: torch.Tensor, f_vit: torch.Tensor) -> torch.Tensor:
        aligned = align_to(self.project(f_vit), f_cnn.shape[-2:])
        return self.reduce(torch.cat([f_cnn, aligned], dim=1))


class Decoder(nn.Module):
    """Transposed-conv upsampling with same-level skip concatenation.

    The deepest grid seeds the decoder; each step doubles resolution,
    concatenates that level's grid, and convolves. The 1-channel head is
    linear (no output activation).
    """

    def __init__(self, channels: tuple[int, ...], out_ch: int = 1):
        super().__init__()
        ups, blocks = [], []
        for i in range(len(channels) - 1, 0, -1):
            ups.append(nn.ConvTranspose2d(channels[i], channels[i - 1], 2, stride=2))
            blocks.append(ConvBlock(2 * channels[i - 1], channels[i - 1]))
        self.ups = nn.ModuleList(ups)
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(channels[0], out_ch, 1)

    def forward(self, grids: list[torch.Tensor]) -> torch.Tensor:
        x = grids[-1]
        for step, (up, block) in enumerate(zip(self.ups, self.blocks)):
            skip = grids[len(grids) - 2 - step]
            x = up(x)
            if x.shape[-2:] != skip.shape[-2:]:
                raise ShapeError(
                    f"decoder level mismatch: upsampled {tuple(x.shape[-2:])} vs "
                    f"skip {tuple(skip.shape[-2:])}"
                )
            x = block(torch.cat([x, skip], dim=1))
        return self.head(x)


class FusionGenerator(nn.Module):
    """The full translation model for one config and one frozen backbone.

    The backbone handle is a plain attribute, not a submodule, so
    ``parameters()`` and ``state_dict()`` cover trainable weights only.
    """

    def __init__(self, config: GeneratorConfig, backbone: BackboneHandle | None):
        super().__init__()
        if backbone is None and config.variant != "cnn-only":
            raise ConfigError(f"variant {config.variant!r} requires a backbone")
        self.config = config
        self.backbone = backbone
        ch = config.encoder_channels

        if config.variant in ("cross-fusion", "concat", "cnn-only"):
            self.encoder = CnnEncoder(1, ch)
        else:
            self.encoder = None

        if config.variant == "cross-fusion":
            self.fusions = nn.ModuleList(CrossFusion(backbone.embed_dim, c) for c in ch)
        elif config.variant == "concat":
            self.fusions = nn.ModuleList(ConcatFusion(backbone.embed_dim, c) for c in ch)
        else:
            self.fusions = None

        if config.variant == "vit-only":
            self.projections = nn.ModuleList(nn.Conv2d(backbone.embed_dim, c, 1) for c in ch)
        else:
            self.projections = None

        self.decoder = Decoder(ch, out_ch=1)
        self.taps: TapSpec | None = None
        if backbone is not None:
            self.taps = default_taps(backbone.block_count, config.levels)

    def _check_input(self, slices: torch.Tensor) -> None:
        s = self.config.input_size
        if slices.ndim != 4 or slices.shape[1] != 1:
            raise ShapeError(f"expected [B,1,{s},{s}], got {tuple(slices.shape)}")
        if tuple(slices.shape[-2:]) != (s, s):
            raise ShapeError(
                f"expected {s}x{s} input (config.input_size), got {tuple(slices.shape[-2:])}"
            )

    def cnn_encode(self, slices: torch.Tensor) -> list[FeatureGrid]:
        if self.encoder is None:
            raise ConfigError(f"variant {self.config.variant!r} has no CNN encoder")
        self._check_input(slices)
        return [
            FeatureGrid(data=t, level=i + 1, source="cnn")
            for i, t in enumerate(self.encoder(slices))
        ]

    def extract_vit(self, slices: torch.Tensor) -> list[FeatureGrid]:
        self._check_input(slices)
        images = prepare_backbone_input(slices, patch_size=self.backbone.patch_size)
        return extract_features(self.backbone, images, self.taps)

    def fuse_level(self, f_cnn: FeatureGrid, f_vit: FeatureGrid, level: int) -> FeatureGrid:
        if self.fusions is None:
            raise ConfigError(f"variant {self.config.variant!r} has no fusion modules")
        expected = self.config.encoder_channels[level - 1]
        if f_cnn.channels != expected:
            raise ShapeError(
                f"level {level} expects {expected} CNN channels, got {f_cnn.channels}"
            )
        data = self.fusions[level - 1](f_cnn.data, f_vit.data)
        return FeatureGrid(data=data, level=level, source="fused")

    def decode(self, grids: list[FeatureGrid]) -> torch.Tensor:
        if len(grids) != self.config.levels:
            raise ShapeError(f"decoder needs {self.config.levels} grids, got {len(grids)}")
        for i, (g, c) in enumerate(zip(grids, self.config.encoder_channels), start=1):
            if g.channels != c:
                raise ShapeError(f"level {i} grid has {g.channels} channels, expected {c}")
        return self.decoder([g.data for g in grids])

    def forward(self, slices: torch.Tensor) -> torch.Tensor:
        self._check_input(slices)
        variant = self.config.variant
        if variant == "cnn-only":
            grids = self.cnn_encode(slices)
        elif variant == "vit-only":
            vit = self.extract_vit(slices)
            s = self.config.input_size
            grids = [
                FeatureGrid(
                    data=align_to(proj(g.data), (s >> i, s >> i)),
                    level=i + 1,
                    source="fused",
                )
                for i, (proj, g) in enumerate(zip(self.projections, vit))
            ]
        else:
            cnn = self.cnn_encode(slices)
            vit = self.extract_vit(slices)
            grids = [
                self.fuse_level(c, v, level=i + 1) for i, (c, v) in enumerate(zip(cnn, vit))
            ]
        return self.decode(grids)

    def trainable_parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters() if p.requires_grad)


def build_generator(config: GeneratorConfig, backbone: BackboneHandle | None) -> FusionGenerator:
    """Construct a generator; `backbone` may be None only for cnn-only."""
    return FusionGenerator(config, backbone)
