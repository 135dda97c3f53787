"""Frozen vision-transformer feature extraction.

A ViT-B/16-style encoder (12 pre-norm blocks, 768-dim embeddings, 16x16
patches) is used purely as a feature extractor: its weights are frozen at
load time and intermediate block outputs are read out as spatial feature
grids. Two weight sources are supported: a serialized tensor file matching
the ViT-B/16 manifest, and a deterministic randomly-initialized standin of
configurable (usually much smaller) geometry so the full pipeline runs
without any pretrained download.

Gradients never reach the weights, but they do flow through the
activations back to the input, which the feature-space loss relies on.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import BackboneLoadError, ConfigError, ShapeError

# Published normalization statistics of the pretrained encoder's input
# pipeline (RGB, values in [0, 1]).
IMAGE_MEAN = (0.485, 0.456, 0.406)
IMAGE_STD = (0.229, 0.224, 0.225)

MODE_PRETRAINED = "pretrained-file"
MODE_STANDIN = "deterministic-standin"


@dataclass(frozen=True)
class ViTGeometry:
    """Structural description of the transformer encoder."""

    depth: int = 12
    embed_dim: int = 768
    num_heads: int = 12
    patch_size: int = 16
    mlp_ratio: float = 4.0
    # 1 class token + 4 register tokens, none of which map to pixels.
    num_prefix_tokens: int = 5
    # Side length of the patch grid the positional table is stored at
    # (16 -> 256x256 native input); other grids are interpolated.
    pos_grid: int = 16

    def __post_init__(self):
        if self.depth < 1 or self.embed_dim < 1:
            raise ConfigError("depth and embed_dim must be positive")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )


VIT_B16 = ViTGeometry()


def standin_geometry(
    depth: int = 4, embed_dim: int = 32, num_heads: int = 2, patch_size: int = 16
) -> ViTGeometry:
    """Small encoder with the same structure, for tests and CPU runs."""
    return ViTGeometry(
        depth=depth, embed_dim=embed_dim, num_heads=num_heads, patch_size=patch_size
    )


@dataclass(frozen=True)
class TapSpec:
    """Which block outputs to read features from (1-based indices)."""

    layers: tuple[int, ...] = (3, 6, 9, 12)

    def __post_init__(self):
        if len(self.layers) == 0:
            raise ConfigError("tap list is empty")
        if any(b != int(b) or b < 1 for b in self.layers):
            raise ConfigError(f"tap indices must be positive integers, got {self.layers}")
        if any(b >= a for b, a in zip(self.layers, self.layers[1:])):
            raise ConfigError(f"tap indices must be strictly increasing, got {self.layers}")

    def validate_for(self, block_count: int) -> None:
        if self.layers[-1] > block_count:
            raise ConfigError(
                f"tap {self.layers[-1]} out of range for a {block_count}-block encoder"
            )


def default_taps(block_count: int, levels: int = 4) -> TapSpec:
    """Evenly spaced taps ending at the last block: [3,6,9,12] for 12 blocks."""
    if block_count % levels != 0:
        raise ConfigError(
            f"cannot derive {levels} evenly spaced taps from {block_count} blocks; "
            "set taps explicitly"
        )
    step = block_count // levels
    return TapSpec(tuple(step * (i + 1) for i in range(levels)))


@dataclass
class FeatureGrid:
    """One feature map in the level hierarchy.

    `source` records which encoder produced it ("cnn", "dino") or that it
    is the result of fusion ("fused"); `level` is 1-based.
    """

    data: torch.Tensor
    level: int
    source: str

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeError(f"feature grid must be [B,C,H,W], got {tuple(self.data.shape)}")
        if self.source not in ("cnn", "dino", "fused"):
            raise ConfigError(f"unknown feature source {self.source!r}")

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    def validate_finite(self) -> None:
        if not torch.isfinite(self.data).all():
            raise ValueError(f"non-finite values in {self.source} grid at level {self.level}")


class SelfAttention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, t, d = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.num_heads, d // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)
        out = F.scaled_dot_product_attention(q, k, v)
        out = out.transpose(1, 2).reshape(b, t, d)
        return self.proj(out)


class TransformerBlock(nn.Module):
    """Pre-norm residual block: x + attn(ln(x)), then x + mlp(ln(x))."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = SelfAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        x = x + self.mlp(self.norm2(x))
        return x


class PatchTransformer(nn.Module):
    """ViT trunk: conv patch embedding, prefix tokens, cascaded blocks.

    The final layernorm is part of the weight layout but is not applied to
    tap readouts; intermediate features are taken from the raw residual
    stream after each block.
    """

    def __init__(self, geometry: ViTGeometry):
        super().__init__()
        g = geometry
        self.geometry = g
        self.patch_embed = nn.Conv2d(3, g.embed_dim, g.patch_size, stride=g.patch_size)
        self.prefix_tokens = nn.Parameter(torch.zeros(1, g.num_prefix_tokens, g.embed_dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, g.pos_grid * g.pos_grid, g.embed_dim))
        self.blocks = nn.ModuleList(
            TransformerBlock(g.embed_dim, g.num_heads, g.mlp_ratio) for _ in range(g.depth)
        )
        self.norm = nn.LayerNorm(g.embed_dim)

    def _pos_for_grid(self, h: int, w: int) -> torch.Tensor:
        g = self.geometry.pos_grid
        if (h, w) == (g, g):
            return self.pos_embed
        # bilinear, corner-aligned-off; same convention as every other
        # resize in the package
        table = self.pos_embed.reshape(1, g, g, -1).permute(0, 3, 1, 2)
        table = F.interpolate(table, size=(h, w), mode="bilinear", align_corners=False)
        return table.flatten(2).transpose(1, 2)

    def embed(self, images: torch.Tensor) -> tuple[torch.Tensor, tuple[int, int]]:
        """Images [B,3,H,W] -> token sequence [B, prefix + h*w, D] with (h, w)."""
        b = images.shape[0]
        patches = self.patch_embed(images)
        h, w = patches.shape[-2:]
        tokens = patches.flatten(2).transpose(1, 2) + self._pos_for_grid(h, w)
        prefix = self.prefix_tokens.expand(b, -1, -1)
        return torch.cat([prefix, tokens], dim=1), (h, w)

    def run_blocks(self, tokens: torch.Tensor, collect: set[int]) -> dict[int, torch.Tensor]:
        """Run all blocks up to max(collect), returning tapped token tensors."""
        out = {}
        last = max(collect)
        for i, block in enumerate(self.blocks, start=1):
            tokens = block(tokens)
            if i in collect:
                out[i] = tokens
            if i == last:
                break
        return out


@dataclass
class BackboneHandle:
    """A loaded, frozen encoder plus its structural metadata.

    Weights never change after load; `call_count` is the only mutable
    field (feature-extraction instrumentation).
    """

    model: PatchTransformer
    block_count: int
    embed_dim: int
    patch_size: int
    weights_source: str
    frozen: bool = True
    call_count: int = field(default=0, compare=False)
    # Construction inputs, enough to rebuild an equivalent handle later
    # (checkpoints store this so `translate` needs no separate config).
    recipe: dict = field(default_factory=dict, compare=False)

    def describe(self) -> dict:
        g = self.model.geometry
        return {
            "weights_source": self.weights_source,
            "depth": g.depth,
            "embed_dim": g.embed_dim,
            "num_heads": g.num_heads,
            "patch_size": g.patch_size,
            "num_prefix_tokens": g.num_prefix_tokens,
        }

    def checksum(self) -> str:
        """SHA-256 over all parameters, in sorted name order."""
        digest = hashlib.sha256()
        for name, param in sorted(self.model.state_dict().items()):
            digest.update(name.encode())
            digest.update(param.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()


def weight_manifest(geometry: ViTGeometry = VIT_B16) -> dict[str, tuple[int, ...]]:
    """Expected tensor names and shapes for a weight file of this geometry."""
    module = PatchTransformer(geometry)
    return {name: tuple(t.shape) for name, t in module.state_dict().items()}


def _deterministic_init(module: PatchTransformer, seed: int) -> None:
    # One generator, parameters visited in sorted name order, so repeated
    # loads are bit-identical.
    gen = torch.Generator().manual_seed(seed)
    state = module.state_dict()
    for name in sorted(state):
        tensor = state[name]
        if name.endswith("bias") or "norm" in name:
            if name.endswith("weight"):
                tensor.fill_(1.0)
            else:
                tensor.zero_()
        else:
            tensor.normal_(mean=0.0, std=0.02, generator=gen)


def _freeze(module: nn.Module) -> None:
    for p in module.parameters():
        p.requires_grad_(False)
    module.eval()


def load_backbone(
    mode: str,
    weights_path: str | None = None,
    geometry: ViTGeometry | None = None,
    seed: int = 0,
) -> BackboneHandle:
    """Load a frozen encoder.

    mode="pretrained-file" reads a serialized state dict from
    `weights_path`, validating it tensor-by-tensor against the ViT-B/16
    manifest. mode="deterministic-standin" builds a randomly initialized
    encoder of `geometry` (default ViT-B/16 size) reproducible from `seed`.
    """
    if mode == MODE_PRETRAINED:
        if geometry is None:
            geometry = VIT_B16
        if geometry.depth != 12 or geometry.embed_dim != 768:
            raise ConfigError(
                "pretrained-file mode supports only the ViT-B/16 geometry "
                f"(12 blocks, 768-dim); got depth={geometry.depth}, dim={geometry.embed_dim}"
            )
        if weights_path is None:
            raise ConfigError("pretrained-file mode requires weights_path")
        module = PatchTransformer(geometry)
        try:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
        except (OSError, RuntimeError, ValueError) as exc:
            raise BackboneLoadError(f"cannot read weight file {weights_path}: {exc}") from exc
        if not isinstance(state, dict):
            raise BackboneLoadError(f"weight file {weights_path} does not hold a state dict")
        expected = module.state_dict()
        for name, ref in expected.items():
            if name not in state:
                raise BackboneLoadError(f"weight file missing tensor {name!r}")
            got = tuple(state[name].shape)
            if got != tuple(ref.shape):
                raise ConfigError(
                    f"tensor {name!r}: expected shape {tuple(ref.shape)}, got {got}"
                )
        extra = set(state) - set(expected)
        if extra:
            raise BackboneLoadError(f"weight file has unexpected tensor {sorted(extra)[0]!r}")
        module.load_state_dict(state)
    elif mode == MODE_STANDIN:
        if geometry is None:
            geometry = VIT_B16
        module = PatchTransformer(geometry)
        _deterministic_init(module, seed)
    else:
        raise ConfigError(f"unknown backbone mode {mode!r}")

    _freeze(module)
    return BackboneHandle(
        model=module,
        block_count=geometry.depth,
        embed_dim=geometry.embed_dim,
        patch_size=geometry.patch_size,
        weights_source=mode,
        recipe={
            "mode": mode,
            "weights_path": weights_path,
            "seed": seed,
            "geometry": dataclasses.asdict(geometry),
        },
    )


def backbone_from_recipe(recipe: dict) -> BackboneHandle:
    """Rebuild a handle from the recipe a checkpoint stored."""
    try:
        geometry = ViTGeometry(**recipe["geometry"])
        return load_backbone(
            recipe["mode"],
            weights_path=recipe.get("weights_path"),
            geometry=geometry,
            seed=int(recipe.get("seed", 0)),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed backbone recipe {recipe!r}: {exc}") from exc


def prepare_backbone_input(slices: torch.Tensor, patch_size: int = 16) -> torch.Tensor:
    """Adapt normalized one-channel slices for the pretrained encoder.

    The [-1, 1] intensity is remapped to [0, 1], replicated to three
    identical channels, then shifted by the encoder's published per-channel
    mean/std. H and W must be divisible by the patch size.
    """
    if slices.ndim != 4 or slices.shape[1] != 1:
        raise ShapeError(f"expected [B,1,H,W], got {tuple(slices.shape)}")
    h, w = slices.shape[-2:]
    if h % patch_size != 0 or w % patch_size != 0:
        raise ShapeError(f"spatial dims ({h},{w}) not divisible by patch size {patch_size}")
    unit = (slices + 1.0) * 0.5
    rgb = unit.expand(-1, 3, -1, -1)
    mean = torch.tensor(IMAGE_MEAN, dtype=slices.dtype, device=slices.device).view(1, 3, 1, 1)
    std = torch.tensor(IMAGE_STD, dtype=slices.dtype, device=slices.device).view(1, 3, 1, 1)
    return (rgb - mean) / std


def tokens_to_grid(tokens: torch.Tensor, grid: tuple[int, int], level: int = 1) -> FeatureGrid:
    """Reshape the trailing h*w patch tokens into a [B,C,h,w] grid.

    Any prefix (class/register) tokens are dropped; patch tokens are
    assumed row-major.
    """
    if tokens.ndim != 3:
        raise ShapeError(f"expected [B,T,C] tokens, got {tuple(tokens.shape)}")
    h, w = grid
    t = tokens.shape[1]
    if t < h * w:
        raise ShapeError(f"{t} tokens cannot fill a {h}x{w} grid")
    patch = tokens[:, t - h * w :, :]
    data = patch.transpose(1, 2).reshape(tokens.shape[0], tokens.shape[2], h, w)
    return FeatureGrid(data=data, level=level, source="dino")


def extract_features(
    handle: BackboneHandle, images: torch.Tensor, taps: TapSpec
) -> list[FeatureGrid]:
    """Run the frozen encoder and return one grid per tap.

    Output grids are [B, embed_dim, H/16, W/16], taken from the residual
    stream right after each tapped block (no final norm). The weights take
    no gradient, but the graph is kept so gradients reach `images`.
    """
    taps.validate_for(handle.block_count)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"expected [B,3,H,W], got {tuple(images.shape)}")
    handle.call_count += 1
    tokens, (h, w) = handle.model.embed(images)
    tapped = handle.model.run_blocks(tokens, set(taps.layers))
    return [
        tokens_to_grid(tapped[layer], (h, w), level=i + 1)
        for i, layer in enumerate(taps.layers)
    ]
