"""Externally guided spatial attention (d_attn branch).

Patch features from a frozen self-supervised encoder provide cosine-similarity
attention weights: similarities below a threshold are masked to -inf before a
row softmax, and the resulting weights aggregate the backbone's final-layer
values. The branch is purely additive; disabling it leaves the
self-correlation branch untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .backbone import PatchGeometry, TransformerBlock, VisionFeatures
from .config import PipelineConfig
from .errors import ConfigError, DataError


@dataclass
class SpatialFeatures:
    patches: Tensor  # (N, D')
    geometry: PatchGeometry

    def __post_init__(self):
        if self.patches.ndim != 2 or self.patches.shape[0] != self.geometry.n_patches:
            raise DataError(
                f"spatial patches {tuple(self.patches.shape)} do not match geometry {self.geometry}"
            )
        if not torch.isfinite(self.patches).all():
            raise DataError("spatial encoder produced non-finite patch features")


@dataclass
class GuidedWeights:
    weights: Tensor  # (N, N), row-stochastic, masked pairs exactly zero
    epsilon: float


def guided_attention_weights(spatial: SpatialFeatures, epsilon: float,
                             temperature: float = 1.0) -> GuidedWeights:
    """Masked softmax over cosine similarities of normalized patch features.

    epsilon <= 1 guarantees every row keeps at least its diagonal entry, so
    the rows remain probability distributions.
    """
    if epsilon > 1:
        raise ConfigError("epsilon > 1 would mask every row completely")
    if temperature <= 0:
        raise ConfigError("d_attn temperature must be positive")
    z = F.normalize(spatial.patches, dim=-1)
    sims = z @ z.transpose(0, 1)
    mask = torch.where(sims >= epsilon, torch.zeros_like(sims),
                       torch.full_like(sims, float("-inf")))
    # The diagonal cosine is 1.0 in exact arithmetic but can round just below
    # epsilon = 1.0 in floats; keep it unconditionally so rows stay stochastic.
    mask.fill_diagonal_(0.0)
    weights = torch.softmax(sims / temperature + mask, dim=-1)
    return GuidedWeights(weights=weights, epsilon=epsilon)


def d_attn_output(weights: GuidedWeights, final_values: Tensor,
                  out_weight: Tensor, out_bias: Tensor) -> Tensor:
    """Aggregate final-layer values with guided weights and merge heads.

    ``final_values`` is (heads, N, head_dim); the same (N, N) weight matrix is
    applied to every head, then the block's frozen output projection merges
    the heads. Joint-space projection is the caller's responsibility (it owns
    the tower).
    """
    if final_values.ndim != 3:
        raise DataError("expected (heads, N, head_dim) value tensor")
    n = final_values.shape[1]
    if weights.weights.shape != (n, n):
        raise DataError(
            f"guided weights {tuple(weights.weights.shape)} do not match value count {n}"
        )
    aggregated = weights.weights.unsqueeze(0) @ final_values  # (heads, N, head_dim)
    merged = aggregated.permute(1, 0, 2).reshape(n, -1)
    return merged @ out_weight.transpose(0, 1) + out_bias


class SpatialEncoder(nn.Module):
    """Minimal frozen ViT-style patch feature extractor (no class token)."""

    def __init__(self, image_size: int, patch_size: int, layers: int, width: int, heads: int):
        super().__init__()
        if image_size % patch_size != 0:
            raise ConfigError(f"image_size {image_size} not divisible by patch_size {patch_size}")
        grid = image_size // patch_size
        self.geometry = PatchGeometry(grid, grid, patch_size)
        self.patch_embed = nn.Conv2d(3, width, kernel_size=patch_size, stride=patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(self.geometry.n_patches, width))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(TransformerBlock(width, heads) for _ in range(layers))

    def forward(self, image: Tensor) -> SpatialFeatures:
        with torch.no_grad():
            hidden = self.patch_embed(image.unsqueeze(0)).flatten(2).squeeze(0).transpose(0, 1)
            hidden = hidden + self.pos_embed
            for block in self.blocks:
                hidden = block(hidden)
        return SpatialFeatures(patches=hidden, geometry=self.geometry)


def align_spatial_grid(spatial: SpatialFeatures, target: PatchGeometry,
                       allow_resize: bool) -> SpatialFeatures:
    """Match the external encoder's patch grid to the backbone's.

    Identical grids pass through; with ``allow_resize`` a mismatched grid is
    bilinearly interpolated to the target, otherwise both geometries are
    reported in the rejection.
    """
    src = spatial.geometry
    if (src.grid_h, src.grid_w) == (target.grid_h, target.grid_w):
        return spatial
    if not allow_resize:
        raise DataError(
            f"spatial encoder grid {src.grid_h}x{src.grid_w} does not match "
            f"backbone grid {target.grid_h}x{target.grid_w}"
        )
    grid = spatial.patches.reshape(src.grid_h, src.grid_w, -1).permute(2, 0, 1).unsqueeze(0)
    resized = F.interpolate(grid, size=(target.grid_h, target.grid_w),
                            mode="bilinear", align_corners=False)
    patches = resized.squeeze(0).permute(1, 2, 0).reshape(target.n_patches, -1)
    return SpatialFeatures(patches=patches, geometry=target)


def build_spatial_encoder(cfg: PipelineConfig) -> SpatialEncoder:
    if cfg.spatial_encoder != "toy":
        raise ConfigError(
            f"unknown spatial encoder {cfg.spatial_encoder!r}; 'toy' is built in, "
            "pretrained encoders are loaded through the reproduction script"
        )
    state = torch.random.get_rng_state()
    torch.manual_seed(cfg.seed + 1)
    encoder = SpatialEncoder(
        image_size=cfg.image_size,
        patch_size=cfg.patch_size,
        layers=cfg.spatial_layers,
        width=cfg.spatial_width,
        heads=cfg.spatial_heads,
    )
    torch.random.set_rng_state(state)
    if cfg.spatial_weights:
        encoder.load_state_dict(
            torch.load(cfg.spatial_weights, map_location="cpu", weights_only=True))
    encoder.to(getattr(torch, cfg.dtype))
    encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)
    return encoder
