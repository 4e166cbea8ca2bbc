"""Frozen vision tower wrapper and the extended self-correlation attention branch.

The branch is a pure read-only side path: it consumes the frozen per-layer
query/key/value tensors of the last ``k_layers`` transformer blocks, replaces
the standard QK^T weighting with a sum of per-head softmax self-correlations,
and aggregates values through each layer's existing output projection. The
original forward pass (and therefore the global class token) is never touched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .config import PipelineConfig
from .errors import ConfigError, DataError


@dataclass(frozen=True)
class PatchGeometry:
    grid_h: int
    grid_w: int
    patch_px: int

    def __post_init__(self):
        if self.grid_h < 1 or self.grid_w < 1 or self.patch_px < 1:
            raise DataError(f"degenerate patch geometry {self}")

    @property
    def n_patches(self) -> int:
        return self.grid_h * self.grid_w


@dataclass
class LayerQKV:
    """Per-head Q/K/V of one block, for the patch positions only.

    Tensors are shaped (heads, N, head_dim). ``out_weight``/``out_bias`` are
    the frozen output projection of the same block's attention.
    """

    layer_index: int
    query: Tensor
    key: Tensor
    value: Tensor
    out_weight: Tensor
    out_bias: Tensor

    def __post_init__(self):
        if not (self.query.shape == self.key.shape == self.value.shape):
            raise ConfigError(
                f"layer {self.layer_index}: q/k/v shapes differ "
                f"({tuple(self.query.shape)}, {tuple(self.key.shape)}, {tuple(self.value.shape)})"
            )
        if self.query.ndim != 3:
            raise ConfigError(f"layer {self.layer_index}: expected (heads, N, head_dim) tensors")

    @property
    def n_heads(self) -> int:
        return self.query.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.query.shape[1]


@dataclass
class VisionFeatures:
    """Per-image feature bundle in the joint embedding space."""

    global_token: Tensor  # (joint_dim,)
    layer_qkv: list[LayerQKV]
    e_attn_map: Tensor  # (N, joint_dim)
    final_values: Tensor  # (heads, N, head_dim) of the last block, for d_attn
    final_out_weight: Tensor
    final_out_bias: Tensor
    geometry: PatchGeometry


def self_correlation(embeddings: Tensor, context: str = "input") -> Tensor:
    """Row-stochastic softmax(E E^T / sqrt(D)) over a set of embeddings.

    ``embeddings`` is (N, D); rows of the result sum to one and are strictly
    positive. Non-finite inputs are rejected with a diagnostic naming the
    offending source.
    """
    if embeddings.ndim != 2 or embeddings.shape[0] < 1 or embeddings.shape[1] < 1:
        raise DataError(f"{context}: expected a nonempty (N, D) embedding set")
    if not torch.isfinite(embeddings).all():
        raise DataError(f"{context}: non-finite entries in embedding set")
    dim = embeddings.shape[1]
    logits = embeddings @ embeddings.transpose(0, 1) / math.sqrt(dim)
    return torch.softmax(logits, dim=-1)


def e_attn_layer(qkv: LayerQKV, subset: tuple[str, ...] = ("qq", "kk", "vv")) -> Tensor:
    """Self-correlation attention output of one block: (sum of A(E)) V, per head.

    The per-head outputs are concatenated and passed through the block's
    frozen output projection. With the full subset each combined weight
    row sums to 3.
    """
    if not subset:
        raise ConfigError("self-correlation subset must be nonempty")
    sources = {"qq": qkv.query, "kk": qkv.key, "vv": qkv.value}
    per_head = []
    for h in range(qkv.n_heads):
        weights = None
        for name in subset:
            if name not in sources:
                raise ConfigError(f"unknown self-correlation source {name!r}")
            a = self_correlation(sources[name][h], context=f"layer {qkv.layer_index} head {h} {name}")
            weights = a if weights is None else weights + a
        per_head.append(weights @ qkv.value[h])
    merged = torch.cat(per_head, dim=-1)  # (N, heads * head_dim)
    return merged @ qkv.out_weight.transpose(0, 1) + qkv.out_bias


def e_attn_weights(qkv: LayerQKV, subset: tuple[str, ...] = ("qq", "kk", "vv")) -> Tensor:
    """Combined (heads, N, N) weight matrices, exposed for invariant checks."""
    sources = {"qq": qkv.query, "kk": qkv.key, "vv": qkv.value}
    out = []
    for h in range(qkv.n_heads):
        acc = None
        for name in subset:
            a = self_correlation(sources[name][h], context=f"layer {qkv.layer_index} head {h} {name}")
            acc = a if acc is None else acc + a
        out.append(acc)
    return torch.stack(out)


class TransformerBlock(nn.Module):
    """Pre-norm transformer block that exposes its Q/K/V tensors."""

    def __init__(self, width: int, heads: int):
        super().__init__()
        if width % heads != 0:
            raise ConfigError(f"width {width} not divisible by head count {heads}")
        self.heads = heads
        self.head_dim = width // heads
        self.ln1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)
        self.ln2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 4 * width), nn.GELU(), nn.Linear(4 * width, width))

    def qkv_heads(self, hidden: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        n, width = hidden.shape
        q, k, v = self.qkv(self.ln1(hidden)).chunk(3, dim=-1)
        shape = (n, self.heads, self.head_dim)
        return tuple(t.reshape(shape).permute(1, 0, 2) for t in (q, k, v))

    def forward(self, hidden: Tensor, causal: bool = False) -> Tensor:
        q, k, v = self.qkv_heads(hidden)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if causal:
            n = hidden.shape[0]
            mask = torch.full((n, n), float("-inf"), dtype=hidden.dtype, device=hidden.device).triu(1)
            logits = logits + mask
        attn = torch.softmax(logits, dim=-1) @ v  # (heads, N, head_dim)
        attn = attn.permute(1, 0, 2).reshape(hidden.shape)
        hidden = hidden + self.out(attn)
        return hidden + self.mlp(self.ln2(hidden))


class VisionTower(nn.Module):
    """Minimal ViT-style contrastive vision tower with a joint-space projection.

    Used directly as the randomly initialized stand-in backbone; real
    pretrained weights can be loaded through ``backbone_weights``.
    """

    def __init__(self, image_size: int, patch_size: int, layers: int, width: int,
                 heads: int, joint_dim: int):
        super().__init__()
        if image_size % patch_size != 0:
            raise ConfigError(f"image_size {image_size} not divisible by patch_size {patch_size}")
        self.image_size = image_size
        self.patch_size = patch_size
        grid = image_size // patch_size
        self.geometry = PatchGeometry(grid, grid, patch_size)
        self.patch_embed = nn.Conv2d(3, width, kernel_size=patch_size, stride=patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, width))
        self.pos_embed = nn.Parameter(torch.zeros(self.geometry.n_patches + 1, width))
        nn.init.normal_(self.cls_token, std=0.02)
        nn.init.normal_(self.pos_embed, std=0.02)
        self.blocks = nn.ModuleList(TransformerBlock(width, heads) for _ in range(layers))
        self.ln_post = nn.LayerNorm(width)
        self.proj = nn.Parameter(torch.empty(width, joint_dim))
        nn.init.normal_(self.proj, std=width ** -0.5)

    @property
    def n_layers(self) -> int:
        return len(self.blocks)

    def embed(self, image: Tensor) -> Tensor:
        if image.ndim != 3 or image.shape[0] != 3:
            raise DataError(f"expected (3, H, W) image tensor, got {tuple(image.shape)}")
        if image.shape[1] != self.image_size or image.shape[2] != self.image_size:
            raise DataError(
                f"image resolution {tuple(image.shape[1:])} does not match the "
                f"configured {self.image_size}x{self.image_size}"
            )
        patches = self.patch_embed(image.unsqueeze(0)).flatten(2).squeeze(0).transpose(0, 1)
        hidden = torch.cat([self.cls_token, patches], dim=0)
        return hidden + self.pos_embed

    def project(self, tokens: Tensor) -> Tensor:
        return self.ln_post(tokens) @ self.proj


def extract_features(tower: VisionTower, image: Tensor, k_layers: int,
                     subset: tuple[str, ...] = ("qq", "kk", "vv")) -> VisionFeatures:
    """Run the frozen forward pass and the read-only self-correlation branch.

    The branch output is the sum of per-layer attention outputs over the last
    ``k_layers`` blocks, then mapped through the tower's final normalization
    and joint-space projection. Patch positions only; the class token path is
    untouched.
    """
    if not (1 <= k_layers <= tower.n_layers):
        raise ConfigError(f"k_layers must lie in [1, {tower.n_layers}], got {k_layers}")
    with torch.no_grad():
        hidden = tower.embed(image)
        layer_qkv: list[LayerQKV] = []
        branch_sum = None
        first_branch_layer = tower.n_layers - k_layers + 1
        for index, block in enumerate(tower.blocks, start=1):
            q, k, v = block.qkv_heads(hidden)
            if index >= first_branch_layer:
                qkv = LayerQKV(
                    layer_index=index,
                    query=q[:, 1:, :],
                    key=k[:, 1:, :],
                    value=v[:, 1:, :],
                    out_weight=block.out.weight,
                    out_bias=block.out.bias,
                )
                layer_qkv.append(qkv)
                out = e_attn_layer(qkv, subset)
                branch_sum = out if branch_sum is None else branch_sum + out
            hidden = block(hidden)
        final = layer_qkv[-1]
        return VisionFeatures(
            global_token=tower.project(hidden[0]),
            layer_qkv=layer_qkv,
            e_attn_map=tower.project(branch_sum),
            final_values=final.value,
            final_out_weight=final.out_weight,
            final_out_bias=final.out_bias,
            geometry=tower.geometry,
        )


def build_vision_tower(cfg: PipelineConfig) -> VisionTower:
    """Build (and freeze) the vision tower named by the config."""
    if cfg.backbone != "toy":
        raise ConfigError(
            f"unknown backbone {cfg.backbone!r}; 'toy' is built in, pretrained towers "
            "are loaded through the reproduction script"
        )
    generator_state = torch.random.get_rng_state()
    torch.manual_seed(cfg.seed)
    tower = VisionTower(
        image_size=cfg.image_size,
        patch_size=cfg.patch_size,
        layers=cfg.vision_layers,
        width=cfg.vision_width,
        heads=cfg.vision_heads,
        joint_dim=cfg.joint_dim,
    )
    torch.random.set_rng_state(generator_state)
    if cfg.backbone_weights:
        state = torch.load(cfg.backbone_weights, map_location="cpu", weights_only=True)
        tower.load_state_dict(state)
    dtype = getattr(torch, cfg.dtype)
    tower.to(dtype)
    tower.eval()
    for p in tower.parameters():
        p.requires_grad_(False)
    return tower
