"""Anomaly likelihoods, score maps, local-to-global fusion and map rendering."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor

from .backbone import PatchGeometry
from .errors import ConfigError, DataError
from .prompts import TextPair

log = logging.getLogger(__name__)

FUSE_DENOM_GUARD = 1e-12


@dataclass
class BranchMaps:
    """Low-resolution per-branch anomaly score maps on the patch grid."""

    maps: dict[str, Tensor]  # branch name -> (grid_h, grid_w) in [0, 1]
    geometry: PatchGeometry


@dataclass
class AnomalyResult:
    score: float
    map: Tensor  # (H, W) in [0, 1] at the evaluation resolution
    branch_maps: BranchMaps
    fused_global: Tensor


def _unit(v: Tensor, name: str) -> Tensor:
    norm = v.norm(dim=-1, keepdim=True)
    if (norm == 0).any():
        raise DataError(f"{name}: zero-norm embedding cannot be scored")
    return v / norm


def anomaly_likelihood(e: Tensor, pair: TextPair, scale: float = 100.0) -> Tensor:
    """Probability of the abnormal state: softmax over scaled cosine similarities.

    ``e`` may be a single (D,) embedding or an (N, D) batch. All embeddings
    are L2-normalized internally; ``scale`` multiplies both cosine logits, so
    p_a + p_n = 1 holds exactly.
    """
    if scale <= 0:
        raise ConfigError("likelihood scale must be positive")
    e = _unit(e, "visual embedding")
    g_a = _unit(pair.g_a, "abnormal text embedding")
    g_n = _unit(pair.g_n, "normal text embedding")
    logits = torch.stack([(e * g_a).sum(-1), (e * g_n).sum(-1)], dim=-1) * scale
    return torch.softmax(logits, dim=-1)[..., 0]


def patch_score_map(feature_map: Tensor, pair: TextPair, geometry: PatchGeometry,
                    scale: float = 100.0) -> Tensor:
    """Per-patch anomaly likelihood reshaped to the patch grid."""
    if feature_map.ndim != 2 or feature_map.shape[0] != geometry.n_patches:
        raise DataError(
            f"feature map {tuple(feature_map.shape)} does not match geometry "
            f"{geometry.grid_h}x{geometry.grid_w}"
        )
    try:
        scores = anomaly_likelihood(feature_map, pair, scale)
    except DataError as exc:
        bad = (feature_map.norm(dim=-1) == 0).nonzero().flatten().tolist()
        raise DataError(f"{exc} (patch indices {bad})") from None
    return scores.reshape(geometry.grid_h, geometry.grid_w)


def local_to_global_fuse(branch_features: list[Tensor], pair: TextPair, g_i: Tensor,
                         scale: float = 100.0) -> Tensor:
    """Score-weighted patch pooling per branch, averaged and blended into g_i.

    Each branch contributes a weighted mean of its patch embeddings with
    anomaly likelihoods as weights; branch vectors are averaged and the result
    is mixed half-and-half with the global token.
    """
    if not branch_features:
        raise DataError("at least one branch feature map is required for fusion")
    pooled = []
    for features in branch_features:
        weights = anomaly_likelihood(features, pair, scale)
        denom = weights.sum()
        if denom <= FUSE_DENOM_GUARD:
            log.warning("all patch scores numerically zero; falling back to unweighted mean")
            pooled.append(features.mean(dim=0))
        else:
            pooled.append((weights.unsqueeze(-1) * features).sum(dim=0) / denom)
    fused_local = torch.stack(pooled).mean(dim=0)
    return (g_i + fused_local) / 2


def gaussian_kernel1d(sigma: float, dtype: torch.dtype) -> Tensor:
    radius = math.ceil(3 * sigma)
    x = torch.arange(-radius, radius + 1, dtype=dtype)
    kernel = torch.exp(-0.5 * (x / sigma) ** 2)
    return kernel / kernel.sum()


def gaussian_smooth(image: Tensor, sigma: float) -> Tensor:
    """Separable Gaussian blur with reflect padding; preserves constants."""
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    kernel = gaussian_kernel1d(sigma, image.dtype)
    radius = (kernel.numel() - 1) // 2
    x = image.unsqueeze(0).unsqueeze(0)
    x = F.pad(x, (radius, radius, 0, 0), mode="reflect")
    x = F.conv2d(x, kernel.reshape(1, 1, 1, -1))
    x = F.pad(x, (0, 0, radius, radius), mode="reflect")
    x = F.conv2d(x, kernel.reshape(1, 1, -1, 1))
    return x.squeeze(0).squeeze(0)


def upsample_bilinear(grid: Tensor, out_h: int, out_w: int) -> Tensor:
    return F.interpolate(grid.unsqueeze(0).unsqueeze(0), size=(out_h, out_w),
                         mode="bilinear", align_corners=False).squeeze(0).squeeze(0)


def render_anomaly_map(branch_maps: BranchMaps, out_h: int, out_w: int,
                       sigma: float = 4.0, smooth: bool = True) -> Tensor:
    """Average enabled branch maps, bilinear-upsample, then Gaussian-smooth.

    All steps are convex with normalized kernels, so the output stays in
    [0, 1] whenever the inputs do.
    """
    if not branch_maps.maps:
        raise DataError("no branch maps to render")
    grids = list(branch_maps.maps.values())
    shape = (branch_maps.geometry.grid_h, branch_maps.geometry.grid_w)
    for grid in grids:
        if tuple(grid.shape) != shape:
            raise DataError(f"branch map shape {tuple(grid.shape)} does not match geometry {shape}")
    averaged = torch.stack(grids).mean(dim=0)
    rendered = upsample_bilinear(averaged, out_h, out_w)
    if smooth:
        rendered = gaussian_smooth(rendered, sigma)
    return rendered.clamp(0.0, 1.0)
