"""End-to-end model bundle: frozen towers, prompt bank, scoring paths."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

from .backbone import VisionFeatures, VisionTower, build_vision_tower, extract_features
from .config import PipelineConfig
from .errors import DataError
from .losses import global_loss, local_loss
from .prompts import PromptBank, TextPair, TextTower, build_text_tower, encode_pair, init_params
from .scoring import (
    AnomalyResult,
    BranchMaps,
    anomaly_likelihood,
    local_to_global_fuse,
    patch_score_map,
    render_anomaly_map,
    upsample_bilinear,
)
from .spatial import (
    SpatialEncoder,
    align_spatial_grid,
    build_spatial_encoder,
    d_attn_output,
    guided_attention_weights,
)


@dataclass
class Pipeline:
    cfg: PipelineConfig
    vision: VisionTower
    text: TextTower
    bank: PromptBank
    spatial: SpatialEncoder | None

    @classmethod
    def build(cls, cfg: PipelineConfig, bank: PromptBank | None = None) -> "Pipeline":
        cfg.validate()
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)
        branches = cfg.enabled_branches()
        return cls(
            cfg=cfg,
            vision=build_vision_tower(cfg),
            text=build_text_tower(cfg),
            bank=bank if bank is not None else init_params(cfg),
            spatial=build_spatial_encoder(cfg) if "d_attn" in branches else None,
        )

    # ---- feature extraction -------------------------------------------------

    def vision_features(self, image: Tensor) -> VisionFeatures:
        return extract_features(
            self.vision, image, self.cfg.k_layers, tuple(self.cfg.self_correlation_subset()))

    def branch_features(self, image: Tensor, feats: VisionFeatures) -> dict[str, Tensor]:
        """Joint-space (N, D) patch feature maps keyed by enabled branch."""
        out: dict[str, Tensor] = {}
        for branch in self.cfg.enabled_branches():
            if branch == "e_attn":
                out[branch] = feats.e_attn_map
            else:
                spatial = self.spatial(image)
                spatial = align_spatial_grid(spatial, feats.geometry, self.cfg.allow_grid_resize)
                weights = guided_attention_weights(
                    spatial, self.cfg.epsilon, self.cfg.d_attn_temperature)
                raw = d_attn_output(weights, feats.final_values,
                                    feats.final_out_weight, feats.final_out_bias)
                out[branch] = self.vision.project(raw)
        return out

    def text_pair(self, g_i: Tensor, image_id: str = "") -> TextPair:
        return encode_pair(self.bank, self.text, g_i, image_id, self.cfg.context_guided)

    # ---- training path -------------------------------------------------------

    def image_loss(self, image: Tensor, label: int, mask: Tensor | None) -> Tensor:
        """Assemble the full training loss for one image.

        Anomalous images require a mask; normal images use an all-zero mask at
        the preprocessed resolution.
        """
        cfg = self.cfg
        feats = self.vision_features(image)
        branch_maps = self.branch_features(image, feats)
        pair = self.text_pair(feats.global_token)

        if label == 1 and mask is None:
            raise DataError("anomalous training image without a mask")
        if mask is None:
            mask = torch.zeros(image.shape[1:], dtype=image.dtype)
        mask = mask.to(image.dtype)

        if cfg.global_loss_on_fused and cfg.fusion:
            g_for_global = local_to_global_fuse(
                list(branch_maps.values()), pair, feats.global_token, cfg.likelihood_scale)
        else:
            g_for_global = feats.global_token
        loss_global = global_loss(label, anomaly_likelihood(g_for_global, pair, cfg.likelihood_scale))

        geometry = feats.geometry
        local_terms = []
        for features in branch_maps.values():
            p_a = anomaly_likelihood(features, pair, cfg.likelihood_scale)
            grid = torch.stack([1 - p_a, p_a]).reshape(2, geometry.grid_h, geometry.grid_w)
            up = torch.nn.functional.interpolate(
                grid.unsqueeze(0), size=mask.shape, mode="bilinear", align_corners=False
            ).squeeze(0)
            local_terms.append(local_loss(up, mask, cfg.focal_gamma, cfg.dice_smooth, cfg.dice_mode))

        loss = loss_global
        for term in local_terms:
            loss = loss + cfg.lambda_local * term
        return loss

    # ---- inference path ------------------------------------------------------

    def infer(self, image: Tensor, out_hw: tuple[int, int] | None = None,
              smooth: bool = True, image_id: str = "") -> AnomalyResult:
        """Score one preprocessed image; maps are rendered at ``out_hw``."""
        cfg = self.cfg
        with torch.no_grad():
            feats = self.vision_features(image)
            branch_feats = self.branch_features(image, feats)
            pair = self.text_pair(feats.global_token, image_id)
            geometry = feats.geometry

            maps = {
                name: patch_score_map(features, pair, geometry, cfg.likelihood_scale)
                for name, features in branch_feats.items()
            }
            branch_maps = BranchMaps(maps=maps, geometry=geometry)

            if cfg.fusion:
                fused = local_to_global_fuse(
                    list(branch_feats.values()), pair, feats.global_token, cfg.likelihood_scale)
            else:
                fused = feats.global_token
            score = float(anomaly_likelihood(fused, pair, cfg.likelihood_scale))

            out_h, out_w = out_hw if out_hw is not None else (image.shape[1], image.shape[2])
            rendered = render_anomaly_map(branch_maps, out_h, out_w, cfg.smooth_sigma, smooth)
        return AnomalyResult(score=score, map=rendered, branch_maps=branch_maps, fused_global=fused)

    # ---- bookkeeping ---------------------------------------------------------

    def frozen_checksum(self) -> str:
        """Checksum over every tensor outside the prompt bank."""
        import hashlib

        digest = hashlib.sha256()
        for module in (self.vision, self.text, self.spatial):
            if module is None:
                continue
            for name, tensor in sorted(module.state_dict().items()):
                digest.update(name.encode())
                digest.update(tensor.detach().cpu().numpy().tobytes())
        return digest.hexdigest()
