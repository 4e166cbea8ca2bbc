"""Flat key-value configuration shared by the CLI, trainer, and pipeline.

Every tunable default in the package is a field here, so any of them can be
overridden either from a config file (``key = value`` lines) or from the CLI
(``--set key=value``). Defaults follow the reference training protocol:
518x518 inputs, ViT-L/14-shaped towers, lr 0.001, betas (0.6, 0.999),
batch size 8, seed 111.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError


@dataclass
class PipelineConfig:
    # Backbone (frozen contrastive vision-language towers)
    backbone: str = "toy"
    backbone_weights: str = ""
    image_size: int = 518
    patch_size: int = 14
    vision_layers: int = 24
    vision_width: int = 1024
    vision_heads: int = 16
    joint_dim: int = 768
    text_layers: int = 12
    text_width: int = 768
    text_heads: int = 8
    context_len: int = 77
    image_mean: str = "0.48145466,0.4578275,0.40821073"
    image_std: str = "0.26862954,0.26130258,0.27577711"
    dtype: str = "float32"

    # Self-correlation attention branch
    k_layers: int = 4
    self_correlations: str = "qq,kk,vv"

    # Externally guided spatial attention branch
    spatial_encoder: str = "toy"
    spatial_weights: str = ""
    spatial_width: int = 768
    spatial_layers: int = 2
    spatial_heads: int = 4
    epsilon: float = 0.0
    d_attn_temperature: float = 1.0
    allow_grid_resize: bool = True

    # Prompt bank
    prompt_length: int = 12
    deep_tokens_per_layer: int = 4
    tuned_layers: int = 9
    context_guided: bool = True

    # Scoring and fusion
    likelihood_scale: float = 100.0
    smooth_sigma: float = 4.0
    branches: str = "e_attn,d_attn"
    fusion: bool = True
    global_loss_on_fused: bool = False

    # Losses
    focal_gamma: float = 2.0
    lambda_local: float = 1.0
    dice_mode: str = "anomaly"
    dice_smooth: float = 1.0

    # Optimization
    learning_rate: float = 0.001
    beta1: float = 0.6
    beta2: float = 0.999
    batch_size: int = 8
    epochs: int = 5
    seed: int = 111
    deterministic: bool = True

    # Metrics
    aupro_fpr_limit: float = 0.3
    aupro_connectivity: int = 8
    aupro_max_thresholds: int = 0  # 0 = exact sweep over all distinct scores
    pixel_pooling: str = "category"

    # Execution
    workers: int = 1

    def enabled_branches(self) -> list[str]:
        names = [b.strip() for b in self.branches.split(",") if b.strip()]
        for b in names:
            if b not in ("e_attn", "d_attn"):
                raise ConfigError(f"unknown branch {b!r}; expected e_attn or d_attn")
        if not names:
            raise ConfigError("at least one branch must be enabled")
        return names

    def self_correlation_subset(self) -> list[str]:
        names = [s.strip() for s in self.self_correlations.split(",") if s.strip()]
        for s in names:
            if s not in ("qq", "kk", "vv"):
                raise ConfigError(f"unknown self-correlation {s!r}; expected qq, kk or vv")
        if not names:
            raise ConfigError("self_correlations must be a nonempty subset of {qq,kk,vv}")
        return names

    def mean_std(self) -> tuple[list[float], list[float]]:
        mean = [float(v) for v in self.image_mean.split(",")]
        std = [float(v) for v in self.image_std.split(",")]
        if len(mean) != 3 or len(std) != 3:
            raise ConfigError("image_mean and image_std must have three components")
        return mean, std

    def validate(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if not (1 <= self.k_layers <= self.vision_layers):
            raise ConfigError(f"k_layers must lie in [1, {self.vision_layers}]")
        if self.epsilon > 1:
            raise ConfigError("epsilon > 1 would mask every row completely")
        if self.d_attn_temperature <= 0:
            raise ConfigError("d_attn_temperature must be positive")
        if self.smooth_sigma <= 0:
            raise ConfigError("smooth_sigma must be positive")
        if self.likelihood_scale <= 0:
            raise ConfigError("likelihood_scale must be positive")
        if self.tuned_layers + 1 > self.text_layers:
            raise ConfigError(
                f"tuned_layers={self.tuned_layers} needs a text tower with at least "
                f"{self.tuned_layers + 1} layers (got {self.text_layers})"
            )
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be >= 0")
        if self.lambda_local < 0:
            raise ConfigError("lambda_local must be >= 0")
        if self.dice_mode not in ("anomaly", "both"):
            raise ConfigError("dice_mode must be 'anomaly' or 'both'")
        if not (0 < self.aupro_fpr_limit <= 1):
            raise ConfigError("aupro_fpr_limit must lie in (0, 1]")
        if self.aupro_connectivity not in (4, 8):
            raise ConfigError("aupro_connectivity must be 4 or 8")
        if self.pixel_pooling not in ("category", "image"):
            raise ConfigError("pixel_pooling must be 'category' or 'image'")
        self.enabled_branches()
        self.self_correlation_subset()
        self.mean_std()


def config_keys() -> dict[str, object]:
    """All configurable keys and their defaults, for docs and registry tests."""
    return {f.name: f.default for f in fields(PipelineConfig)}


def _coerce(name: str, raw: str, target_type: type) -> object:
    raw = raw.strip()
    if target_type is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"config key {name}: expected boolean, got {raw!r}")
    try:
        return target_type(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {name}: {exc}") from None


def apply_overrides(cfg: PipelineConfig, overrides: dict[str, str]) -> PipelineConfig:
    """Return a copy of ``cfg`` with string overrides coerced and applied."""
    types = {f.name: type(f.default) for f in fields(PipelineConfig)}
    updates = {}
    for key, raw in overrides.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = _coerce(key, raw, types[key])
    return dataclasses.replace(cfg, **updates)


def load_config(path: str | Path, base: PipelineConfig | None = None) -> PipelineConfig:
    """Parse a flat ``key = value`` config file on top of ``base`` (or defaults)."""
    cfg = base or PipelineConfig()
    overrides: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        overrides[key.strip()] = value.strip()
    return apply_overrides(cfg, overrides)


def config_to_dict(cfg: PipelineConfig) -> dict[str, object]:
    return dataclasses.asdict(cfg)
