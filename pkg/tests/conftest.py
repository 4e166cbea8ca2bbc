import pytest
import torch

from zsad.config import PipelineConfig
from zsad.pipeline import Pipeline


def tiny_config(**overrides) -> PipelineConfig:
    """A 2-layer, width-16, 4px-patch stand-in configuration for fast tests."""
    base = dict(
        image_size=32, patch_size=4, vision_layers=2, vision_width=16, vision_heads=2,
        joint_dim=16, text_layers=2, text_width=16, text_heads=2, context_len=32,
        spatial_layers=2, spatial_width=16, spatial_heads=2,
        k_layers=2, tuned_layers=1, prompt_length=4, deep_tokens_per_layer=2,
        branches="e_attn", image_mean="0.5,0.5,0.5", image_std="0.25,0.25,0.25",
        smooth_sigma=2.0, seed=111,
    )
    base.update(overrides)
    return PipelineConfig(**base)


@pytest.fixture
def tiny_cfg() -> PipelineConfig:
    return tiny_config()


@pytest.fixture(scope="session")
def tiny_pipeline() -> Pipeline:
    return Pipeline.build(tiny_config())


@pytest.fixture(autouse=True)
def _seeded():
    torch.manual_seed(0)
