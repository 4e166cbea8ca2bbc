"""Scikit-learn style front end over the pipeline.

``fit`` optimizes the prompt bank on labeled images (anomalous ones need
masks), ``decision_function`` returns image anomaly scores in [0, 1],
``predict`` thresholds them, and ``transform`` yields full-resolution anomaly
maps, so the detector composes with sklearn pipelines and model selection.
"""

from __future__ import annotations

import dataclasses
import tempfile
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .config import PipelineConfig
from .data import PreprocessSpec, preprocess
from .errors import DataError
from .pipeline import Pipeline


def _as_image_tensor(x, cfg: PipelineConfig) -> torch.Tensor:
    """Accept a path, a PIL image, or an (H, W[, 3]) array in [0, 1] or [0, 255]."""
    mean, std = cfg.mean_std()
    spec = PreprocessSpec(resize=(cfg.image_size, cfg.image_size),
                          mean=tuple(mean), std=tuple(std))
    dtype = getattr(torch, cfg.dtype)
    if isinstance(x, (str, Path)):
        tensor, _ = preprocess(x, spec, dtype)
        return tensor
    array = check_array(np.asarray(x, dtype=np.float64), allow_nd=True, ensure_2d=False)
    if array.ndim == 2:
        array = np.stack([array] * 3, axis=-1)
    if array.ndim != 3 or array.shape[-1] != 3:
        raise DataError(f"expected (H, W) or (H, W, 3) image array, got {array.shape}")
    if array.max() > 1.5:
        array = array / 255.0
    from PIL import Image

    image = Image.fromarray((np.clip(array, 0, 1) * 255).astype(np.uint8))
    tensor, _ = preprocess(image, spec, dtype)
    return tensor


class ZeroShotAnomalyDetector(BaseEstimator):
    """Prompt-learned anomaly detector with frozen vision-language towers."""

    def __init__(self, image_size=518, patch_size=14, vision_layers=24, vision_width=1024,
                 vision_heads=16, joint_dim=768, text_layers=12, text_width=768,
                 k_layers=4, branches="e_attn,d_attn", self_correlations="qq,kk,vv",
                 epsilon=0.0, likelihood_scale=100.0, smooth_sigma=4.0, fusion=True,
                 context_guided=True, prompt_length=12, deep_tokens_per_layer=4,
                 tuned_layers=9, focal_gamma=2.0, lambda_local=1.0, learning_rate=0.001,
                 beta1=0.6, beta2=0.999, batch_size=8, epochs=5, max_steps=None, seed=111):
        self.image_size = image_size
        self.patch_size = patch_size
        self.vision_layers = vision_layers
        self.vision_width = vision_width
        self.vision_heads = vision_heads
        self.joint_dim = joint_dim
        self.text_layers = text_layers
        self.text_width = text_width
        self.k_layers = k_layers
        self.branches = branches
        self.self_correlations = self_correlations
        self.epsilon = epsilon
        self.likelihood_scale = likelihood_scale
        self.smooth_sigma = smooth_sigma
        self.fusion = fusion
        self.context_guided = context_guided
        self.prompt_length = prompt_length
        self.deep_tokens_per_layer = deep_tokens_per_layer
        self.tuned_layers = tuned_layers
        self.focal_gamma = focal_gamma
        self.lambda_local = lambda_local
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.seed = seed

    def _config(self) -> PipelineConfig:
        cfg = PipelineConfig()
        for f in dataclasses.fields(PipelineConfig):
            if hasattr(self, f.name):
                setattr(cfg, f.name, getattr(self, f.name))
        cfg.validate()
        return cfg

    def fit(self, X, y, masks=None):
        """Optimize prompt parameters on images ``X`` with labels ``y``.

        ``masks`` parallels ``X``; entries for anomalous images are (H, W)
        binary arrays, entries for normal images may be None.
        """
        cfg = self._config()
        y = np.asarray(y).ravel()
        if len(X) != y.size:
            raise DataError("X and y lengths differ")
        if cfg.deterministic:
            torch.use_deterministic_algorithms(True)
        torch.manual_seed(cfg.seed)
        pipeline = Pipeline.build(cfg)
        dtype = getattr(torch, cfg.dtype)
        items = []
        for i, x in enumerate(X):
            label = int(y[i])
            mask = None
            if label == 1:
                if masks is None or masks[i] is None:
                    raise DataError(f"sample {i}: anomalous image without a mask")
                mask = torch.as_tensor(np.asarray(masks[i], dtype=np.float32))
                mask = torch.nn.functional.interpolate(
                    mask.reshape(1, 1, *mask.shape), size=(cfg.image_size, cfg.image_size),
                    mode="nearest").reshape(cfg.image_size, cfg.image_size).to(dtype)
            items.append((_as_image_tensor(x, cfg), label, mask))

        optimizer = torch.optim.Adam(pipeline.bank.parameters(), lr=cfg.learning_rate,
                                     betas=(cfg.beta1, cfg.beta2))
        step = 0
        self.loss_trace_ = []
        for epoch in range(cfg.epochs):
            order = torch.randperm(len(items),
                                   generator=torch.Generator().manual_seed(cfg.seed + epoch))
            for start in range(0, len(items), cfg.batch_size):
                if self.max_steps is not None and step >= self.max_steps:
                    break
                batch = [items[i] for i in order[start:start + cfg.batch_size].tolist()]
                optimizer.zero_grad()
                loss = torch.stack([
                    pipeline.image_loss(img, lbl, msk) for img, lbl, msk in batch]).mean()
                loss.backward()
                optimizer.step()
                self.loss_trace_.append(float(loss.detach()))
                step += 1
        self.pipeline_ = pipeline
        self.n_steps_ = step
        return self

    def _require_fitted(self) -> Pipeline:
        if not hasattr(self, "pipeline_"):
            raise NotFittedError("call fit before scoring")
        return self.pipeline_

    def decision_function(self, X) -> np.ndarray:
        pipeline = self._require_fitted()
        cfg = pipeline.cfg
        return np.array([
            pipeline.infer(_as_image_tensor(x, cfg)).score for x in X])

    def predict(self, X, threshold: float = 0.5) -> np.ndarray:
        return (self.decision_function(X) > threshold).astype(int)

    def transform(self, X, out_hw: tuple[int, int] | None = None) -> list[np.ndarray]:
        """Full-resolution anomaly maps, one per input image."""
        pipeline = self._require_fitted()
        cfg = pipeline.cfg
        return [
            pipeline.infer(_as_image_tensor(x, cfg), out_hw=out_hw).map.numpy() for x in X]
