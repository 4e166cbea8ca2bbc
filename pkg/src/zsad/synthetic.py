"""Synthetic defect dataset: uniform gray squares with inserted bright blobs.

Used by smoke tests and examples to exercise the full pipeline without any
real benchmark data. Images are written in the mvtec layout (one category,
``test`` split) so manifest scanning is covered too.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .data import DatasetManifest, scan_dataset


def _render_image(rng: np.random.Generator, size: int, anomalous: bool) -> tuple[np.ndarray, np.ndarray]:
    background = rng.uniform(0.25, 0.45)
    image = np.full((size, size), background) + rng.normal(0, 0.02, (size, size))
    mask = np.zeros((size, size), dtype=np.uint8)
    if anomalous:
        for _ in range(rng.integers(1, 4)):
            cy, cx = rng.integers(4, size - 4, size=2)
            ry, rx = rng.integers(2, max(3, size // 6), size=2)
            yy, xx = np.ogrid[:size, :size]
            blob = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            image[blob] = rng.uniform(0.85, 0.95)
            mask |= blob.astype(np.uint8)
    image = np.clip(image, 0.0, 1.0)
    return (image * 255).astype(np.uint8), mask * 255


def make_synthetic_dataset(root: str | Path, n_images: int, image_size: int = 32,
                           seed: int = 0, category: str = "squares") -> DatasetManifest:
    """Write ``n_images`` (half normal, half anomalous) and return a manifest."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    good_dir = root / category / "test" / "good"
    bad_dir = root / category / "test" / "blob"
    gt_dir = root / category / "ground_truth" / "blob"
    for d in (good_dir, bad_dir, gt_dir):
        d.mkdir(parents=True, exist_ok=True)
    for index in range(n_images):
        anomalous = index % 2 == 1
        pixels, mask = _render_image(rng, image_size, anomalous)
        name = f"{index:04d}.png"
        if anomalous:
            Image.fromarray(pixels, mode="L").save(bad_dir / name)
            Image.fromarray(mask, mode="L").save(gt_dir / f"{index:04d}_mask.png")
        else:
            Image.fromarray(pixels, mode="L").save(good_dir / name)
    return scan_dataset(root, layout="mvtec")
