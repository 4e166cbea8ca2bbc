"""Dataset manifests, preprocessing, and result/overlay export.

Two directory layouts are supported:

* ``mvtec``: ``root/<category>/<split>/<defect>/img.png`` with masks under
  ``root/<category>/ground_truth/<defect>/img_mask.png``; the ``good`` defect
  directory holds normal images.
* ``flat-with-masks``: ``root/good/*.png``, ``root/bad/*.png`` and
  ``root/masks/<bad stem>*.png``; everything lands in the ``test`` split as a
  single category named after the root directory.

Manifests are line-delimited JSON records, one entry per line after a header.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DataError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

MANIFEST_VERSION = 1


@dataclass
class ManifestEntry:
    image_path: str
    category: str
    split: str
    label: int
    mask_path: str | None = None
    flagged: str | None = None  # validation note, e.g. anomalous without mask


@dataclass
class DatasetManifest:
    dataset_name: str
    entries: list[ManifestEntry] = field(default_factory=list)

    @property
    def localization_only(self) -> bool:
        """True when no normal images exist, disabling image-level metrics."""
        return all(e.label == 1 for e in self.entries)

    def categories(self) -> list[str]:
        return sorted({e.category for e in self.entries})

    def save(self, path: str | Path) -> None:
        lines = [json.dumps({"dataset_name": self.dataset_name,
                             "manifest_version": MANIFEST_VERSION})]
        lines += [json.dumps(asdict(e)) for e in self.entries]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        lines = [l for l in Path(path).read_text().splitlines() if l.strip()]
        if not lines:
            raise DataError(f"manifest {path} is empty")
        header = json.loads(lines[0])
        if "dataset_name" not in header:
            raise DataError(f"manifest {path} has no header record")
        entries = [ManifestEntry(**json.loads(l)) for l in lines[1:]]
        return cls(dataset_name=header["dataset_name"], entries=entries)


def _images_in(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir()
                  if p.suffix.lower() in IMAGE_EXTENSIONS and p.is_file())


def _find_mask(mask_dir: Path, stem: str) -> Path | None:
    if not mask_dir.is_dir():
        return None
    candidates = sorted(p for p in mask_dir.iterdir()
                        if p.is_file() and p.stem.startswith(stem)
                        and p.suffix.lower() in IMAGE_EXTENSIONS)
    return candidates[0] if candidates else None


def scan_dataset(root: str | Path, layout: str = "mvtec") -> DatasetManifest:
    """Deterministically enumerate a dataset tree into a manifest.

    Anomalous images without a mask are kept but flagged so localization
    evaluation can skip them with a report.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} does not exist")
    manifest = DatasetManifest(dataset_name=root.name)

    if layout == "mvtec":
        for category_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            category = category_dir.name
            for split_dir in sorted(p for p in category_dir.iterdir()
                                    if p.is_dir() and p.name != "ground_truth"):
                for defect_dir in sorted(p for p in split_dir.iterdir() if p.is_dir()):
                    label = 0 if defect_dir.name == "good" else 1
                    mask_dir = category_dir / "ground_truth" / defect_dir.name
                    for image in _images_in(defect_dir):
                        mask = _find_mask(mask_dir, image.stem) if label else None
                        manifest.entries.append(ManifestEntry(
                            image_path=str(image),
                            category=category,
                            split=split_dir.name,
                            label=label,
                            mask_path=str(mask) if mask else None,
                            flagged="anomalous image without mask" if label and not mask else None,
                        ))
    elif layout == "flat-with-masks":
        for label, sub in ((0, "good"), (1, "bad")):
            directory = root / sub
            if not directory.is_dir():
                continue
            for image in _images_in(directory):
                mask = _find_mask(root / "masks", image.stem) if label else None
                manifest.entries.append(ManifestEntry(
                    image_path=str(image),
                    category=root.name,
                    split="test",
                    label=label,
                    mask_path=str(mask) if mask else None,
                    flagged="anomalous image without mask" if label and not mask else None,
                ))
    else:
        raise DataError(f"unknown layout {layout!r}; expected 'mvtec' or 'flat-with-masks'")

    if not manifest.entries:
        raise DataError(f"no images found under {root}")
    return manifest


def validation_report(manifest: DatasetManifest) -> list[str]:
    return [f"{e.image_path}: {e.flagged}" for e in manifest.entries if e.flagged]


@dataclass(frozen=True)
class PreprocessSpec:
    """Shared train/test preprocessing: bilinear resize + per-channel normalization."""

    resize: tuple[int, int] = (518, 518)
    mean: tuple[float, float, float] = (0.48145466, 0.4578275, 0.40821073)
    std: tuple[float, float, float] = (0.26862954, 0.26130258, 0.27577711)


def preprocess(path_or_image, spec: PreprocessSpec,
               dtype: torch.dtype = torch.float32) -> tuple[torch.Tensor, tuple[int, int]]:
    """Decode, resize, and normalize one image.

    Returns the (3, H, W) model-ready tensor and the original (height, width),
    retained for rendering maps back at the evaluation resolution.
    """
    if isinstance(path_or_image, Image.Image):
        image = path_or_image
    else:
        try:
            image = Image.open(path_or_image)
            image.load()
        except Exception as exc:
            raise DataError(f"cannot decode image {path_or_image}: {exc}") from None
    original_hw = (image.height, image.width)
    image = image.convert("RGB").resize((spec.resize[1], spec.resize[0]), Image.BILINEAR)
    array = np.asarray(image, dtype=np.float32) / 255.0
    tensor = torch.from_numpy(array).permute(2, 0, 1).to(dtype)
    mean = torch.tensor(spec.mean, dtype=dtype).reshape(3, 1, 1)
    std = torch.tensor(spec.std, dtype=dtype).reshape(3, 1, 1)
    return (tensor - mean) / std, original_hw


def load_mask(path: str | Path, out_hw: tuple[int, int]) -> torch.Tensor:
    """Load a binary mask, nearest-resized so values stay within {0, 1}."""
    try:
        mask = Image.open(path)
        mask.load()
    except Exception as exc:
        raise DataError(f"cannot decode mask {path}: {exc}") from None
    mask = mask.convert("L").resize((out_hw[1], out_hw[0]), Image.NEAREST)
    array = np.asarray(mask)
    return torch.from_numpy((array > 127).astype(np.float32))


def export_results(report: dict, out_dir: str | Path, metadata: dict | None = None) -> Path:
    """Write the aggregate report as line-delimited JSON with a stable schema.

    One record per (dataset, category, metric); undefined cells serialize as
    explicit nulls. Returns the results file path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "results.jsonl"
    lines = [json.dumps({"record": "metadata", **(metadata or {})}, sort_keys=True)]
    categories = dict(report["categories"])
    categories["__mean__"] = report["mean"]
    for category in categories:
        for metric, value in categories[category].items():
            lines.append(json.dumps({
                "record": "metric",
                "dataset": report["dataset"],
                "category": category,
                "metric": metric,
                "value": value,
            }))
    for metric, missing in sorted(report.get("footnotes", {}).items()):
        lines.append(json.dumps({
            "record": "footnote",
            "dataset": report["dataset"],
            "metric": metric,
            "excluded_categories": missing,
        }))
    path.write_text("\n".join(lines) + "\n")
    return path


def _heat_rgb(values: np.ndarray) -> np.ndarray:
    """Simple blue->red heat colormap on [0, 1] values."""
    v = np.clip(values, 0.0, 1.0)
    r = np.clip(1.5 - np.abs(4 * v - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * v - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * v - 1), 0, 1)
    return np.stack([r, g, b], axis=-1)


def export_overlay(image, anomaly_map, out_path, mask=None, alpha: float = 0.6) -> Path:
    """Blend the anomaly map over the image with opacity proportional to score.

    A zero map reproduces the input image exactly. An optional ground-truth
    mask is outlined in magenta.
    """
    if isinstance(image, (str, Path)):
        image = Image.open(image)
    base = np.asarray(image.convert("RGB"), dtype=np.float64) / 255.0
    amap = np.asarray(anomaly_map, dtype=np.float64)
    if amap.shape != base.shape[:2]:
        raise DataError(f"map shape {amap.shape} does not match image {base.shape[:2]}")
    if amap.min() < 0 or amap.max() > 1:
        raise DataError("anomaly map must lie in [0, 1]")
    heat = _heat_rgb(amap)
    weight = (alpha * amap)[..., None]
    blended = base * (1 - weight) + heat * weight
    if mask is not None:
        mask = np.asarray(mask).astype(bool)
        edge = mask ^ ndimage_binary_erosion(mask)
        blended[edge] = (1.0, 0.0, 1.0)
    out = Image.fromarray((blended * 255).round().astype(np.uint8))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out.save(out_path)
    return out_path


def ndimage_binary_erosion(mask: np.ndarray) -> np.ndarray:
    from scipy import ndimage

    return ndimage.binary_erosion(mask, ndimage.generate_binary_structure(2, 2))
