"""Evaluation metrics: image-level AUROC/AP/F1-max, pixel-level AUROC/AUPRO/F1-max.

All metrics are rank-based with midrank tie handling. AUPRO follows the
standard per-region-overlap protocol: mean connected-component recall against
the global false-positive rate on normal pixels, integrated by trapezoid up to
an FPR limit (default 0.3) and normalized by that limit; components use
8-connectivity. Pixel AUROC/F1-max pool pixels per category.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import ConfigError, UndefinedMetricError

IMAGE_METRICS = ("image_auroc", "image_ap", "image_f1max")
PIXEL_METRICS = ("pixel_auroc", "pixel_aupro", "pixel_f1max")


def _validate_scores(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape or scores.size == 0:
        raise UndefinedMetricError("scores and labels must be nonempty and the same length")
    if not np.isin(labels, (0, 1)).all():
        raise UndefinedMetricError("labels must be binary")
    return scores, labels.astype(np.int64)


def auroc(scores, labels) -> float:
    """Mann-Whitney statistic: correctly ranked (positive, negative) pairs, ties half."""
    scores, labels = _validate_scores(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC needs both classes present")
    ranks = rankdata(scores)  # midranks
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _pr_steps(scores: np.ndarray, labels: np.ndarray):
    """Cumulative TP/FP at each distinct descending threshold."""
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    boundaries = np.nonzero(np.diff(sorted_scores))[0]
    cut = np.concatenate([boundaries, [labels.size - 1]])
    tp = np.cumsum(sorted_labels)[cut]
    fp = np.cumsum(1 - sorted_labels)[cut]
    return tp, fp, sorted_scores[cut]


def average_precision(scores, labels) -> float:
    """Step-sum area under precision-recall over descending thresholds."""
    scores, labels = _validate_scores(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise UndefinedMetricError("AP needs both classes present")
    tp, fp, _ = _pr_steps(scores, labels)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def f1_max(scores, labels) -> float:
    """Maximum F1 over all thresholds induced by distinct score values."""
    scores, labels = _validate_scores(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("F1-max needs at least one positive")
    tp, fp, _ = _pr_steps(scores, labels)
    f1 = 2 * tp / (tp + fp + n_pos)
    return float(f1.max())


def _connected_components(mask: np.ndarray, connectivity: int) -> tuple[np.ndarray, int]:
    if connectivity == 8:
        structure = np.ones((3, 3), dtype=bool)
    elif connectivity == 4:
        structure = ndimage.generate_binary_structure(2, 1)
    else:
        raise ConfigError("connectivity must be 4 or 8")
    return ndimage.label(mask, structure=structure)


def aupro(maps, masks, fpr_limit: float = 0.3, connectivity: int = 8,
          max_thresholds: int = 0) -> float:
    """Area under the per-region-overlap curve up to ``fpr_limit``, normalized.

    ``maps``/``masks`` are parallel lists of (H, W) arrays. ``max_thresholds``
    caps the sweep by quantile binning; 0 sweeps every distinct score.
    """
    if not (0 < fpr_limit <= 1):
        raise ConfigError("fpr_limit must lie in (0, 1]")
    if len(maps) != len(masks) or not maps:
        raise UndefinedMetricError("maps and masks must be nonempty parallel lists")

    components = []  # (map, component mask, size)
    normal_scores = []
    for amap, mask in zip(maps, masks):
        amap = np.asarray(amap, dtype=np.float64)
        mask = np.asarray(mask).astype(bool)
        if amap.shape != mask.shape:
            raise UndefinedMetricError(
                f"map {amap.shape} and mask {mask.shape} shapes differ")
        labeled, count = _connected_components(mask, connectivity)
        for region in range(1, count + 1):
            components.append((amap, labeled == region))
        normal_scores.append(amap[~mask])
    if not components:
        raise UndefinedMetricError("no anomalous regions present; AUPRO undefined")
    normal_scores = np.concatenate(normal_scores)
    if normal_scores.size == 0:
        raise UndefinedMetricError("no normal pixels present; FPR undefined")

    thresholds = np.unique(np.concatenate([np.asarray(m, dtype=np.float64).ravel()
                                           for m in maps]))[::-1]
    if max_thresholds and thresholds.size > max_thresholds:
        idx = np.linspace(0, thresholds.size - 1, max_thresholds).round().astype(int)
        thresholds = thresholds[idx]

    fprs = [0.0]
    pros = [0.0]
    for t in thresholds:
        fpr = float((normal_scores >= t).mean())
        overlap = float(np.mean([(amap[region] >= t).mean() for amap, region in components]))
        fprs.append(fpr)
        pros.append(overlap)
    fprs.append(1.0)
    pros.append(pros[-1])

    fprs = np.asarray(fprs)
    pros = np.asarray(pros)
    order = np.argsort(fprs, kind="stable")
    fprs, pros = fprs[order], pros[order]

    # Clip the curve at the FPR limit with linear interpolation.
    inside = fprs <= fpr_limit
    xs = fprs[inside]
    ys = pros[inside]
    if xs[-1] < fpr_limit:
        y_at_limit = float(np.interp(fpr_limit, fprs, pros))
        xs = np.concatenate([xs, [fpr_limit]])
        ys = np.concatenate([ys, [y_at_limit]])
    area = float(np.trapezoid(ys, xs))
    return area / fpr_limit


@dataclass
class EvalRecord:
    """Per-category evaluation inputs."""

    category: str
    image_scores: list[float] = field(default_factory=list)
    image_labels: list[int] = field(default_factory=list)
    pixel_maps: list[np.ndarray] = field(default_factory=list)
    pixel_masks: list[np.ndarray] = field(default_factory=list)


def category_metrics(record: EvalRecord, fpr_limit: float = 0.3, connectivity: int = 8,
                     max_thresholds: int = 0, pixel_pooling: str = "category") -> dict[str, float | None]:
    """All six metrics for one category; undefined cells become None."""
    out: dict[str, float | None] = {}

    def guarded(name, fn):
        try:
            out[name] = fn()
        except UndefinedMetricError:
            out[name] = None

    if record.image_scores:
        guarded("image_auroc", lambda: auroc(record.image_scores, record.image_labels))
        guarded("image_ap", lambda: average_precision(record.image_scores, record.image_labels))
        guarded("image_f1max", lambda: f1_max(record.image_scores, record.image_labels))
    else:
        out.update(dict.fromkeys(IMAGE_METRICS))

    if record.pixel_maps:
        if pixel_pooling == "category":
            flat_scores = np.concatenate([np.asarray(m).ravel() for m in record.pixel_maps])
            flat_labels = np.concatenate(
                [np.asarray(m).astype(int).ravel() for m in record.pixel_masks])
        else:
            flat_scores, flat_labels = None, None
        if pixel_pooling == "category":
            guarded("pixel_auroc", lambda: auroc(flat_scores, flat_labels))
            guarded("pixel_f1max", lambda: f1_max(flat_scores, flat_labels))
        else:

            def per_image(metric):
                values = [metric(np.asarray(m).ravel(), np.asarray(g).astype(int).ravel())
                          for m, g in zip(record.pixel_maps, record.pixel_masks)]
                return float(np.mean(values))

            guarded("pixel_auroc", lambda: per_image(auroc))
            guarded("pixel_f1max", lambda: per_image(f1_max))
        guarded("pixel_aupro", lambda: aupro(
            record.pixel_maps, record.pixel_masks, fpr_limit, connectivity, max_thresholds))
    else:
        out.update(dict.fromkeys(PIXEL_METRICS))

    return {name: out.get(name) for name in IMAGE_METRICS + PIXEL_METRICS}


def aggregate_report(records: list[EvalRecord], dataset_name: str = "dataset",
                     fpr_limit: float = 0.3, connectivity: int = 8,
                     max_thresholds: int = 0, pixel_pooling: str = "category") -> dict:
    """Per-category metrics plus the unweighted category mean per dataset.

    Undefined cells are kept as None and excluded from the mean; categories
    contributing None to a metric are listed under ``footnotes``.
    """
    if not records:
        raise UndefinedMetricError("at least one evaluation record is required")
    per_category = {}
    for record in records:
        per_category[record.category] = category_metrics(
            record, fpr_limit, connectivity, max_thresholds, pixel_pooling)
    means: dict[str, float | None] = {}
    footnotes: dict[str, list[str]] = {}
    for name in IMAGE_METRICS + PIXEL_METRICS:
        values = [m[name] for m in per_category.values() if m[name] is not None]
        missing = [c for c, m in per_category.items() if m[name] is None]
        means[name] = float(np.mean(values)) if values else None
        if missing:
            footnotes[name] = sorted(missing)
    return {
        "dataset": dataset_name,
        "categories": per_category,
        "mean": means,
        "footnotes": footnotes,
    }
