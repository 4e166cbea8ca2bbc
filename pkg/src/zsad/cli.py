"""Command-line entry points: scan, train, eval, predict.

Configuration precedence: package defaults < --config file < --set overrides
< dedicated flags. Exit codes: 0 success, 1 usage error, 2 data error,
3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import torch

from . import __version__
from .config import PipelineConfig, apply_overrides, config_to_dict, load_config
from .data import (
    DatasetManifest,
    PreprocessSpec,
    export_overlay,
    export_results,
    load_mask,
    preprocess,
    scan_dataset,
    validation_report,
)
from .errors import DataError, UsageError, ZsadError
from .metrics import EvalRecord, aggregate_report
from .pipeline import Pipeline
from .train import load_checkpoint, train

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="zsad", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key (repeatable)")
        p.add_argument("--branches", help="comma-separated branch set, e.g. e_attn,d_attn")
        p.add_argument("--seed", type=int)

    scan = sub.add_parser("scan", help="enumerate a dataset tree into a manifest")
    scan.add_argument("--root", required=True)
    scan.add_argument("--layout", default="mvtec", choices=["mvtec", "flat-with-masks"])
    scan.add_argument("--out", required=True, help="manifest output path")

    tr = sub.add_parser("train", help="optimize prompt parameters on a source manifest")
    add_config_flags(tr)
    tr.add_argument("--source", required=True, help="training manifest path")
    tr.add_argument("--out", required=True, help="output directory for checkpoints")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--max-steps", type=int, default=None)

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a target manifest")
    add_config_flags(ev)
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--target", required=True, help="evaluation manifest path")
    ev.add_argument("--out", required=True, help="output directory for results")
    ev.add_argument("--split", default="test", help="split to evaluate, or 'all'")
    ev.add_argument("--workers", type=int)

    pr = sub.add_parser("predict", help="score a single image and write an overlay")
    add_config_flags(pr)
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--out", required=True, help="overlay raster output path")
    pr.add_argument("--no-smooth", action="store_true", help="skip Gaussian smoothing")
    return parser


def _resolve_config(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    overrides: dict[str, str] = {}
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    cfg = apply_overrides(cfg, overrides)
    for flag in ("branches", "seed", "epochs", "workers"):
        value = getattr(args, flag, None)
        if value is not None:
            cfg = apply_overrides(cfg, {flag: str(value)})
    cfg.validate()
    return cfg


def _write_run_metadata(out_dir: Path, cfg: PipelineConfig, command: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "command": command,
        "code_version": __version__,
        "seed": cfg.seed,
        "config": config_to_dict(cfg),
    }
    (out_dir / "run_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _cmd_scan(args) -> int:
    manifest = scan_dataset(args.root, args.layout)
    manifest.save(args.out)
    for line in validation_report(manifest):
        print(f"warning: {line}", file=sys.stderr)
    kind = "localization-only" if manifest.localization_only else "full"
    print(f"wrote {len(manifest.entries)} entries ({kind}) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    if not Path(args.source).is_file():
        raise UsageError(f"missing source manifest {args.source}")
    out_dir = Path(args.out)
    _write_run_metadata(out_dir, cfg, "train")
    result = train(cfg, args.source, out_dir, max_steps=args.max_steps)
    print(f"final checkpoint: {result.final_path}")
    print(f"best checkpoint:  {result.best_path}")
    return 0


def _infer_entry(pipeline: Pipeline, spec: PreprocessSpec, entry):
    dtype = getattr(torch, pipeline.cfg.dtype)
    image, original_hw = preprocess(entry.image_path, spec, dtype)
    result = pipeline.infer(image, out_hw=original_hw, image_id=entry.image_path)
    mask = None
    if entry.label == 1 and entry.mask_path:
        mask = load_mask(entry.mask_path, original_hw).numpy()
    elif entry.label == 0:
        import numpy as np

        mask = np.zeros(original_hw, dtype=np.float32)
    return entry, result, mask


def _cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    bank, _ = load_checkpoint(args.checkpoint, expected=cfg)
    pipeline = Pipeline.build(cfg, bank=bank)
    manifest = DatasetManifest.load(args.target)
    entries = [e for e in manifest.entries if args.split == "all" or e.split == args.split]
    if not entries:
        raise DataError(f"no entries in split {args.split!r} of {args.target}")

    mean, std = cfg.mean_std()
    spec = PreprocessSpec(resize=(cfg.image_size, cfg.image_size),
                          mean=tuple(mean), std=tuple(std))
    records: dict[str, EvalRecord] = {}
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            outputs = list(pool.map(lambda e: _infer_entry(pipeline, spec, e), entries))
    else:
        outputs = [_infer_entry(pipeline, spec, e) for e in entries]
    for entry, result, mask in outputs:
        record = records.setdefault(entry.category, EvalRecord(category=entry.category))
        if not manifest.localization_only:
            record.image_scores.append(result.score)
            record.image_labels.append(entry.label)
        if mask is not None:
            record.pixel_maps.append(result.map.numpy())
            record.pixel_masks.append(mask)
        print(f"{entry.category}\t{entry.image_path}\t{result.score:.4f}")

    report = aggregate_report(
        list(records.values()), dataset_name=manifest.dataset_name,
        fpr_limit=cfg.aupro_fpr_limit, connectivity=cfg.aupro_connectivity,
        max_thresholds=cfg.aupro_max_thresholds, pixel_pooling=cfg.pixel_pooling)
    out_dir = Path(args.out)
    _write_run_metadata(out_dir, cfg, "eval")
    path = export_results(report, out_dir, metadata={
        "checkpoint": str(args.checkpoint), "target": str(args.target),
        "code_version": __version__, "seed": cfg.seed})
    print(f"results: {path}")
    return 0


def _cmd_predict(args) -> int:
    cfg = _resolve_config(args)
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"missing checkpoint {args.checkpoint}")
    bank, _ = load_checkpoint(args.checkpoint, expected=cfg)
    pipeline = Pipeline.build(cfg, bank=bank)
    mean, std = cfg.mean_std()
    spec = PreprocessSpec(resize=(cfg.image_size, cfg.image_size),
                          mean=tuple(mean), std=tuple(std))
    image, original_hw = preprocess(args.image, spec, getattr(torch, cfg.dtype))
    result = pipeline.infer(image, out_hw=original_hw, smooth=not args.no_smooth)
    export_overlay(args.image, result.map.numpy(), args.out)
    print(f"score={result.score:.6f}")
    print(f"overlay: {args.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "scan": _cmd_scan,
            "train": _cmd_train,
            "eval": _cmd_eval,
            "predict": _cmd_predict,
        }[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except ZsadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
