"""Training loop over prompt-bank parameters, plus checkpoint round-tripping.

Only the prompt bank learns; both towers (and the spatial encoder) stay
frozen, which is asserted by checksum in the tests. Runs are deterministic
given a seed: data order is a seeded permutation per epoch and the optimizer
is plain Adam with the configured betas.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import torch

from . import __version__
from .config import PipelineConfig, apply_overrides, config_to_dict
from .data import DatasetManifest, PreprocessSpec, load_mask, preprocess
from .errors import CheckpointError, DataError
from .pipeline import Pipeline
from .prompts import PromptBank, init_params

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class TrainResult:
    final_path: Path
    best_path: Path
    loss_trace: list[float] = field(default_factory=list)


def _bank_digest(bank: PromptBank) -> str:
    digest = hashlib.sha256()
    for name, tensor in sorted(bank.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().numpy().tobytes())
    return digest.hexdigest()


def save_checkpoint(bank: PromptBank, cfg: PipelineConfig, step: int, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "code_version": __version__,
        "step": step,
        "config": config_to_dict(cfg),
        "bank_state": {k: v.detach().cpu() for k, v in bank.state_dict().items()},
    }
    payload["digest"] = _bank_digest(bank)
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path, expected: PipelineConfig | None = None
                    ) -> tuple[PromptBank, PipelineConfig]:
    """Load and validate a checkpoint; returns the bank and its config echo."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    for key in ("format_version", "config", "bank_state", "digest"):
        if key not in payload:
            raise CheckpointError(f"checkpoint {path} is missing field {key!r}")
    cfg = apply_overrides(PipelineConfig(), {k: str(v) for k, v in payload["config"].items()})
    if expected is not None:
        for fieldname in ("backbone", "prompt_length", "deep_tokens_per_layer",
                          "tuned_layers", "text_width", "joint_dim"):
            have = getattr(cfg, fieldname)
            want = getattr(expected, fieldname)
            if have != want:
                raise CheckpointError(
                    f"checkpoint {path}: {fieldname} mismatch (checkpoint {have!r}, config {want!r})")
    bank = init_params(cfg)
    try:
        bank.load_state_dict(payload["bank_state"])
    except Exception as exc:
        raise CheckpointError(f"checkpoint {path}: incompatible parameters: {exc}") from None
    if _bank_digest(bank) != payload["digest"]:
        raise CheckpointError(f"checkpoint {path}: integrity digest mismatch")
    return bank, cfg


def _load_training_items(manifest: DatasetManifest, cfg: PipelineConfig):
    """Materialize preprocessed tensors; anomalous entries must carry masks."""
    mean, std = cfg.mean_std()
    spec = PreprocessSpec(resize=(cfg.image_size, cfg.image_size),
                          mean=tuple(mean), std=tuple(std))
    dtype = getattr(torch, cfg.dtype)
    items = []
    for entry in manifest.entries:
        if entry.label == 1 and not entry.mask_path:
            raise DataError(
                f"{entry.image_path}: anomalous training image without a mask "
                "(local loss needs masks)")
        image, _ = preprocess(entry.image_path, spec, dtype)
        mask = None
        if entry.label == 1:
            mask = load_mask(entry.mask_path, (cfg.image_size, cfg.image_size)).to(dtype)
        items.append((image, entry.label, mask))
    if not items:
        raise DataError("manifest contains no training entries")
    return items


def train(cfg: PipelineConfig, manifest_path: str | Path, out_dir: str | Path,
          max_steps: int | None = None) -> TrainResult:
    """Optimize the prompt bank; writes ``final.pt`` and ``best.pt``.

    ``max_steps`` truncates training (0 epochs or 0 steps leave the bank at
    its seeded initialization). Best checkpoint selection is by lowest
    per-epoch mean loss on the source set.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(cfg.seed)

    manifest = DatasetManifest.load(manifest_path)
    items = _load_training_items(manifest, cfg)
    pipeline = Pipeline.build(cfg)
    bank = pipeline.bank
    optimizer = torch.optim.Adam(bank.parameters(), lr=cfg.learning_rate,
                                 betas=(cfg.beta1, cfg.beta2))

    best_loss = float("inf")
    best_path = out_dir / "best.pt"
    final_path = out_dir / "final.pt"
    trace: list[float] = []
    step = 0
    budget = max_steps if max_steps is not None else None
    save_checkpoint(bank, cfg, step, best_path)  # 0-step baseline

    done = cfg.epochs == 0 or budget == 0
    for epoch in range(cfg.epochs):
        if done:
            break
        order = torch.randperm(len(items),
                               generator=torch.Generator().manual_seed(cfg.seed + epoch))
        epoch_losses = []
        for start in range(0, len(items), cfg.batch_size):
            if budget is not None and step >= budget:
                done = True
                break
            batch = [items[i] for i in order[start:start + cfg.batch_size].tolist()]
            optimizer.zero_grad()
            loss = torch.stack([
                pipeline.image_loss(image, label, mask) for image, label, mask in batch
            ]).mean()
            loss.backward()
            optimizer.step()
            step += 1
            value = float(loss.detach())
            trace.append(value)
            epoch_losses.append(value)
            log.info("step %d loss %.6f", step, value)
        if epoch_losses:
            epoch_mean = sum(epoch_losses) / len(epoch_losses)
            if epoch_mean < best_loss:
                best_loss = epoch_mean
                save_checkpoint(bank, cfg, step, best_path)

    save_checkpoint(bank, cfg, step, final_path)
    if best_loss == float("inf") and step > 0:
        save_checkpoint(bank, cfg, step, best_path)
    return TrainResult(final_path=final_path, best_path=best_path, loss_trace=trace)
