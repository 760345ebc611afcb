"""Training harness: accumulation schedule, LR steps, early stopping, CV folds."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .augment import augment
from .config import RunConfig
from .data import ImageRecord, split_folds
from .decode import decode_heatmaps, evaluate
from .heatmap import encode_target, heatmap_loss
from .model import LandmarkNet, build_model, save_checkpoint
from .region import DetectorModel, DetectorTrainConfig, prepare_region, save_detector
from .region import train_detector as fit_detector

log = logging.getLogger(__name__)


def accumulation_steps_for_epoch(schedule, epoch: int) -> int:
    """Step interval for an epoch; each scheduled interval persists until the next."""
    steps = schedule[0][1]
    for start, value in schedule:
        if epoch >= start:
            steps = value
    return steps


def lr_for_epoch(base_lr: float, decay_factor: float, decay_epochs, epoch: int) -> float:
    """Base LR multiplied by the decay factor once per boundary at or below epoch."""
    lr = base_lr
    for boundary in decay_epochs:
        if epoch >= boundary:
            lr *= decay_factor
    return lr


@dataclass
class TrainState:
    """Best-so-far tracking for checkpoint selection and early stopping."""

    fold_index: int = 0
    epoch: int = -1
    best_val_mre_mm: float = float("inf")
    epochs_since_improvement: int = 0
    checkpoint_path: Optional[str] = None
    history: list = field(default_factory=list)

    def update(self, epoch: int, val_mre_mm: float) -> bool:
        """Record one epoch's validation MRE; True when it strictly improved."""
        self.epoch = epoch
        self.history.append(val_mre_mm)
        if val_mre_mm < self.best_val_mre_mm:
            self.best_val_mre_mm = val_mre_mm
            self.epochs_since_improvement = 0
            return True
        self.epochs_since_improvement += 1
        return False

    def should_stop(self, patience: int) -> bool:
        return self.epochs_since_improvement >= patience


@dataclass
class _Sample:
    """One image prepared for training/validation in resized-crop space."""

    record: ImageRecord
    pixels: np.ndarray  # float32, [0, 255]
    transform: object
    crop_coords: np.ndarray  # (L, 2) in resized-crop space


def _prepare_samples(records, config: RunConfig, detector=None) -> list[_Sample]:
    samples = []
    for rec in records:
        pixels, transform = prepare_region(
            rec, config.preprocess, detector=detector, pad=config.rcnn_pad,
            target_height=config.target_height, target_aspect=config.fallback_aspect,
            fallback=config.fallback, device=config.device,
        )
        coords = transform.project(rec.landmarks.points)
        samples.append(_Sample(record=rec, pixels=pixels.astype(np.float32),
                               transform=transform, crop_coords=coords))
    return samples


def _to_input(pixels: np.ndarray, device) -> torch.Tensor:
    t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32)) / 255.0
    return t.unsqueeze(0).unsqueeze(0).to(device)


def validate_fold(model: LandmarkNet, samples: Sequence[_Sample], config: RunConfig):
    """MRE (mm) and SDR (%) on held-out samples with the deployment decode path."""
    model.eval()
    preds, gts, spacings, ids = [], [], [], []
    with torch.no_grad():
        for sample in samples:
            logits = model(_to_input(sample.pixels, config.device))
            heatmaps = logits[0].cpu().numpy()
            coords = decode_heatmaps(heatmaps, k=config.top_k, weighted=config.weighted_decode)
            preds.append(sample.transform.remap(coords))
            gts.append(sample.record.landmarks.points)
            spacings.append(sample.record.spacing)
            ids.append(sample.record.image_id)
    report = evaluate(preds, gts, spacings, ids)
    return report.mre_mm, report.sdr_2mm_pct


def train_fold(
    config: RunConfig,
    fold_index: int,
    records: Sequence[ImageRecord],
    train_ids: Sequence[str],
    val_ids: Sequence[str],
    out_dir,
    detector: Optional[DetectorModel] = None,
) -> TrainState:
    """Train one landmark model; the checkpoint holds the best-validation epoch.

    Batch size is 1 with gradient accumulation per the configured schedule;
    the LR steps down by the decay factor at each boundary epoch; training
    halts at max_epochs or when validation MRE stops improving for
    ``early_stop_patience`` epochs.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    by_id = {r.image_id: r for r in records}
    train_records = [by_id[i] for i in train_ids]
    val_records = [by_id[i] for i in val_ids]
    if not train_records or not val_records:
        raise ValueError(f"fold {fold_index}: empty train or validation split")

    torch.manual_seed(config.seed + fold_index)
    model = build_model(config.model).to(config.device)
    if config.optimizer.lower() != "adamw":
        raise ValueError(f"unsupported optimizer {config.optimizer!r}")
    optimizer = torch.optim.AdamW(model.parameters(), lr=config.lr,
                                  weight_decay=config.weight_decay)

    train_samples = _prepare_samples(train_records, config, detector)
    val_samples = _prepare_samples(val_records, config, detector)

    state = TrainState(fold_index=fold_index)
    ckpt_path = out_dir / f"landmarks_fold{fold_index}.pt"

    for epoch in range(config.max_epochs):
        steps = accumulation_steps_for_epoch(config.accumulation_schedule, epoch)
        lr = lr_for_epoch(config.lr, config.lr_decay_factor, config.lr_decay_epochs, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        model.train()
        order = np.random.default_rng((config.seed, fold_index, epoch)).permutation(
            len(train_samples))
        optimizer.zero_grad(set_to_none=True)
        pending = 0
        for idx in order:
            sample = train_samples[idx]
            pixels, coords = sample.pixels, sample.crop_coords
            if config.augment_enabled:
                rng = np.random.default_rng((config.seed, fold_index, epoch, int(idx)))
                pixels, coords, _ = augment(pixels, coords, config.augmentation, rng)
            h, w = pixels.shape[:2]
            target = encode_target(coords, h, w, blur_sigma=config.blur_sigma)
            if not bool(target.valid.any()):
                continue
            try:
                logits = model(_to_input(pixels, config.device))
                loss = heatmap_loss(logits, target.maps.unsqueeze(0).to(config.device),
                                    target.valid.unsqueeze(0).to(config.device)) / steps
                if not torch.isfinite(loss):
                    raise RuntimeError("non-finite loss")
            except RuntimeError as exc:
                if "non-finite" not in str(exc):
                    raise
                dump = out_dir / f"abort_fold{fold_index}.json"
                dump.write_text(json.dumps({
                    "fold": fold_index, "epoch": epoch, "image_id": sample.record.image_id,
                    "lr": lr, "best_val_mre_mm": state.best_val_mre_mm,
                }, indent=2))
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch}; state dumped to {dump}") from exc
            loss.backward()
            pending += 1
            if pending == steps:
                optimizer.step()
                optimizer.zero_grad(set_to_none=True)
                pending = 0
        if pending:
            optimizer.step()
            optimizer.zero_grad(set_to_none=True)

        val_mre, val_sdr = validate_fold(model, val_samples, config)
        improved = state.update(epoch, val_mre)
        if improved:
            save_checkpoint(ckpt_path, model, config.to_dict(), config.hash(),
                            fold_index=fold_index, best_val_mre_mm=val_mre, epoch=epoch)
            state.checkpoint_path = str(ckpt_path)
        log.info("fold %d epoch %d: val MRE %.4f mm, SDR %.2f%% (best %.4f)",
                 fold_index, epoch, val_mre, val_sdr, state.best_val_mre_mm)

        if config.target_val_mre is not None and state.best_val_mre_mm < config.target_val_mre:
            break
        if state.should_stop(config.early_stop_patience):
            break

    if state.checkpoint_path is None:
        raise RuntimeError(f"fold {fold_index}: no checkpoint was ever saved")
    return state


def train_all(
    config: RunConfig,
    records: Sequence[ImageRecord],
    out_dir,
    detector: Optional[DetectorModel] = None,
    detector_train: Optional[DetectorTrainConfig] = None,
) -> dict:
    """Cross-validated training: one detector plus one landmark model per fold.

    Returns fold metrics in the shape of the CV table (per-fold MRE/SDR and
    the all-image ensemble row) and writes them alongside the checkpoints.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    folds = split_folds([r.image_id for r in records], config.n_folds, config.seed)

    detector_path = None
    if detector is None and detector_train is not None and detector_train.epochs > 0:
        detector = fit_detector(records, config.detector, detector_train)
        detector_path = out_dir / "detector.pt"
        save_detector(detector, detector_path)

    fold_states = []
    for fold in range(config.n_folds):
        state = train_fold(config, fold, records, folds.train_ids(fold),
                           folds.fold_ids(fold), out_dir, detector)
        fold_states.append(state)

    # ensemble metrics across every labelled image, all folds' checkpoints averaged
    from .predict import predict_records

    checkpoints = [s.checkpoint_path for s in fold_states]
    bundles, failures = predict_records(config, checkpoints, records, detector=detector,
                                        preprocess=config.preprocess)
    if failures:
        raise RuntimeError(f"ensemble evaluation failed on images: {failures}")
    by_id = {r.image_id: r for r in records}
    preds = [b.ensembled_coords for b in bundles]
    gts = [by_id[b.image_id].landmarks.points for b in bundles]
    spacings = [by_id[b.image_id].spacing for b in bundles]
    ensemble_report = evaluate(preds, gts, spacings, [b.image_id for b in bundles])

    fold_rows = []
    for state in fold_states:
        from .model import load_checkpoint

        model, payload = load_checkpoint(state.checkpoint_path)
        val_samples = _prepare_samples([by_id[i] for i in folds.fold_ids(state.fold_index)],
                                       config, detector)
        mre_mm, sdr_pct = validate_fold(model, val_samples, config)
        fold_rows.append({"fold": state.fold_index, "mre_mm": mre_mm, "sdr_2mm_pct": sdr_pct})

    metrics = {
        "folds": fold_rows,
        "ensemble": {"mre_mm": ensemble_report.mre_mm,
                     "sdr_2mm_pct": ensemble_report.sdr_2mm_pct},
        "config_hash": config.hash(),
        "fold_seed": config.seed,
    }
    (out_dir / "fold_metrics.json").write_text(json.dumps(metrics, indent=2))
    return {
        "checkpoints": checkpoints,
        "detector_path": str(detector_path) if detector_path else None,
        "metrics": metrics,
        "fold_assignment": folds.assignment,
    }
