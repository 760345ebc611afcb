"""Inference: per-model prediction, fold ensembling and submission output."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import RunConfig
from .data import N_LANDMARKS, ImageRecord
from .decode import decode_heatmaps, ensemble_coords
from .model import LandmarkNet, load_checkpoint
from .region import DetectorModel, prepare_region

log = logging.getLogger(__name__)


@dataclass
class PredictionBundle:
    """Decoded coordinates per model plus their ensemble, in original-image space."""

    image_id: str
    per_model_coords: list  # list of (L, 2) float64 arrays
    ensembled_coords: np.ndarray  # (L, 2) float64


def _as_models(checkpoints) -> list[LandmarkNet]:
    models = []
    for item in checkpoints:
        if isinstance(item, LandmarkNet):
            models.append(item.eval())
        else:
            model, _ = load_checkpoint(item)
            models.append(model)
    return models


def predict_records(
    config: RunConfig,
    checkpoints: Sequence,
    records: Sequence[ImageRecord],
    detector: Optional[DetectorModel] = None,
    preprocess: str = "detector",
) -> tuple[list[PredictionBundle], list[str]]:
    """Run the full pipeline per image: crop, forward, decode, remap, ensemble.

    An image that cannot be processed is skipped and reported in the second
    return value rather than aborting the batch.
    """
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    models = _as_models(checkpoints)
    device = config.device
    for m in models:
        m.to(device)

    bundles, failures = [], []
    for rec in records:
        try:
            pixels, transform = prepare_region(
                rec, preprocess, detector=detector, pad=config.rcnn_pad,
                target_height=config.target_height, target_aspect=config.fallback_aspect,
                fallback=config.fallback, device=device,
            )
            tensor = torch.from_numpy(
                np.ascontiguousarray(pixels, dtype=np.float32)
            ).unsqueeze(0).unsqueeze(0).to(device) / 255.0
            per_model = []
            with torch.no_grad():
                for model in models:
                    heatmaps = model(tensor)[0].cpu().numpy()
                    coords = decode_heatmaps(heatmaps, k=config.top_k,
                                             weighted=config.weighted_decode)
                    per_model.append(transform.remap(coords))
            bundles.append(PredictionBundle(
                image_id=rec.image_id,
                per_model_coords=per_model,
                ensembled_coords=ensemble_coords(per_model),
            ))
        except Exception as exc:
            log.error("skipping image %s: %s", rec.image_id, exc)
            failures.append(rec.image_id)
    return bundles, failures


SUBMISSION_HEADER = ["image_id"] + [
    c for i in range(1, N_LANDMARKS + 1) for c in (f"x{i}", f"y{i}")
]


def write_submission(bundles: Sequence[PredictionBundle], path) -> None:
    """Challenge-format CSV: image_id then 53 (x, y) pairs in original space."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUBMISSION_HEADER)
        for bundle in bundles:
            row = [bundle.image_id]
            for x, y in bundle.ensembled_coords:
                row.extend([repr(float(x)), repr(float(y))])
            writer.writerow(row)


def read_submission(path) -> dict[str, np.ndarray]:
    """Parse a submission CSV back to image_id -> (53, 2) coordinates."""
    out: dict[str, np.ndarray] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[0].strip() != "image_id":
            raise ValueError(f"{path}: missing submission header")
        for row in reader:
            if not row:
                continue
            coords = [float(c) for c in row[1:]]
            if len(coords) != 2 * N_LANDMARKS:
                raise ValueError(
                    f"{path}: row {row[0]} has {len(coords) / 2:g} pairs, expected {N_LANDMARKS}"
                )
            out[row[0]] = np.array(coords, dtype=np.float64).reshape(-1, 2)
    return out
