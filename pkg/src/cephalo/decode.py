"""Heatmap-to-coordinate decoding (top-K averaging), ensembling, MRE and SDR."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


def decode_topk(plane: np.ndarray, k: int = 20, weighted: bool = False) -> tuple[float, float]:
    """Average the coordinates of the K hottest pixels of one heatmap plane.

    Ties at the K-th value are broken by row-major scan order so results are
    reproducible across runs and platforms. ``weighted`` switches to
    value-weighted averaging (ablation option, off by default).
    """
    plane = np.asarray(plane)
    if plane.ndim != 2:
        raise ValueError(f"expected a 2D plane, got shape {plane.shape}")
    if not np.all(np.isfinite(plane)):
        raise ValueError("non-finite heatmap values")
    h, w = plane.shape
    if not (1 <= k <= h * w):
        raise ValueError(f"k must be in [1, {h * w}], got {k}")

    flat = plane.reshape(-1).astype(np.float64)
    # stable sort on negated values: descending by value, ties by scan order
    order = np.argsort(-flat, kind="stable")[:k]
    ys, xs = np.divmod(order, w)
    if weighted:
        vals = flat[order]
        weights = vals - vals.min() + 1e-12
        weights /= weights.sum()
        return float(xs @ weights), float(ys @ weights)
    return float(xs.mean()), float(ys.mean())


def decode_heatmaps(heatmaps: np.ndarray, k: int = 20, weighted: bool = False) -> np.ndarray:
    """(L, H, W) heatmaps -> (L, 2) coordinates."""
    return np.array([decode_topk(plane, k, weighted) for plane in heatmaps], dtype=np.float64)


def ensemble_coords(coords_per_model: Sequence[np.ndarray]) -> np.ndarray:
    """Per-landmark arithmetic mean of (L, 2) coordinate arrays across models."""
    if len(coords_per_model) == 0:
        raise ValueError("need at least one model's coordinates")
    arrays = [np.asarray(c, dtype=np.float64) for c in coords_per_model]
    shape = arrays[0].shape
    for a in arrays:
        if a.shape != shape:
            raise ValueError(f"mismatched landmark counts: {a.shape} vs {shape}")
    return np.mean(np.stack(arrays), axis=0)


def _radial_errors_mm(preds, gts, spacings) -> list[np.ndarray]:
    if len(preds) == 0:
        raise ValueError("empty evaluation input")
    if not (len(preds) == len(gts) == len(spacings)):
        raise ValueError("preds, gts and spacings must have equal lengths")
    per_image = []
    for p, g, s in zip(preds, gts, spacings):
        p = np.asarray(p, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if p.shape != g.shape:
            raise ValueError(f"pred shape {p.shape} != gt shape {g.shape}")
        if s <= 0:
            raise ValueError(f"spacing must be > 0, got {s}")
        per_image.append(np.linalg.norm(p - g, axis=1) * s)
    return per_image


def mre(preds, gts, spacings) -> float:
    """Mean radial error in mm over all (image, landmark) pairs."""
    return float(np.concatenate(_radial_errors_mm(preds, gts, spacings)).mean())


def sdr(preds, gts, spacings, threshold_mm: float = 2.0) -> float:
    """Success detection rate: percent of radial errors <= threshold_mm."""
    errors = np.concatenate(_radial_errors_mm(preds, gts, spacings))
    return float(100.0 * (errors <= threshold_mm).mean())


@dataclass
class EvalReport:
    mre_mm: float
    sdr_2mm_pct: float
    per_landmark_mre: list[float]
    per_image_mre: dict[str, float] = field(default_factory=dict)

    def to_json(self, path=None) -> str:
        payload = json.dumps(
            {
                "mre_mm": self.mre_mm,
                "sdr_2mm_pct": self.sdr_2mm_pct,
                "per_landmark_mre": self.per_landmark_mre,
                "per_image_mre": self.per_image_mre,
            },
            indent=2,
        )
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(payload)
        return payload

    def summary_row(self) -> dict[str, float]:
        return {"mre_mm": self.mre_mm, "sdr_2mm_pct": self.sdr_2mm_pct}


def evaluate(
    preds,
    gts,
    spacings,
    image_ids: Optional[Sequence[str]] = None,
    threshold_mm: float = 2.0,
) -> EvalReport:
    """Full MRE / SDR report with per-landmark and per-image breakdowns."""
    per_image_errors = _radial_errors_mm(preds, gts, spacings)
    if len({e.shape for e in per_image_errors}) != 1:
        raise ValueError("per-landmark breakdown needs a uniform landmark count")
    errors = np.stack(per_image_errors)
    if image_ids is None:
        image_ids = [str(i) for i in range(len(preds))]
    per_image = {str(i): float(e.mean()) for i, e in zip(image_ids, errors)}
    return EvalReport(
        mre_mm=float(errors.mean()),
        sdr_2mm_pct=float(100.0 * (errors <= threshold_mm).mean()),
        per_landmark_mre=[float(v) for v in errors.mean(axis=0)],
        per_image_mre=per_image,
    )
