"""Ablation sweeps (padding, artefact rate, top-K) and report rendering."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import torch

from .config import RunConfig
from .data import ImageRecord, split_folds
from .decode import decode_heatmaps, evaluate
from .predict import _as_models
from .region import DetectorModel, prepare_region
from .train import train_fold, validate_fold, _prepare_samples

log = logging.getLogger(__name__)

PADDING_SWEEP_DEFAULT = (16, 32, 64, 96, 128, "pad_crop", "pad_resize")
ARTEFACT_SWEEP_DEFAULT = tuple(round(r * 0.1, 1) for r in range(11))
TOPK_SWEEP_DEFAULT = tuple(range(1, 26))


def _write_rows(path, fieldnames, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def _train_and_score(config: RunConfig, records, fold: int, out_dir,
                     detector=None) -> tuple[float, float]:
    folds = split_folds([r.image_id for r in records], config.n_folds, config.seed)
    state = train_fold(config, fold, records, folds.train_ids(fold),
                       folds.fold_ids(fold), out_dir, detector)
    from .model import load_checkpoint

    model, _ = load_checkpoint(state.checkpoint_path)
    by_id = {r.image_id: r for r in records}
    val_samples = _prepare_samples([by_id[i] for i in folds.fold_ids(fold)], config, detector)
    return validate_fold(model, val_samples, config)


def run_padding_sweep(
    config: RunConfig,
    records: Sequence[ImageRecord],
    out_dir,
    values=PADDING_SWEEP_DEFAULT,
    fold: int = 0,
) -> Path:
    """Train per preprocessing variant: numeric GT-box paddings plus the
    deterministic pad_crop / pad_resize baselines."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        cfg = dataclasses.replace(config)
        if isinstance(value, (int, float)):
            cfg = dataclasses.replace(cfg, preprocess="gt_box", rcnn_pad=float(value))
        else:
            cfg = dataclasses.replace(cfg, preprocess=str(value))
        point_dir = out_dir / f"padding_{value}"
        try:
            mre_mm, sdr_pct = _train_and_score(cfg, records, fold, point_dir)
        except Exception as exc:
            log.warning("padding sweep point %r failed: %s", value, exc)
            mre_mm, sdr_pct = float("nan"), float("nan")
        rows.append({"padding": value, "mre_mm": mre_mm, "sdr_2mm_pct": sdr_pct})
    path = out_dir / "sweep_padding.csv"
    _write_rows(path, ["padding", "mre_mm", "sdr_2mm_pct"], rows)
    return path


def run_artefact_sweep(
    config: RunConfig,
    records: Sequence[ImageRecord],
    out_dir,
    rates=ARTEFACT_SWEEP_DEFAULT,
    fold: int = 0,
) -> Path:
    """Train per artefact-simulation rate on one fold."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for rate in rates:
        aug = dataclasses.replace(config.augmentation, artefact_rate=float(rate))
        cfg = dataclasses.replace(config, augmentation=aug, augment_enabled=True)
        point_dir = out_dir / f"artefact_{rate:g}"
        try:
            mre_mm, sdr_pct = _train_and_score(cfg, records, fold, point_dir)
        except Exception as exc:
            log.warning("artefact sweep point %g failed: %s", rate, exc)
            mre_mm, sdr_pct = float("nan"), float("nan")
        rows.append({"artefact_rate": rate, "mre_mm": mre_mm, "sdr_2mm_pct": sdr_pct})
    path = out_dir / "sweep_artefact_rate.csv"
    _write_rows(path, ["artefact_rate", "mre_mm", "sdr_2mm_pct"], rows)
    return path


def run_topk_sweep(
    config: RunConfig,
    checkpoints: Sequence,
    records: Sequence[ImageRecord],
    out_dir,
    ks=TOPK_SWEEP_DEFAULT,
    detector: Optional[DetectorModel] = None,
    preprocess: Optional[str] = None,
) -> Path:
    """Re-decode held heatmaps for each K; no retraining involved."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    models = _as_models(checkpoints)
    mode = preprocess or config.preprocess
    heatmaps_per_image, gts, spacings, transforms = [], [], [], []
    with torch.no_grad():
        for rec in records:
            pixels, transform = prepare_region(
                rec, mode, detector=detector, pad=config.rcnn_pad,
                target_height=config.target_height, target_aspect=config.fallback_aspect,
                fallback=config.fallback, device=config.device,
            )
            tensor = torch.from_numpy(
                np.ascontiguousarray(pixels, dtype=np.float32)
            ).unsqueeze(0).unsqueeze(0).to(config.device) / 255.0
            heatmaps_per_image.append([m(tensor)[0].cpu().numpy() for m in models])
            transforms.append(transform)
            gts.append(rec.landmarks.points)
            spacings.append(rec.spacing)

    rows = []
    for k in ks:
        preds = []
        for maps_per_model, transform in zip(heatmaps_per_image, transforms):
            per_model = [transform.remap(decode_heatmaps(maps, k=int(k)))
                         for maps in maps_per_model]
            preds.append(np.mean(np.stack(per_model), axis=0))
        report = evaluate(preds, gts, spacings)
        rows.append({"top_k": int(k), "mre_mm": report.mre_mm,
                     "sdr_2mm_pct": report.sdr_2mm_pct})
    path = out_dir / "sweep_top_k.csv"
    _write_rows(path, ["top_k", "mre_mm", "sdr_2mm_pct"], rows)
    return path


def _read_sweep(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"empty sweep file: {path}")
    return rows


def plot_sweep(csv_path, x_col: str, out_png, ylabel: str = "MRE (mm)") -> Path:
    """Line plot of MRE against the sweep axis; NaN points leave visible gaps."""
    rows = _read_sweep(csv_path)
    labels = [row[x_col] for row in rows]
    values = np.array([float(row["mre_mm"]) for row in rows])
    if np.isnan(values).any():
        gaps = [label for label, v in zip(labels, values) if math.isnan(v)]
        log.warning("sweep %s has missing points at %s; plotting with gaps", csv_path, gaps)

    numeric = all(_is_number(label) for label in labels)
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    if numeric:
        ax.plot([float(v) for v in labels], values, marker="o")
    else:
        ax.plot(range(len(labels)), values, marker="o")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_xlabel(x_col.replace("_", " "))
    ax.set_ylabel(ylabel)
    ax.grid(True, linewidth=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return Path(out_png)


def _is_number(text) -> bool:
    try:
        float(text)
        return True
    except (TypeError, ValueError):
        return False


def render_cv_table(metrics: dict, out_dir) -> tuple[Path, Path]:
    """Fold/ensemble MRE-SDR table as CSV and a rendered image."""
    out_dir = Path(out_dir)
    rows = [{"split": f"fold {r['fold'] + 1}", "mre_mm": r["mre_mm"],
             "sdr_2mm_pct": r["sdr_2mm_pct"]} for r in metrics["folds"]]
    rows.append({"split": "ensemble", "mre_mm": metrics["ensemble"]["mre_mm"],
                 "sdr_2mm_pct": metrics["ensemble"]["sdr_2mm_pct"]})
    csv_path = out_dir / "cv_table.csv"
    _write_rows(csv_path, ["split", "mre_mm", "sdr_2mm_pct"], rows)

    fig, ax = plt.subplots(figsize=(5, 0.5 + 0.35 * len(rows)))
    ax.axis("off")
    cells = [[r["split"], f"{r['mre_mm']:.3f}", f"{r['sdr_2mm_pct']:.2f}"] for r in rows]
    table = ax.table(cellText=cells, colLabels=["split", "MRE (mm)", "SDR@2mm (%)"],
                     loc="center")
    table.auto_set_font_size(False)
    table.set_fontsize(9)
    png_path = out_dir / "cv_table.png"
    fig.tight_layout()
    fig.savefig(png_path, dpi=150)
    plt.close(fig)
    return csv_path, png_path


SWEEP_FILES = {
    "padding": ("sweep_padding.csv", "padding"),
    "artefact-rate": ("sweep_artefact_rate.csv", "artefact_rate"),
    "top-k": ("sweep_top_k.csv", "top_k"),
}


def make_report(run_dir, out_dir=None) -> list[Path]:
    """Render every available sweep plot and the CV table from a run directory."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for name, (filename, x_col) in SWEEP_FILES.items():
        csv_path = run_dir / filename
        if csv_path.exists():
            out_png = out_dir / filename.replace(".csv", ".png")
            artifacts.append(plot_sweep(csv_path, x_col, out_png))
    metrics_path = run_dir / "fold_metrics.json"
    if metrics_path.exists():
        metrics = json.loads(metrics_path.read_text())
        artifacts.extend(render_cv_table(metrics, out_dir))
    if not artifacts:
        raise FileNotFoundError(f"no sweep CSVs or fold metrics under {run_dir}")
    return artifacts
