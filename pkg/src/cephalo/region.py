"""Facial region extraction: GT box generation, detector, crop and inverse remap.

The detector itself (a torchvision Faster R-CNN with its standard two-term
objective) is a pluggable component; this module owns the verifiable parts:
box generation from landmarks, box selection, cropping, resizing and the
exact mapping of crop-space coordinates back to original-image space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
import torch

from .data import ImageRecord, LandmarkSet

FALLBACK_MODES = ("none", "pad_crop", "pad_resize")


@dataclass
class BoundingBox:
    """Axis-aligned box in original-image pixel space."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box ({self.x0}, {self.y0}, {self.x1}, {self.y1})")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        return self.width * self.height

    def clamped(self, image_size: tuple[int, int]) -> "BoundingBox":
        h, w = image_size
        return BoundingBox(
            x0=min(max(self.x0, 0.0), w),
            y0=min(max(self.y0, 0.0), h),
            x1=min(max(self.x1, 0.0), w),
            y1=min(max(self.y1, 0.0), h),
        )


@dataclass
class DetectorConfig:
    """Configuration of the pluggable single-class region detector."""

    anchor_sizes: tuple = (128, 256, 320, 512)
    aspect_ratios: tuple = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75)
    backbone_id: str = "mobilenet_v3_small"
    score_threshold: float = 0.05
    # ImageNet-pretrained backbone weights need a download; off keeps builds hermetic.
    pretrained: bool = False
    # batch-1 training gives unusable live BatchNorm statistics; keep them frozen
    freeze_batchnorm: bool = True
    min_size: int = 800
    max_size: int = 1333

    def __post_init__(self):
        if not (0 < self.score_threshold < 1):
            raise ValueError(f"score_threshold must be in (0, 1), got {self.score_threshold}")


@dataclass
class RegionTransform:
    """Invertible record of crop offset + scale (resized px per original px)."""

    crop_origin: tuple[float, float]
    scale: float
    resized_size: tuple[int, int]  # (height, width)

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")

    def remap(self, coords: np.ndarray) -> np.ndarray:
        """Resized-crop-space (x, y) -> original-image space."""
        coords = np.asarray(coords, dtype=np.float64)
        return np.asarray(self.crop_origin, dtype=np.float64) + coords / self.scale

    def project(self, coords: np.ndarray) -> np.ndarray:
        """Original-image-space (x, y) -> resized-crop space (forward map)."""
        coords = np.asarray(coords, dtype=np.float64)
        return (coords - np.asarray(self.crop_origin, dtype=np.float64)) * self.scale


def remap_coords(coords: np.ndarray, transform: RegionTransform) -> np.ndarray:
    return transform.remap(coords)


def project_coords(coords: np.ndarray, transform: RegionTransform) -> np.ndarray:
    return transform.project(coords)


def make_gt_box(landmarks: LandmarkSet, pad: float, image_size: tuple[int, int]) -> BoundingBox:
    """Bounding box around the outermost landmarks, padded and clamped.

    ``image_size`` is (height, width). A zero-area box (all landmarks
    identical on an axis with pad = 0) is an error.
    """
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    pts = landmarks.points
    min_x, min_y = pts.min(axis=0)
    max_x, max_y = pts.max(axis=0)
    if pad == 0 and (max_x == min_x or max_y == min_y):
        raise ValueError("degenerate landmarks: zero-area box with pad = 0")
    box = BoundingBox(x0=min_x - pad, y0=min_y - pad, x1=max_x + pad, y1=max_y + pad)
    return box.clamped(image_size)


def round_half_away(x: float) -> int:
    """Round half away from zero (recorded so remap stays exact)."""
    return int(math.floor(x + 0.5)) if x >= 0 else int(math.ceil(x - 0.5))


def crop_box(pixels: np.ndarray, box: BoundingBox) -> tuple[np.ndarray, RegionTransform]:
    """Crop at integer pixel boundaries; the transform records the exact origin."""
    h, w = pixels.shape[:2]
    x0 = max(int(math.floor(box.x0)), 0)
    y0 = max(int(math.floor(box.y0)), 0)
    x1 = min(int(math.ceil(box.x1)), w)
    y1 = min(int(math.ceil(box.y1)), h)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"box {box} does not intersect image {h}x{w}")
    crop = pixels[y0:y1, x0:x1]
    transform = RegionTransform(crop_origin=(float(x0), float(y0)), scale=1.0,
                                resized_size=crop.shape[:2])
    return crop, transform


def pad_to_aspect(pixels: np.ndarray, aspect: float) -> tuple[np.ndarray, RegionTransform]:
    """Pad bottom/right so width / height == aspect; coordinates are unmoved."""
    h, w = pixels.shape[:2]
    if w / h < aspect:
        new_w, new_h = round_half_away(aspect * h), h
    else:
        new_w, new_h = w, round_half_away(w / aspect)
    padded = np.zeros((new_h, new_w), dtype=pixels.dtype)
    padded[:h, :w] = pixels
    transform = RegionTransform(crop_origin=(0.0, 0.0), scale=1.0, resized_size=(new_h, new_w))
    return padded, transform


def crop_to_aspect(pixels: np.ndarray, aspect: float) -> tuple[np.ndarray, RegionTransform]:
    """Deterministic centred crop of the over-long axis down to the target aspect."""
    h, w = pixels.shape[:2]
    if w / h > aspect:
        new_w = max(round_half_away(aspect * h), 1)
        x0 = (w - new_w) // 2
        box = BoundingBox(x0=float(x0), y0=0.0, x1=float(x0 + new_w), y1=float(h))
    else:
        new_h = max(round_half_away(w / aspect), 1)
        y0 = (h - new_h) // 2
        box = BoundingBox(x0=0.0, y0=float(y0), x1=float(w), y1=float(y0 + new_h))
    return crop_box(pixels, box)


def resize_to_height(
    crop: np.ndarray,
    transform: RegionTransform,
    target_height: int = 800,
) -> tuple[np.ndarray, RegionTransform]:
    """Resize so height == target_height, width keeping the crop's aspect ratio."""
    h, w = crop.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("empty crop")
    if h == target_height:
        return crop, RegionTransform(crop_origin=transform.crop_origin,
                                     scale=transform.scale, resized_size=(h, w))
    scale = target_height / h
    new_w = max(round_half_away(w * scale), 1)
    resized = cv2.resize(crop, (new_w, target_height), interpolation=cv2.INTER_LINEAR)
    return resized, RegionTransform(
        crop_origin=transform.crop_origin,
        scale=transform.scale * scale,
        resized_size=(target_height, new_w),
    )


# --------------------------------------------------------------------------
# Detector (pluggable torchvision Faster R-CNN, one foreground class)
# --------------------------------------------------------------------------

_BACKBONE_CHANNELS = {
    "mobilenet_v3_small": 576,
    "mobilenet_v3_large": 960,
}


def _build_backbone(config: DetectorConfig) -> torch.nn.Module:
    from torchvision import models
    from torchvision.ops.misc import FrozenBatchNorm2d

    if config.backbone_id not in _BACKBONE_CHANNELS:
        raise ValueError(
            f"unknown detector backbone {config.backbone_id!r}; "
            f"available: {sorted(_BACKBONE_CHANNELS)}"
        )
    builder = getattr(models, config.backbone_id)
    weights = "IMAGENET1K_V1" if config.pretrained else None
    kwargs = {"norm_layer": FrozenBatchNorm2d} if config.freeze_batchnorm else {}
    backbone = builder(weights=weights, **kwargs).features
    backbone.out_channels = _BACKBONE_CHANNELS[config.backbone_id]
    return backbone


class DetectorModel:
    """Faster R-CNN wrapper: single 'face region' class plus background."""

    def __init__(self, config: DetectorConfig):
        from torchvision.models.detection import FasterRCNN
        from torchvision.models.detection.anchor_utils import AnchorGenerator
        from torchvision.ops import MultiScaleRoIAlign

        self.config = config
        anchor_generator = AnchorGenerator(
            sizes=(tuple(config.anchor_sizes),),
            aspect_ratios=(tuple(config.aspect_ratios),),
        )
        roi_pooler = MultiScaleRoIAlign(featmap_names=["0"], output_size=7, sampling_ratio=2)
        self.module = FasterRCNN(
            _build_backbone(config),
            num_classes=2,
            rpn_anchor_generator=anchor_generator,
            box_roi_pool=roi_pooler,
            min_size=config.min_size,
            max_size=config.max_size,
            box_score_thresh=config.score_threshold,
        )

    def predict_boxes(self, pixels: np.ndarray, device="cpu") -> tuple[np.ndarray, np.ndarray]:
        """(boxes (N, 4), scores (N,)) for one grayscale image, any N >= 0."""
        self.module.eval()
        tensor = _to_detector_input(pixels).to(device)
        with torch.no_grad():
            out = self.module([tensor])[0]
        return out["boxes"].cpu().numpy(), out["scores"].cpu().numpy()

    def state_dict(self):
        return self.module.state_dict()

    def load_state_dict(self, state):
        self.module.load_state_dict(state)


def _to_detector_input(pixels: np.ndarray) -> torch.Tensor:
    # the pretrained backbone expects 3 channels; replicate the grayscale plane
    t = torch.from_numpy(np.ascontiguousarray(pixels)).float() / 255.0
    return t.unsqueeze(0).repeat(3, 1, 1)


@dataclass
class DetectorTrainConfig:
    epochs: int = 10
    lr: float = 1e-3
    weight_decay: float = 1e-4
    pad: float = 32.0
    device: str = "cpu"
    seed: int = 0


def train_detector(
    records: Sequence[ImageRecord],
    detector_config: DetectorConfig,
    train_config: DetectorTrainConfig,
) -> DetectorModel:
    """Fit the detector on GT boxes derived from each record's landmarks.

    Classification and box-regression losses are the detector component's
    standard pair; zero epochs returns the initialized model untrained.
    """
    if not records:
        raise ValueError("empty detector training set")
    for rec in records:
        if rec.landmarks is None:
            raise ValueError(f"image {rec.image_id} has no landmarks for GT box generation")

    torch.manual_seed(train_config.seed)
    detector = DetectorModel(detector_config)
    model = detector.module.to(train_config.device)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.AdamW(params, lr=train_config.lr,
                                  weight_decay=train_config.weight_decay)

    targets = []
    for rec in records:
        box = make_gt_box(rec.landmarks, train_config.pad, (rec.height, rec.width))
        targets.append({
            "boxes": torch.tensor([[box.x0, box.y0, box.x1, box.y1]], dtype=torch.float32),
            "labels": torch.tensor([1], dtype=torch.int64),
        })

    model.train()
    for _ in range(train_config.epochs):
        for rec, target in zip(records, targets):
            image = _to_detector_input(rec.pixels).to(train_config.device)
            target = {k: v.to(train_config.device) for k, v in target.items()}
            loss_dict = model([image], [target])
            loss = sum(loss_dict.values())
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
    model.to("cpu")
    return detector


def save_detector(detector: DetectorModel, path) -> None:
    torch.save({"config": asdict(detector.config), "state_dict": detector.state_dict()}, path)


def load_detector(path) -> DetectorModel:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    cfg = payload["config"]
    cfg["anchor_sizes"] = tuple(cfg["anchor_sizes"])
    cfg["aspect_ratios"] = tuple(cfg["aspect_ratios"])
    detector = DetectorModel(DetectorConfig(**cfg))
    detector.load_state_dict(payload["state_dict"])
    return detector


def select_box(boxes: np.ndarray, scores: np.ndarray, threshold: float) -> Optional[BoundingBox]:
    """Max-score box at or above threshold; ties broken by larger area."""
    keep = scores >= threshold
    if not np.any(keep):
        return None
    boxes, scores = boxes[keep], scores[keep]
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    order = np.lexsort((-areas, -scores))
    best = boxes[order[0]]
    return BoundingBox(*[float(v) for v in best])


def extract_region(
    record: ImageRecord,
    detector: Optional[DetectorModel] = None,
    fallback: str = "pad_resize",
    target_aspect: float = 0.8,
    device: str = "cpu",
) -> tuple[np.ndarray, RegionTransform]:
    """Crop the cephalometry-relevant region of one image.

    The highest-scoring detection above the configured threshold wins; with
    no detection (or no detector) the deterministic fallback preprocessing
    is applied instead. ``target_aspect`` is width / height of the fallback
    frame (0.8 gives 800 x 640 after the standard resize).
    """
    if fallback not in FALLBACK_MODES:
        raise ValueError(f"fallback must be one of {FALLBACK_MODES}, got {fallback!r}")
    pixels = record.pixels
    if detector is not None:
        boxes, scores = detector.predict_boxes(pixels, device=device)
        box = select_box(boxes, scores, detector.config.score_threshold)
        if box is not None:
            return crop_box(pixels, box.clamped((record.height, record.width)))
    if fallback == "none":
        raise RuntimeError(f"no region detected for image {record.image_id} and fallback is 'none'")
    if fallback == "pad_crop":
        return crop_to_aspect(pixels, target_aspect)
    return pad_to_aspect(pixels, target_aspect)


def prepare_region(
    record: ImageRecord,
    mode: str,
    detector: Optional[DetectorModel] = None,
    pad: float = 32.0,
    target_height: int = 800,
    target_aspect: float = 0.8,
    fallback: str = "pad_resize",
    device: str = "cpu",
) -> tuple[np.ndarray, RegionTransform]:
    """Crop per the chosen preprocessing mode and resize to the working height.

    ``gt_box`` crops around the record's landmarks (training-time ablation
    axis); ``detector`` runs the detector with the configured fallback;
    ``pad_crop`` / ``pad_resize`` force the deterministic variants.
    """
    if mode == "gt_box":
        if record.landmarks is None:
            raise ValueError(f"image {record.image_id}: gt_box preprocessing needs landmarks")
        box = make_gt_box(record.landmarks, pad, (record.height, record.width))
        crop, transform = crop_box(record.pixels, box)
    elif mode == "detector":
        crop, transform = extract_region(record, detector, fallback=fallback,
                                         target_aspect=target_aspect, device=device)
    elif mode in ("pad_crop", "pad_resize"):
        crop, transform = extract_region(record, detector=None, fallback=mode,
                                         target_aspect=target_aspect)
    else:
        raise ValueError(f"unknown preprocessing mode {mode!r}")
    return resize_to_height(crop, transform, target_height)
