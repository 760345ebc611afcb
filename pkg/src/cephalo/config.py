"""Run configuration: every tunable of the pipeline, serializable to YAML.

The config is echoed into every checkpoint and report so any artifact can be
traced back to the exact settings that produced it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import yaml

from .augment import AugmentationConfig
from .model import ModelSpec
from .region import DetectorConfig, FALLBACK_MODES

PREPROCESS_MODES = ("gt_box", "detector", "pad_crop", "pad_resize")


@dataclass
class RunConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    optimizer: str = "adamw"
    lr: float = 2e-4
    weight_decay: float = 0.05
    # (start epoch, accumulation steps); each interval persists until the next change
    accumulation_schedule: tuple = ((0, 32), (4, 16), (8, 8))
    lr_decay_factor: float = 0.25
    lr_decay_epochs: tuple = (35, 45)
    max_epochs: int = 75
    early_stop_patience: int = 10
    n_folds: int = 4
    top_k: int = 20
    rcnn_pad: float = 32.0
    seed: int = 0

    target_height: int = 800
    blur_sigma: float = 1.0
    preprocess: str = "gt_box"  # crop source for landmark training
    fallback: str = "pad_resize"  # inference fallback when the detector finds nothing
    fallback_aspect: float = 0.8  # width / height of the fallback frame
    augment_enabled: bool = True
    weighted_decode: bool = False
    ruler_length_mm: Optional[float] = None
    # stop a fold early once validation MRE (mm) drops below this; smoke-run knob
    target_val_mre: Optional[float] = None
    device: str = "cpu"

    def __post_init__(self):
        self.accumulation_schedule = tuple(tuple(pair) for pair in self.accumulation_schedule)
        self.lr_decay_epochs = tuple(self.lr_decay_epochs)
        starts = [e for e, _ in self.accumulation_schedule]
        if starts != sorted(starts) or len(set(starts)) != len(starts):
            raise ValueError(f"accumulation schedule epochs must be ascending: {starts}")
        if any(steps < 1 for _, steps in self.accumulation_schedule):
            raise ValueError("accumulation steps must be >= 1")
        if self.early_stop_patience < 1:
            raise ValueError(f"early_stop_patience must be >= 1, got {self.early_stop_patience}")
        if self.preprocess not in PREPROCESS_MODES:
            raise ValueError(f"preprocess must be one of {PREPROCESS_MODES}, got {self.preprocess!r}")
        if self.fallback not in FALLBACK_MODES:
            raise ValueError(f"fallback must be one of {FALLBACK_MODES}, got {self.fallback!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        if "model" in data and isinstance(data["model"], dict):
            data["model"] = ModelSpec(**data["model"])
        if "detector" in data and isinstance(data["detector"], dict):
            det = dict(data["detector"])
            for key in ("anchor_sizes", "aspect_ratios"):
                if key in det:
                    det[key] = tuple(det[key])
            data["detector"] = DetectorConfig(**det)
        if "augmentation" in data and isinstance(data["augmentation"], dict):
            aug = dict(data["augmentation"])
            for key in ("translate_px", "cutout_frac", "gamma_range", "blur_sigma_range",
                        "artefact_mult_range", "artefact_band_sizes"):
                if key in aug:
                    aug[key] = tuple(aug[key])
            data["augmentation"] = AugmentationConfig(**aug)
        return cls(**data)

    def to_yaml(self, path=None) -> str:
        text = yaml.safe_dump(_plain(self.to_dict()), sort_keys=True)
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def hash(self) -> str:
        canonical = json.dumps(_plain(self.to_dict()), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _plain(obj):
    """Tuples -> lists so YAML/JSON dumps stay clean and reloadable."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
