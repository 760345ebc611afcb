"""Dataset ingestion: images, landmark annotations, calibration and CV folds.

Annotation format is one CSV row per image:
    image_id, spacing, x1, y1, ..., x53, y53
with a header row, UTF-8, '.' decimal separator, coordinates in
original-image pixel space and spacing in mm per pixel.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

N_LANDMARKS = 53

# Landmark group tags and their cardinalities (must sum to 53).
GROUP_SIZES = (
    ("soft-tissue", 13),
    ("tooth", 6),
    ("skull", 19),
    ("cervical-spine", 13),
    ("ruler", 2),
)

_GROUP_PREFIX = {
    "soft-tissue": "st",
    "tooth": "th",
    "skull": "sk",
    "cervical-spine": "cs",
    "ruler": "ru",
}


def default_landmark_names() -> list[str]:
    """53 landmark identifiers, ordered by group."""
    names = []
    for tag, count in GROUP_SIZES:
        prefix = _GROUP_PREFIX[tag]
        names.extend(f"{prefix}{i:02d}" for i in range(1, count + 1))
    return names


def default_groups() -> dict[str, str]:
    """Mapping landmark identifier -> group tag."""
    groups = {}
    for tag, count in GROUP_SIZES:
        prefix = _GROUP_PREFIX[tag]
        for i in range(1, count + 1):
            groups[f"{prefix}{i:02d}"] = tag
    return groups


@dataclass
class LandmarkSet:
    """53 named 2D points in original-image pixel space.

    ``points`` is a (53, 2) float64 array of (x, y) pairs.
    """

    points: np.ndarray
    names: list[str] = field(default_factory=default_landmark_names)
    groups: dict[str, str] = field(default_factory=default_groups)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.shape != (N_LANDMARKS, 2):
            raise ValueError(
                f"landmark count mismatch: expected {N_LANDMARKS} (x, y) pairs, "
                f"got shape {self.points.shape}"
            )
        if len(self.names) != N_LANDMARKS:
            raise ValueError(f"expected {N_LANDMARKS} landmark names, got {len(self.names)}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("landmark coordinates must be finite")
        if np.any(self.points < 0):
            raise ValueError("landmark coordinates must be >= 0")
        counts: dict[str, int] = {}
        for name in self.names:
            tag = self.groups.get(name)
            if tag is None:
                raise ValueError(f"landmark {name!r} has no group tag")
            counts[tag] = counts.get(tag, 0) + 1
        expected = dict(GROUP_SIZES)
        if counts != expected:
            raise ValueError(f"group cardinalities {counts} != expected {expected}")

    def ruler_points(self) -> np.ndarray:
        """The two calibration-ruler points, (2, 2)."""
        idx = [i for i, n in enumerate(self.names) if self.groups[n] == "ruler"]
        return self.points[idx]


def spacing_from_ruler(landmarks: LandmarkSet, ruler_length_mm: float) -> float:
    """Derive mm-per-pixel calibration from the two ruler landmarks.

    Only valid when the physical ruler length is known; it is configuration,
    not a dataset fact.
    """
    if ruler_length_mm <= 0:
        raise ValueError(f"ruler_length_mm must be > 0, got {ruler_length_mm}")
    a, b = landmarks.ruler_points()
    dist_px = float(math.hypot(*(a - b)))
    if dist_px <= 0:
        raise ValueError("ruler landmarks coincide; cannot derive spacing")
    return ruler_length_mm / dist_px


@dataclass
class ImageRecord:
    """One X-ray with calibration and (optionally) its landmark annotation.

    Pixels are lazily loaded from ``path`` on first access and cached;
    synthetic records may pass pixels directly.
    """

    image_id: str
    height: int
    width: int
    spacing: float
    landmarks: Optional[LandmarkSet] = None
    path: Optional[Path] = None
    _pixels: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.spacing <= 0:
            raise ValueError(f"image {self.image_id}: spacing must be > 0, got {self.spacing}")
        if self.height < 1 or self.width < 1:
            raise ValueError(f"image {self.image_id}: degenerate size {self.height}x{self.width}")
        if self.landmarks is not None:
            pts = self.landmarks.points
            if np.any(pts[:, 0] >= self.width) or np.any(pts[:, 1] >= self.height):
                raise ValueError(
                    f"image {self.image_id}: landmark outside [0, {self.width}) x [0, {self.height})"
                )

    @property
    def pixels(self) -> np.ndarray:
        """2D uint8 grayscale array (height x width)."""
        if self._pixels is None:
            if self.path is None:
                raise RuntimeError(f"image {self.image_id} has neither pixels nor a file path")
            self._pixels = load_grayscale(self.path)
        return self._pixels

    @classmethod
    def from_array(cls, image_id, pixels, spacing, landmarks=None):
        pixels = to_grayscale(np.asarray(pixels))
        h, w = pixels.shape
        return cls(image_id=image_id, height=h, width=w, spacing=spacing,
                   landmarks=landmarks, _pixels=pixels)


def to_grayscale(arr: np.ndarray) -> np.ndarray:
    """Collapse a 3-channel array to one channel by channel averaging."""
    if arr.ndim == 3:
        arr = np.rint(arr.astype(np.float64).mean(axis=2))
    return arr.astype(np.uint8)


def load_grayscale(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img)
    return to_grayscale(arr)


def _image_size(path: Path) -> tuple[int, int]:
    """(height, width) read from the file header without decoding pixels."""
    with Image.open(path) as img:
        w, h = img.size
    return h, w


def _find_image(root: Path, image_id: str, extensions: Sequence[str]) -> Path:
    for ext in extensions:
        candidate = root / f"{image_id}{ext}"
        if candidate.exists():
            return candidate
    raise FileNotFoundError(
        f"no image file for id {image_id!r} under {root} (tried extensions {list(extensions)})"
    )


DEFAULT_EXTENSIONS = (".png", ".bmp", ".jpg", ".jpeg", ".tif", ".tiff")

_HEADER = ["image_id", "spacing"] + [
    c for i in range(1, N_LANDMARKS + 1) for c in (f"x{i}", f"y{i}")
]


def read_annotations(
    annotation_file,
    ruler_length_mm: Optional[float] = None,
) -> list[tuple[str, float, LandmarkSet]]:
    """Parse the annotation CSV to (image_id, spacing, landmarks) triples.

    A missing spacing cell falls back to ruler-derived calibration when
    ``ruler_length_mm`` is given, otherwise it is an error; an explicit
    non-positive spacing is always an error.
    """
    path = Path(annotation_file)
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header[:2]] != ["image_id", "spacing"]:
            raise ValueError(f"{path}: missing or malformed header row")
        for row_num, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            image_id = row[0].strip()
            coords = [c for c in row[2:] if c.strip() != ""]
            if len(coords) != 2 * N_LANDMARKS:
                raise ValueError(
                    f"{path} row {row_num} ({image_id}): landmark count mismatch, "
                    f"expected {N_LANDMARKS} pairs, got {len(coords) / 2:g}"
                )
            pts = np.array([float(c) for c in coords], dtype=np.float64).reshape(-1, 2)
            landmarks = LandmarkSet(points=pts)

            spacing_cell = row[1].strip()
            if spacing_cell == "":
                if ruler_length_mm is None:
                    raise ValueError(f"{path} row {row_num} ({image_id}): missing spacing")
                spacing = spacing_from_ruler(landmarks, ruler_length_mm)
            else:
                spacing = float(spacing_cell)
                if spacing <= 0:
                    raise ValueError(
                        f"{path} row {row_num} ({image_id}): spacing must be > 0, got {spacing}"
                    )
            rows.append((image_id, spacing, landmarks))
    return rows


def load_dataset(
    root_path,
    annotation_file,
    extensions: Sequence[str] = DEFAULT_EXTENSIONS,
    ruler_length_mm: Optional[float] = None,
) -> list[ImageRecord]:
    """Read the annotation CSV and build one ImageRecord per row.

    Pixels stay lazily loadable by id; every referenced image file must
    exist, with errors naming the offending id.
    """
    root = Path(root_path)
    records = []
    for image_id, spacing, landmarks in read_annotations(annotation_file, ruler_length_mm):
        img_path = _find_image(root, image_id, extensions)
        h, w = _image_size(img_path)
        records.append(
            ImageRecord(image_id=image_id, height=h, width=w, spacing=spacing,
                        landmarks=landmarks, path=img_path)
        )
    return records


def save_annotations(records: Iterable[ImageRecord], annotation_file) -> None:
    """Write records back to the annotation CSV schema (exact float round-trip)."""
    with open(annotation_file, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_HEADER)
        for rec in records:
            if rec.landmarks is None:
                raise ValueError(f"image {rec.image_id} has no landmarks to write")
            row = [rec.image_id, repr(rec.spacing)]
            for x, y in rec.landmarks.points:
                row.extend([repr(float(x)), repr(float(y))])
            writer.writerow(row)


def load_images(
    root_path,
    image_ids: Optional[Sequence[str]] = None,
    extensions: Sequence[str] = DEFAULT_EXTENSIONS,
    spacing: float = 1.0,
) -> list[ImageRecord]:
    """Build unannotated records, either for explicit ids or every image in root."""
    root = Path(root_path)
    if image_ids is None:
        paths = sorted(p for p in root.iterdir() if p.suffix.lower() in extensions)
        if not paths:
            raise FileNotFoundError(f"no image files under {root}")
    else:
        paths = [_find_image(root, image_id, extensions) for image_id in image_ids]
    records = []
    for p in paths:
        h, w = _image_size(p)
        records.append(ImageRecord(image_id=p.stem, height=h, width=w,
                                   spacing=spacing, path=p))
    return records


@dataclass
class FoldAssignment:
    """Deterministic partition of image ids into cross-validation folds."""

    n_folds: int
    assignment: dict[str, int]

    def fold_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignment.items() if f == fold]

    def train_ids(self, fold: int) -> list[str]:
        return [i for i, f in self.assignment.items() if f != fold]


def split_folds(image_ids: Sequence[str], n_folds: int = 4, seed: int = 0) -> FoldAssignment:
    """Shuffle ids with a seeded RNG and deal them round-robin into folds.

    Fold sizes differ by at most one; repeated calls with the same inputs
    yield the identical assignment.
    """
    ids = list(image_ids)
    if not ids:
        raise ValueError("image_ids must be non-empty")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate image ids in fold split")
    if n_folds < 2:
        raise ValueError(f"n_folds must be >= 2, got {n_folds}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(sorted(ids))
    assignment = {str(image_id): i % n_folds for i, image_id in enumerate(order)}
    return FoldAssignment(n_folds=n_folds, assignment=assignment)


def to_mm(dist_px: float, spacing: float) -> float:
    """Convert a pixel distance to millimetres using mm-per-pixel spacing."""
    if spacing <= 0:
        raise ValueError(f"spacing must be > 0, got {spacing}")
    return dist_px * spacing
