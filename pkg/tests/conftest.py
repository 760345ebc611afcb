import numpy as np
import pytest
from PIL import Image

from cephalo.data import N_LANDMARKS, ImageRecord, LandmarkSet


def random_points(rng, width, height, margin=5):
    pts = np.column_stack([
        rng.uniform(margin, width - margin - 1, N_LANDMARKS),
        rng.uniform(margin, height - margin - 1, N_LANDMARKS),
    ])
    return pts


def synth_image(rng, height, width):
    """Grayscale image with blobs so crops and networks see real structure."""
    img = rng.uniform(0, 80, (height, width))
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(5):
        cy = rng.uniform(0.15 * height, 0.85 * height)
        cx = rng.uniform(0.15 * width, 0.85 * width)
        r = rng.uniform(8, max(height, width) / 4)
        img += 120 * np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r**2)))
    return np.clip(img, 0, 255).astype(np.uint8)


def make_record(rng, image_id="img0", height=120, width=100, spacing=0.1):
    pts = random_points(rng, width, height)
    return ImageRecord.from_array(image_id, synth_image(rng, height, width), spacing,
                                  landmarks=LandmarkSet(points=pts))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def dataset_dir(tmp_path, rng):
    """Four annotated images on disk plus their annotation CSV."""
    from cephalo.data import save_annotations

    records = []
    for i in range(4):
        height, width = 120 + 10 * i, 100 + 6 * i
        rec = make_record(rng, image_id=f"case{i:03d}", height=height, width=width,
                          spacing=0.1 + 0.05 * i)
        Image.fromarray(rec.pixels).save(tmp_path / f"{rec.image_id}.png")
        records.append(rec)
    csv_path = tmp_path / "annotations.csv"
    save_annotations(records, csv_path)
    return tmp_path, csv_path, records
