"""Training-time augmentation: coordinate-consistent geometric transforms,
photometric jitter, and X-ray acquisition-artefact band simulation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import cv2
import numpy as np
from scipy.ndimage import gaussian_filter


@dataclass
class AugmentationConfig:
    rotation_deg: float = 5.0
    translate_px: tuple[float, float] = (30.0, 20.0)  # (+/- horizontal, +/- vertical)
    scale_delta: float = 0.125
    value_multiply_delta: float = 0.6
    elastic_alpha: float = 400.0
    elastic_sigma: float = 30.0
    cutout_count: int = 1
    cutout_frac: tuple[float, float] = (0.04, 0.3)
    gamma_range: tuple[float, float] = (0.3, 2.0)
    invert_rate: float = 0.1
    blur_rate: float = 0.1
    blur_sigma_range: tuple[float, float] = (0.5, 1.5)
    skewed_scale_rate: float = 0.3
    artefact_rate: float = 0.9
    artefact_noise_sigma: float = 15.0
    artefact_mult_range: tuple[float, float] = (0.5, 1.5)
    artefact_band_sizes: tuple[int, ...] = (25, 50, 75, 100, 125)
    # application probability for ops without a stated per-op rate
    op_rate: float = 0.5

    def __post_init__(self):
        for name in ("invert_rate", "blur_rate", "skewed_scale_rate", "artefact_rate", "op_rate"):
            rate = getattr(self, name)
            if not (0.0 <= rate <= 1.0):
                raise ValueError(f"{name} must be in [0, 1], got {rate}")
        for name in ("cutout_frac", "gamma_range", "blur_sigma_range", "artefact_mult_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is not ordered: ({lo}, {hi})")


# --------------------------------------------------------------------------
# Geometric
# --------------------------------------------------------------------------

@dataclass
class GeometricParams:
    """One sampled geometric transform; image and coordinates share it exactly."""

    rotation_deg: float = 0.0
    translate: tuple[float, float] = (0.0, 0.0)
    scale: tuple[float, float] = (1.0, 1.0)  # (sx, sy)
    elastic_alpha: float = 0.0
    elastic_sigma: float = 30.0
    elastic_seed: Optional[int] = None

    def is_identity_affine(self) -> bool:
        return (self.rotation_deg == 0.0 and self.translate == (0.0, 0.0)
                and self.scale == (1.0, 1.0))


def sample_geometric_params(config: AugmentationConfig, rng: np.random.Generator) -> GeometricParams:
    rot = 0.0
    if rng.random() < config.op_rate:
        rot = float(rng.uniform(-config.rotation_deg, config.rotation_deg))
    tx = ty = 0.0
    if rng.random() < config.op_rate:
        tx = float(rng.uniform(-config.translate_px[0], config.translate_px[0]))
        ty = float(rng.uniform(-config.translate_px[1], config.translate_px[1]))
    sx = sy = 1.0
    if rng.random() < config.op_rate:
        s = float(rng.uniform(1 - config.scale_delta, 1 + config.scale_delta))
        sx, sy = s, s
    if rng.random() < config.skewed_scale_rate:
        # skewed scale ignores aspect ratio: independent per-axis factors
        sx *= float(rng.uniform(1 - config.scale_delta, 1 + config.scale_delta))
        sy *= float(rng.uniform(1 - config.scale_delta, 1 + config.scale_delta))
    alpha, seed = 0.0, None
    if config.elastic_alpha > 0 and rng.random() < config.op_rate:
        alpha = config.elastic_alpha
        seed = int(rng.integers(0, 2**31 - 1))
    return GeometricParams(rotation_deg=rot, translate=(tx, ty), scale=(sx, sy),
                           elastic_alpha=alpha, elastic_sigma=config.elastic_sigma,
                           elastic_seed=seed)


def affine_matrix(params: GeometricParams, image_shape: tuple[int, int]) -> np.ndarray:
    """2x3 matrix: scale then rotate about the image centre, then translate."""
    h, w = image_shape[:2]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    theta = math.radians(params.rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    sx, sy = params.scale
    # R @ S, both about (cx, cy)
    a = np.array([[cos_t * sx, -sin_t * sy], [sin_t * sx, cos_t * sy]], dtype=np.float64)
    offset = np.array([cx, cy]) - a @ np.array([cx, cy]) + np.asarray(params.translate)
    return np.hstack([a, offset[:, None]])


def _elastic_fields(shape, alpha, sigma, seed):
    h, w = shape[:2]
    rng = np.random.default_rng(seed)
    dx = gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma, mode="reflect") * alpha
    dy = gaussian_filter(rng.uniform(-1, 1, (h, w)), sigma, mode="reflect") * alpha
    return dx.astype(np.float32), dy.astype(np.float32)


def _sample_field(fld: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Bilinear sample of a (H, W) field at float (x, y) coordinates."""
    h, w = fld.shape
    x = np.clip(coords[:, 0], 0, w - 1)
    y = np.clip(coords[:, 1], 0, h - 1)
    x0, y0 = np.floor(x).astype(int), np.floor(y).astype(int)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    top = fld[y0, x0] * (1 - fx) + fld[y0, x1] * fx
    bot = fld[y1, x0] * (1 - fx) + fld[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def apply_geometric_params(
    image: np.ndarray,
    coords: np.ndarray,
    params: GeometricParams,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Apply one sampled transform identically to image and (L, 2) coordinates.

    Returns (image, coords, valid) where valid flags coordinates that stayed
    inside the frame. Identity parameters return the inputs untouched.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 2)
    h, w = image.shape[:2]

    if not params.is_identity_affine():
        m = affine_matrix(params, image.shape)
        image = cv2.warpAffine(image, m, (w, h), flags=cv2.INTER_LINEAR,
                               borderMode=cv2.BORDER_CONSTANT, borderValue=0)
        coords = coords @ m[:, :2].T + m[:, 2]

    if params.elastic_alpha > 0:
        dx, dy = _elastic_fields(image.shape, params.elastic_alpha,
                                 params.elastic_sigma, params.elastic_seed)
        grid_x, grid_y = np.meshgrid(np.arange(w, dtype=np.float32),
                                     np.arange(h, dtype=np.float32))
        image = cv2.remap(image, grid_x + dx, grid_y + dy, cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=0)
        # output pixel p reads from p + d(p), so a feature at q lands near q - d(q)
        shift = np.stack([_sample_field(dx, coords), _sample_field(dy, coords)], axis=1)
        coords = coords - shift

    valid = ((coords[:, 0] >= 0) & (coords[:, 0] < w)
             & (coords[:, 1] >= 0) & (coords[:, 1] < h))
    return image, coords, valid


def apply_geometric(image, coords, config: AugmentationConfig, rng: np.random.Generator):
    return apply_geometric_params(image, coords, sample_geometric_params(config, rng))


# --------------------------------------------------------------------------
# Photometric
# --------------------------------------------------------------------------

def apply_photometric(image: np.ndarray, config: AugmentationConfig,
                      rng: np.random.Generator) -> np.ndarray:
    """Value multiply, gamma, inversion, blur and cutout; coordinates untouched.

    Intermediate values run unclipped; the result is clipped to [0, 255] once
    at the end of the chain.
    """
    out = image.astype(np.float32, copy=True)
    h, w = out.shape[:2]

    if rng.random() < config.op_rate:
        out *= rng.uniform(1 - config.value_multiply_delta, 1 + config.value_multiply_delta)
    if rng.random() < config.op_rate:
        gamma = rng.uniform(*config.gamma_range)
        out = 255.0 * np.power(np.maximum(out, 0) / 255.0, gamma)
    if rng.random() < config.invert_rate:
        out = 255.0 - out
    if rng.random() < config.blur_rate:
        sigma = rng.uniform(*config.blur_sigma_range)
        out = cv2.GaussianBlur(out, (0, 0), sigmaX=sigma)
    if rng.random() < config.op_rate:
        for _ in range(config.cutout_count):
            cw = max(int(round(rng.uniform(*config.cutout_frac) * w)), 1)
            ch = max(int(round(rng.uniform(*config.cutout_frac) * h)), 1)
            x0 = int(rng.integers(0, w - cw + 1))
            y0 = int(rng.integers(0, h - ch + 1))
            out[y0:y0 + ch, x0:x0 + cw] = 0.0

    return np.clip(out, 0.0, 255.0)


# --------------------------------------------------------------------------
# X-ray artefact band simulation
# --------------------------------------------------------------------------

@dataclass
class ArtefactParams:
    orientation: str  # "vertical" (column band) or "horizontal" (row band)
    offset: int
    size: int
    mode: str  # "noise" or "multiply"
    noise: Optional[np.ndarray] = field(default=None, repr=False)
    factor: float = 1.0


def sample_artefact_params(config: AugmentationConfig, rng: np.random.Generator,
                           shape: tuple[int, int]) -> Optional[ArtefactParams]:
    """One band draw, or None when the rate gate does not fire."""
    if rng.random() >= config.artefact_rate:
        return None
    h, w = shape[:2]
    orientation = "vertical" if rng.random() < 0.5 else "horizontal"
    size = int(config.artefact_band_sizes[rng.integers(0, len(config.artefact_band_sizes))])
    extent = w if orientation == "vertical" else h
    if size >= extent:
        size, offset = extent, 0
    else:
        offset = int(rng.integers(0, extent - size + 1))
    if rng.random() < 0.5:
        band_shape = (h, size) if orientation == "vertical" else (size, w)
        noise = rng.normal(0.0, config.artefact_noise_sigma, band_shape)
        return ArtefactParams(orientation, offset, size, "noise", noise=noise)
    factor = float(rng.uniform(*config.artefact_mult_range))
    return ArtefactParams(orientation, offset, size, "multiply", factor=factor)


def apply_artefact_params(image: np.ndarray, params: Optional[ArtefactParams]) -> np.ndarray:
    """Modify pixels only inside the band; the complement stays bitwise identical."""
    if params is None:
        return image
    out = image.copy()
    if params.orientation == "vertical":
        band = out[:, params.offset:params.offset + params.size]
    else:
        band = out[params.offset:params.offset + params.size, :]
    modified = band.astype(np.float64)
    if params.mode == "noise":
        modified = modified + params.noise
    else:
        modified = modified * params.factor
    modified = np.clip(modified, 0.0, 255.0)
    if np.issubdtype(out.dtype, np.integer):
        modified = np.rint(modified)
    band[...] = modified.astype(out.dtype)
    return out


def simulate_xray_artefact(image: np.ndarray, config: AugmentationConfig,
                           rng: np.random.Generator) -> np.ndarray:
    return apply_artefact_params(image, sample_artefact_params(config, rng, image.shape))


def augment(image, coords, config: AugmentationConfig, rng: np.random.Generator):
    """Full chain: geometric -> photometric -> artefact (bands stay axis-aligned)."""
    image, coords, valid = apply_geometric(image, coords, config, rng)
    image = apply_photometric(image, config, rng)
    image = simulate_xray_artefact(image, config, rng)
    return image, coords, valid
