"""Heatmap prediction network.

ConvNeXt V2 encoder (nano or tiny, single-channel stem), linear per-stage
projections fused at the stride-4 resolution, two learned x2 upsampling
blocks back to full resolution, and a per-landmark 1x1 prediction head.
Module names inside the encoder follow the reference ConvNeXt V2 layout so
published checkpoints load without key translation.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

VARIANTS = {
    "nano": {"depths": (2, 2, 8, 2), "dims": (80, 160, 320, 640), "pyramid_width": 128},
    "tiny": {"depths": (3, 3, 9, 3), "dims": (96, 192, 384, 768), "pyramid_width": 192},
}

ENCODER_STRIDE = 32


@dataclass
class ModelSpec:
    variant: str = "nano"
    n_landmarks: int = 53
    encoder_drop_path: float = 0.375
    decoder_drop_path: float = 0.275
    residual_dropout2d: float = 0.2
    pretrained_weights_ref: str = ""  # empty: random init; else local path or registry name

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.n_landmarks < 1:
            raise ValueError(f"n_landmarks must be >= 1, got {self.n_landmarks}")
        for name in ("encoder_drop_path", "decoder_drop_path", "residual_dropout2d"):
            rate = getattr(self, name)
            if not (0.0 <= rate < 1.0):
                raise ValueError(f"{name} must be in [0, 1), got {rate}")


class DropPath(nn.Module):
    """Per-sample stochastic depth on the residual branch."""

    def __init__(self, drop_rate: float = 0.0):
        super().__init__()
        self.drop_rate = drop_rate

    def forward(self, x):
        if self.drop_rate == 0.0 or not self.training:
            return x
        keep = 1.0 - self.drop_rate
        mask_shape = (x.shape[0],) + (1,) * (x.ndim - 1)
        mask = x.new_empty(mask_shape).bernoulli_(keep)
        return x * mask / keep


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel dim of an NCHW tensor."""

    def __init__(self, dim, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class GRN(nn.Module):
    """Global response normalization (the V2 addition), channels-last."""

    def __init__(self, dim):
        super().__init__()
        self.gamma = nn.Parameter(torch.zeros(1, 1, 1, dim))
        self.beta = nn.Parameter(torch.zeros(1, 1, 1, dim))

    def forward(self, x):
        gx = torch.norm(x, p=2, dim=(1, 2), keepdim=True)
        nx = gx / (gx.mean(dim=-1, keepdim=True) + 1e-6)
        return self.gamma * (x * nx) + self.beta + x


class Block(nn.Module):
    """ConvNeXt V2 block: 7x7 depthwise conv, LN, 4x MLP with GELU and GRN."""

    def __init__(self, dim, drop_path=0.0):
        super().__init__()
        self.dwconv = nn.Conv2d(dim, dim, kernel_size=7, padding=3, groups=dim)
        self.norm = nn.LayerNorm(dim, eps=1e-6)
        self.pwconv1 = nn.Linear(dim, 4 * dim)
        self.act = nn.GELU()
        self.grn = GRN(4 * dim)
        self.pwconv2 = nn.Linear(4 * dim, dim)
        self.drop_path = DropPath(drop_path)

    def forward(self, x):
        shortcut = x
        x = self.dwconv(x)
        x = x.permute(0, 2, 3, 1)
        x = self.norm(x)
        x = self.pwconv1(x)
        x = self.act(x)
        x = self.grn(x)
        x = self.pwconv2(x)
        x = x.permute(0, 3, 1, 2)
        return shortcut + self.drop_path(x)


class ConvNeXtV2(nn.Module):
    """Four-stage feature hierarchy at strides 4, 8, 16, 32."""

    def __init__(self, in_chans=1, depths=(2, 2, 8, 2), dims=(80, 160, 320, 640),
                 drop_path_rate=0.0):
        super().__init__()
        self.dims = dims
        self.downsample_layers = nn.ModuleList()
        stem = nn.Sequential(
            nn.Conv2d(in_chans, dims[0], kernel_size=4, stride=4),
            LayerNorm2d(dims[0]),
        )
        self.downsample_layers.append(stem)
        for i in range(3):
            self.downsample_layers.append(nn.Sequential(
                LayerNorm2d(dims[i]),
                nn.Conv2d(dims[i], dims[i + 1], kernel_size=2, stride=2),
            ))
        rates = torch.linspace(0, drop_path_rate, sum(depths)).tolist()
        self.stages = nn.ModuleList()
        cursor = 0
        for i, depth in enumerate(depths):
            self.stages.append(nn.Sequential(
                *[Block(dims[i], drop_path=rates[cursor + j]) for j in range(depth)]
            ))
            cursor += depth

    def forward(self, x) -> list[torch.Tensor]:
        features = []
        for down, stage in zip(self.downsample_layers, self.stages):
            x = stage(down(x))
            features.append(x)
        return features


class MLPPyramid(nn.Module):
    """Project every stage to a common width, upsample to stride 4 and sum."""

    def __init__(self, stage_dims, width):
        super().__init__()
        self.projections = nn.ModuleList(
            [nn.Conv2d(dim, width, kernel_size=1) for dim in stage_dims]
        )
        self.act = nn.GELU()

    def forward(self, features):
        target = features[0].shape[-2:]
        fused = self.projections[0](features[0])
        for proj, feat in zip(self.projections[1:], features[1:]):
            fused = fused + F.interpolate(proj(feat), size=target, mode="bilinear",
                                          align_corners=False)
        return self.act(fused)


class ResidualConvBlock(nn.Module):
    def __init__(self, dim, dropout2d=0.2, groups=32):
        super().__init__()
        g = min(groups, dim)
        self.conv1 = nn.Conv2d(dim, dim, kernel_size=3, padding=1)
        self.norm1 = nn.GroupNorm(g, dim)
        self.act = nn.GELU()
        self.drop = nn.Dropout2d(dropout2d)
        self.conv2 = nn.Conv2d(dim, dim, kernel_size=3, padding=1)
        self.norm2 = nn.GroupNorm(g, dim)

    def forward(self, x):
        h = self.drop(self.act(self.norm1(self.conv1(x))))
        h = self.norm2(self.conv2(h))
        return self.act(h + x)


class UpBlock(nn.Module):
    """Residual conv block, two ConvNeXt blocks, then a learned x2 upsample."""

    def __init__(self, dim, drop_path=0.0, dropout2d=0.2):
        super().__init__()
        self.res = ResidualConvBlock(dim, dropout2d=dropout2d)
        self.blocks = nn.Sequential(Block(dim, drop_path), Block(dim, drop_path))
        self.upsample = nn.ConvTranspose2d(dim, dim, kernel_size=2, stride=2)

    def forward(self, x):
        return self.upsample(self.blocks(self.res(x)))


class LandmarkNet(nn.Module):
    """Full heatmap regressor; output spatial size equals the input's."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        arch = VARIANTS[spec.variant]
        width = arch["pyramid_width"]
        self.encoder = ConvNeXtV2(in_chans=1, depths=arch["depths"], dims=arch["dims"],
                                  drop_path_rate=spec.encoder_drop_path)
        self.pyramid = MLPPyramid(arch["dims"], width)
        self.up_blocks = nn.Sequential(
            UpBlock(width, spec.decoder_drop_path, spec.residual_dropout2d),
            UpBlock(width, spec.decoder_drop_path, spec.residual_dropout2d),
        )
        self.head = nn.Sequential(
            nn.GroupNorm(min(32, width), width),
            nn.GELU(),
            nn.Conv2d(width, spec.n_landmarks, kernel_size=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4 or x.shape[1] != 1:
            raise ValueError(f"expected B x 1 x H x W input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        pad_h = (-h) % ENCODER_STRIDE
        pad_w = (-w) % ENCODER_STRIDE
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h))
        logits = self.head(self.up_blocks(self.pyramid(self.encoder(x))))
        if pad_h or pad_w:
            logits = logits[..., :h, :w]
        if not torch.isfinite(logits).all():
            raise RuntimeError("non-finite activations in heatmap logits")
        return logits


def adapt_input_to_single_channel(stem_weight: torch.Tensor) -> torch.Tensor:
    """Sum a 3-channel stem kernel over its input channels."""
    if stem_weight.dim() != 4 or stem_weight.shape[1] != 3:
        raise ValueError(f"expected a 3-input-channel stem weight, got {tuple(stem_weight.shape)}")
    return stem_weight.sum(dim=1, keepdim=True)


def _resolve_weights(ref: str, registry: Optional[Path]) -> Path:
    path = Path(ref)
    if path.exists():
        return path
    if registry is not None:
        for candidate in (Path(registry) / ref, Path(registry) / f"{ref}.pt"):
            if candidate.exists():
                return candidate
    raise FileNotFoundError(f"pretrained weights {ref!r} not found (registry: {registry})")


def load_encoder_weights(encoder: ConvNeXtV2, ref: str, registry: Optional[Path] = None) -> None:
    """Load encoder weights from a checkpoint file, adapting a 3-channel stem.

    Accepts either raw encoder state dicts or checkpoints nesting them under
    'model' / 'state_dict'. Any shape mismatch is an error naming the layer.
    """
    payload = torch.load(_resolve_weights(ref, registry), map_location="cpu",
                         weights_only=False)
    for key in ("model", "state_dict"):
        if isinstance(payload, dict) and key in payload and isinstance(payload[key], dict):
            payload = payload[key]
    state = {k.removeprefix("module.").removeprefix("encoder."): v for k, v in payload.items()}

    stem_key = "downsample_layers.0.0.weight"
    if stem_key in state and state[stem_key].shape[1] == 3:
        state[stem_key] = adapt_input_to_single_channel(state[stem_key])

    own = encoder.state_dict()
    missing = [k for k in own if k not in state]
    if missing:
        raise ValueError(f"pretrained checkpoint is missing encoder layers: {missing[:5]}")
    for key, value in own.items():
        if state[key].shape != value.shape:
            raise ValueError(
                f"shape mismatch at layer {key}: checkpoint {tuple(state[key].shape)} "
                f"vs model {tuple(value.shape)}"
            )
    encoder.load_state_dict({k: state[k] for k in own})


def build_model(spec: ModelSpec, weights_registry: Optional[Path] = None) -> LandmarkNet:
    """Construct the network and load pretrained encoder weights when given."""
    model = LandmarkNet(spec)
    if spec.pretrained_weights_ref:
        load_encoder_weights(model.encoder, spec.pretrained_weights_ref, weights_registry)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def save_checkpoint(path, model: LandmarkNet, run_config: dict, config_hash: str,
                    fold_index: int = 0, best_val_mre_mm: float = float("nan"),
                    epoch: int = -1) -> None:
    torch.save(
        {
            "model_spec": asdict(model.spec),
            "state_dict": model.state_dict(),
            "run_config": run_config,
            "config_hash": config_hash,
            "fold_index": fold_index,
            "best_val_mre_mm": best_val_mre_mm,
            "epoch": epoch,
        },
        path,
    )


def load_checkpoint(path) -> tuple[LandmarkNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    spec = ModelSpec(**payload["model_spec"])
    model = LandmarkNet(spec)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
