"""
Projection-conditioned patch discriminator with two reconstruction decoders.

    image R² ──conv──> DownBlock x n ──> 16² ──DownBlock──> 8²
                                          │                 ├─ 1x1 conv ─────────────┐
                                          │                 ├─ <e_y, f> per position ─┴─> 8x8 logits
                                          │                 └─ resize decoder ──> (R/2)² image
                                          └─ quadrant (8²) ── crop decoder ─────> (R/2)² image
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigError, DomainError
from .generator import LRELU_SLOPE, SUPPORTED_RESOLUTIONS, scale_channels
from .trainutils import apply_spectral_norm

DEFAULT_D_CHANNELS = {256: 32, 128: 64, 64: 128, 32: 256, 16: 512, 8: 512}
DEFAULT_DECODER_CHANNELS = {16: 256, 32: 128, 64: 64, 128: 32}


@dataclass
class DiscriminatorSpec:
    resolution: int = 256
    num_classes: int = 5
    width: float = 1.0
    channel_schedule: Dict[int, int] = field(default_factory=lambda: dict(DEFAULT_D_CHANNELS))
    decoder_channels: Dict[int, int] = field(default_factory=lambda: dict(DEFAULT_DECODER_CHANNELS))
    use_patchgan: bool = True
    spectral_norm: bool = True

    def __post_init__(self):
        self.channel_schedule = {int(k): int(v) for k, v in self.channel_schedule.items()}
        self.decoder_channels = {int(k): int(v) for k, v in self.decoder_channels.items()}
        if self.resolution not in SUPPORTED_RESOLUTIONS:
            raise ConfigError(f"resolution must be one of {SUPPORTED_RESOLUTIONS}, got {self.resolution}")
        res = self.resolution
        while res >= 8:
            if res not in self.channel_schedule:
                raise ConfigError(f"channel_schedule is missing resolution {res}")
            res //= 2
        res = 16
        while res <= self.resolution // 2:
            if res not in self.decoder_channels:
                raise ConfigError(f"decoder_channels is missing resolution {res}")
            res *= 2

    def channels(self, res: int) -> int:
        return scale_channels(self.channel_schedule[res], self.width)

    @property
    def num_down_blocks(self) -> int:
        return int(math.log2(self.resolution // 8))

    @property
    def proj_dim(self) -> int:
        return self.channels(8)


class EncodeResult(NamedTuple):
    feat16: Tensor
    feat8: Tensor


class DownBlock(nn.Module):
    """Residual downsampling: (conv3x3/2 -> LReLU -> conv3x3) + (avgpool2 -> conv1x1), then LReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1)

    def main(self, x: Tensor) -> Tensor:
        return self.conv2(F.leaky_relu(self.conv1(x), LRELU_SLOPE))

    def shortcut(self, x: Tensor) -> Tensor:
        return self.skip(F.avg_pool2d(x, 2))

    def forward(self, x: Tensor) -> Tensor:
        return F.leaky_relu(self.main(x) + self.shortcut(x), LRELU_SLOPE)


class Decoder(nn.Module):
    """8x8 feature map -> image at ``out_res`` via (nearest x2, conv3x3, LReLU) stages."""

    def __init__(self, in_ch: int, out_res: int, channels: Dict[int, int], width: float):
        super().__init__()
        layers = []
        res, ch = 8, in_ch
        while res < out_res:
            res *= 2
            out_ch = scale_channels(channels[res], width)
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch, out_ch, 3, padding=1), nn.LeakyReLU(LRELU_SLOPE)]
            ch = out_ch
        layers += [nn.Conv2d(ch, 3, 3, padding=1), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, f: Tensor) -> Tensor:
        if f.shape[-2:] != (8, 8):
            raise DomainError(f"decoder expects an 8x8 feature map, got {tuple(f.shape[-2:])}")
        return self.net(f)


def quadrant_slice(q: int, size: int):
    """Row/column slices of quadrant ``q`` (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right)."""
    if q not in (0, 1, 2, 3):
        raise DomainError(f"quadrant must be 0..3, got {q}")
    half = size // 2
    r, c = divmod(q, 2)
    return slice(r * half, (r + 1) * half), slice(c * half, (c + 1) * half)


def patch_logits(feat8: Tensor, head: nn.Module) -> Tensor:
    if isinstance(head, nn.Conv2d):
        return head(feat8).squeeze(1)
    # global-sum pooling variant
    return head(feat8.sum(dim=(2, 3))).view(-1, 1, 1)


def project_class(feat8: Tensor, y: Tensor, embed: nn.Embedding, pooled: bool = False) -> Tensor:
    y = torch.as_tensor(y, dtype=torch.long)
    K = embed.num_embeddings
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= K):
        raise DomainError(f"class labels must lie in [0, {K}), got {y.tolist()}")
    e = embed(y)
    if pooled:
        return (e * feat8.sum(dim=(2, 3))).sum(dim=1).view(-1, 1, 1)
    return torch.einsum("bc,bchw->bhw", e, feat8)


class Discriminator(nn.Module):
    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        R = spec.resolution
        self.from_rgb = nn.Conv2d(3, spec.channels(R), 3, padding=1)
        self.blocks = nn.ModuleList()
        res = R
        for _ in range(spec.num_down_blocks):
            self.blocks.append(DownBlock(spec.channels(res), spec.channels(res // 2)))
            res //= 2
        c8, c16 = spec.channels(8), spec.channels(16)
        if spec.use_patchgan:
            self.head = nn.Conv2d(c8, 1, 1)
        else:
            self.head = nn.Linear(c8, 1)
        self.embed = nn.Embedding(spec.num_classes, spec.proj_dim)
        nn.init.normal_(self.embed.weight, std=0.02)
        self.dec_resize = Decoder(c8, R // 2, spec.decoder_channels, spec.width)
        self.dec_crop = Decoder(c16, R // 2, spec.decoder_channels, spec.width)
        if spec.spectral_norm:
            apply_spectral_norm(self)

    def encode(self, img: Tensor) -> EncodeResult:
        R = self.spec.resolution
        if img.dim() != 4 or img.shape[1] != 3 or img.shape[-2:] != (R, R):
            raise DomainError(f"expected images [B, 3, {R}, {R}], got {tuple(img.shape)}")
        x = F.leaky_relu(self.from_rgb(img), LRELU_SLOPE)
        feat16 = None
        for block in self.blocks:
            x = block(x)
            if x.shape[-1] == 16:
                feat16 = x
        feat8 = x
        return EncodeResult(feat16, feat8)

    def logits(self, feat8: Tensor, y: Tensor) -> Tensor:
        pooled = not self.spec.use_patchgan
        return patch_logits(feat8, self.head) + project_class(feat8, y, self.embed, pooled=pooled)

    def forward(self, img: Tensor, y: Tensor, return_features: bool = False):
        enc = self.encode(img)
        out = self.logits(enc.feat8, y)
        if return_features:
            return out, enc
        return out

    def decode_resize(self, feat8: Tensor) -> Tensor:
        return self.dec_resize(feat8)

    def decode_crop(self, feat16: Tensor, quadrant: int) -> Tensor:
        rows, cols = quadrant_slice(quadrant, feat16.shape[-1])
        return self.dec_crop(feat16[:, :, rows, cols])
