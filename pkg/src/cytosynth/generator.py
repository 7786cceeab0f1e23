"""
Class-conditional generator.

    z (128) ──convT──> 4x4 seed ──UpBlock──> 8 ──> ... ──> R ──conv3x3+tanh──> image
    y (one-hot) ──mapping (4 x FC+LReLU)──> c (128) ──affine per block──> (y_s, y_b)

Skip-layer Global Context (SGC) connections attention-pool a low resolution
feature map into a context vector, squeeze it through a small bottleneck and
gate the channels of a higher resolution feature map with it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigError, DomainError

Z_DIM = 128
LRELU_SLOPE = 0.2

DEFAULT_G_CHANNELS = {4: 512, 8: 512, 16: 256, 32: 128, 64: 128, 128: 64, 256: 32}
DEFAULT_SGC_PAIRS = [(8, 64), (16, 128), (32, 256)]
SUPPORTED_RESOLUTIONS = (32, 64, 128, 256)


def scale_channels(ch: int, width: float, minimum: int = 8) -> int:
    return max(minimum, int(round(ch * width)))


@dataclass
class GeneratorSpec:
    resolution: int = 256
    num_classes: int = 5
    width: float = 1.0
    channel_schedule: Dict[int, int] = field(default_factory=lambda: dict(DEFAULT_G_CHANNELS))
    sgc_pairs: List[Tuple[int, int]] = field(default_factory=lambda: list(DEFAULT_SGC_PAIRS))
    use_mapping: bool = True
    use_sgc: bool = True
    z_dim: int = Z_DIM

    def __post_init__(self):
        self.channel_schedule = {int(k): int(v) for k, v in self.channel_schedule.items()}
        self.sgc_pairs = [(int(a), int(b)) for a, b in self.sgc_pairs]
        self.validate()

    def validate(self):
        if self.resolution not in SUPPORTED_RESOLUTIONS:
            raise ConfigError(f"resolution must be one of {SUPPORTED_RESOLUTIONS}, got {self.resolution}")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.width <= 0:
            raise ConfigError("width must be positive")
        res = 4
        while res <= self.resolution:
            if res not in self.channel_schedule:
                raise ConfigError(f"channel_schedule is missing resolution {res}")
            res *= 2
        for low, high in self.sgc_pairs:
            if not low < high:
                raise ConfigError(f"sgc pair {(low, high)} must have low < high")
            if low not in self.channel_schedule or high not in self.channel_schedule:
                raise ConfigError(f"sgc pair {(low, high)} not covered by channel_schedule")

    def channels(self, res: int) -> int:
        return scale_channels(self.channel_schedule[res], self.width)

    @property
    def num_up_blocks(self) -> int:
        return int(math.log2(self.resolution // 4))

    def active_sgc_pairs(self) -> List[Tuple[int, int]]:
        """SGC pairs that fit inside the configured output resolution."""
        if not self.use_sgc:
            return []
        return [(lo, hi) for lo, hi in self.sgc_pairs if hi <= self.resolution]


def one_hot(y: Tensor, num_classes: int) -> Tensor:
    y = torch.as_tensor(y, dtype=torch.long)
    if y.numel() and (int(y.min()) < 0 or int(y.max()) >= num_classes):
        raise DomainError(f"class labels must lie in [0, {num_classes}), got {y.tolist()}")
    return F.one_hot(y, num_classes).float()


class MappingNetwork(nn.Module):
    """One-hot class label -> class embedding (same size as z)."""

    def __init__(self, num_classes: int, dim: int = Z_DIM, n_layers: int = 4):
        super().__init__()
        self.num_classes = num_classes
        layers = []
        in_dim = num_classes
        for _ in range(n_layers):
            layers += [nn.Linear(in_dim, dim), nn.LeakyReLU(LRELU_SLOPE)]
            in_dim = dim
        self.net = nn.Sequential(*layers)

    def forward(self, y: Tensor) -> Tensor:
        return self.net(one_hot(y, self.num_classes))


def adain(x: Tensor, scale: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Instance-normalize ``x`` per sample and channel, then apply ``scale``/``bias``.

    ``scale`` and ``bias`` are either ``[C]`` (shared over the batch) or ``[B, C]``.
    """
    if eps <= 0:
        raise DomainError("eps must be positive")
    C = x.shape[1]
    if scale.shape[-1] != C or bias.shape[-1] != C:
        raise DomainError(f"AdaIN params have length {scale.shape[-1]}/{bias.shape[-1]}, feature map has {C} channels")
    mean = x.mean(dim=(2, 3), keepdim=True)
    var = x.var(dim=(2, 3), keepdim=True, unbiased=False)
    x = (x - mean) / torch.sqrt(var + eps)
    if scale.dim() == 1:
        scale, bias = scale.unsqueeze(0), bias.unsqueeze(0)
    return x * scale[:, :, None, None] + bias[:, :, None, None]


class UpBlock(nn.Module):
    """nearest x2 -> conv3x3 -> AdaIN -> LeakyReLU."""

    def __init__(self, in_ch: int, out_ch: int, embed_dim: Optional[int]):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.out_ch = out_ch
        if embed_dim is not None:
            self.affine = nn.Linear(embed_dim, 2 * out_ch)
            # start near the identity modulation: y_s ~ 1, y_b ~ 0
            with torch.no_grad():
                self.affine.bias[:out_ch].fill_(1.0)
                self.affine.bias[out_ch:].zero_()
        else:
            self.affine = None
            self.scale = nn.Parameter(torch.ones(out_ch))
            self.bias = nn.Parameter(torch.zeros(out_ch))

    def adain_params(self, c: Optional[Tensor]) -> Tuple[Tensor, Tensor]:
        if self.affine is None:
            return self.scale, self.bias
        y_s, y_b = self.affine(c).chunk(2, dim=1)
        return y_s, y_b

    def forward(self, x: Tensor, c: Optional[Tensor] = None) -> Tensor:
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = self.conv(x)
        y_s, y_b = self.adain_params(c)
        return F.leaky_relu(adain(x, y_s, y_b), LRELU_SLOPE)


class SGC(nn.Module):
    def __init__(self, low_ch: int, high_ch: int, reduction: int = 4):
        super().__init__()
        self.low_ch = low_ch
        self.high_ch = high_ch
        hidden = max(1, low_ch // reduction)
        self.attn = nn.Conv2d(low_ch, 1, 1)
        self.transform = nn.Sequential(
            nn.Linear(low_ch, hidden),
            nn.LayerNorm(hidden),
            nn.ReLU(),
            nn.Linear(hidden, high_ch),
        )

    def pool(self, low: Tensor) -> Tensor:
        """Attention pooling over all spatial positions -> ``[B, C_low]``."""
        return sgc_pool(low, self.attn)

    def gates(self, context: Tensor) -> Tensor:
        if context.shape[1] != self.low_ch:
            raise ConfigError(f"context has {context.shape[1]} channels, SGC expects {self.low_ch}")
        return torch.sigmoid(self.transform(context))

    def merge(self, high: Tensor, context: Tensor) -> Tensor:
        return sgc_apply(high, self.gates(context))

    def forward(self, low: Tensor, high: Tensor) -> Tensor:
        return self.merge(high, self.pool(low))


def sgc_pool(low: Tensor, attn: nn.Conv2d) -> Tensor:
    B, C, H, W = low.shape
    logits = attn(low).view(B, H * W)
    weights = torch.softmax(logits, dim=1)
    return torch.bmm(low.view(B, C, H * W), weights.unsqueeze(2)).squeeze(2)


def sgc_apply(high: Tensor, gate: Tensor) -> Tensor:
    if gate.shape[:2] != high.shape[:2]:
        raise ConfigError(f"gate shape {tuple(gate.shape)} does not match feature map {tuple(high.shape)}")
    return high * gate[:, :, None, None]


class Generator(nn.Module):
    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        embed_dim = spec.z_dim if spec.use_mapping else None
        self.mapping = MappingNetwork(spec.num_classes, spec.z_dim) if spec.use_mapping else None
        if self.mapping is not None:
            assert self.mapping.net[-2].out_features == spec.z_dim, "class embedding must match latent size"

        self.seed = nn.ConvTranspose2d(spec.z_dim, spec.channels(4), 4)
        self.blocks = nn.ModuleList()
        res = 4
        for _ in range(spec.num_up_blocks):
            self.blocks.append(UpBlock(spec.channels(res), spec.channels(res * 2), embed_dim))
            res *= 2
        self.sgc = nn.ModuleDict(
            {str(hi): SGC(spec.channels(lo), spec.channels(hi)) for lo, hi in spec.active_sgc_pairs()}
        )
        self._sgc_low = {hi: lo for lo, hi in spec.active_sgc_pairs()}
        self.to_rgb = nn.Conv2d(spec.channels(spec.resolution), 3, 3, padding=1)

    def embed(self, y: Tensor) -> Optional[Tensor]:
        if self.mapping is None:
            one_hot(y, self.spec.num_classes)  # label validation only
            return None
        return self.mapping(y)

    def forward(self, z: Tensor, y: Tensor) -> Tensor:
        if z.shape[0] != len(y):
            raise DomainError(f"batch sizes differ: z has {z.shape[0]}, y has {len(y)}")
        if z.shape[1] != self.spec.z_dim:
            raise DomainError(f"latent dimension must be {self.spec.z_dim}, got {z.shape[1]}")
        c = self.embed(y)
        x = F.leaky_relu(self.seed(z[:, :, None, None]), LRELU_SLOPE)
        feats = {4: x}
        for block in self.blocks:
            x = block(x, c)
            res = x.shape[-1]
            if res in self._sgc_low:
                x = self.sgc[str(res)](feats[self._sgc_low[res]], x)
            feats[res] = x
        return torch.tanh(self.to_rgb(x))


def sample_latents(n: int, generator: Optional[torch.Generator] = None, z_dim: int = Z_DIM) -> Tensor:
    return torch.randn(n, z_dim, generator=generator)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
