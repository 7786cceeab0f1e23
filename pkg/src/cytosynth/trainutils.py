"""Spectral normalization, weight EMA and differentiable augmentation."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import FrozenSet, Iterable, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor
from torch.nn.utils import parametrize

from .errors import ConfigError, DomainError

SIGMA_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# spectral normalization


@dataclass
class PowerIterState:
    u: Tensor
    n_iters: int = 1

    def __post_init__(self):
        if self.n_iters < 1:
            raise DomainError("n_iters must be >= 1")


def _l2normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    return v / (v.norm() + eps)


def init_power_state(weight: Tensor, n_iters: int = 1, generator: Optional[torch.Generator] = None) -> PowerIterState:
    rows = weight.shape[0]
    u = torch.randn(rows, generator=generator, dtype=weight.dtype)
    return PowerIterState(_l2normalize(u), n_iters)


def spectral_normalize(weight: Tensor, state: PowerIterState, update: bool = True) -> Tuple[Tensor, PowerIterState]:
    """Divide ``weight`` by a power-iteration estimate of its top singular value.

    The weight is viewed as ``[out, everything-else]``. With ``update=False`` the
    stored left vector is used as is (evaluation mode). Gradients flow through
    sigma's dependence on ``weight``; the singular vectors are treated as constants.
    """
    mat = weight.reshape(weight.shape[0], -1)
    with torch.no_grad():
        u = state.u
        n = state.n_iters if update else 0
        for _ in range(n):
            v = _l2normalize(mat.t() @ u)
            u = _l2normalize(mat @ v)
        v = _l2normalize(mat.t() @ u)
        u_new = u
    sigma = torch.dot(u_new, mat @ v)
    if sigma.detach().abs() < SIGMA_FLOOR:
        return weight, state
    return weight / sigma, PowerIterState(u_new.clone(), state.n_iters)


class SpectralNorm(nn.Module):
    """Parametrization that re-normalizes its weight on every access."""

    def __init__(self, weight: Tensor, n_iters: int = 1, n_warmup: int = 15):
        super().__init__()
        self.n_iters = n_iters
        # warm start so the first training forward already sees a sensible sigma
        state = init_power_state(weight.detach(), n_warmup)
        _, state = spectral_normalize(weight.detach(), state)
        self.register_buffer("u", state.u)

    def forward(self, weight: Tensor) -> Tensor:
        w, state = spectral_normalize(weight, PowerIterState(self.u, self.n_iters), update=self.training)
        if self.training:
            with torch.no_grad():
                self.u.copy_(state.u)
        return w


def apply_spectral_norm(module: nn.Module, n_iters: int = 1) -> nn.Module:
    """Attach :class:`SpectralNorm` to every conv and linear weight under ``module``."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear, nn.ConvTranspose2d)) and not parametrize.is_parametrized(m, "weight"):
            parametrize.register_parametrization(m, "weight", SpectralNorm(m.weight, n_iters))
    return module


# ---------------------------------------------------------------------------
# EMA


TensorsOrModule = Union[nn.Module, Iterable[Tensor]]


def _tensors(x: TensorsOrModule):
    if isinstance(x, nn.Module):
        return [t for _, t in x.state_dict(keep_vars=True).items()]
    return list(x)


@torch.no_grad()
def ema_update(ema: TensorsOrModule, current: TensorsOrModule, decay: float = 0.999):
    """In place ``ema <- decay * ema + (1 - decay) * current``. Returns ``ema``.

    Integer tensors (counters and the like) are copied rather than averaged.
    """
    if not 0.0 <= decay < 1.0:
        raise DomainError(f"decay must lie in [0, 1), got {decay}")
    ema_t, cur_t = _tensors(ema), _tensors(current)
    if len(ema_t) != len(cur_t):
        raise DomainError("EMA and current weights hold different numbers of tensors")
    for e, c in zip(ema_t, cur_t):
        if e.shape != c.shape:
            raise DomainError(f"shape mismatch: {tuple(e.shape)} vs {tuple(c.shape)}")
        if e.is_floating_point():
            e.mul_(decay).add_(c.detach(), alpha=1.0 - decay)
        else:
            e.copy_(c)
    return ema


# ---------------------------------------------------------------------------
# differentiable augmentation

AUGMENTATIONS = ("color", "translation", "cutout")


@dataclass(frozen=True)
class AugmentPolicy:
    enabled: FrozenSet[str] = field(default_factory=lambda: frozenset(AUGMENTATIONS))
    brightness: float = 0.5
    saturation: Tuple[float, float] = (0.0, 2.0)
    contrast: Tuple[float, float] = (0.5, 1.5)
    translation: float = 0.125
    cutout: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "enabled", frozenset(self.enabled))
        unknown = self.enabled - set(AUGMENTATIONS)
        if unknown:
            raise ConfigError(f"unknown augmentations {sorted(unknown)}; choose from {AUGMENTATIONS}")
        if not 0 <= self.brightness <= 0.5:
            raise ConfigError("brightness shift must lie in [0, 0.5]")
        lo, hi = self.saturation
        if not 0 <= lo <= hi <= 2:
            raise ConfigError("saturation range must lie in [0, 2]")
        lo, hi = self.contrast
        if not 0.5 <= lo <= hi <= 1.5:
            raise ConfigError("contrast range must lie in [0.5, 1.5]")
        if not 0 <= self.translation <= 0.125:
            raise ConfigError("translation must be at most 1/8 of the extent")
        if not 0 <= self.cutout <= 0.5:
            raise ConfigError("cutout size must be at most 1/2 of the extent")

    @classmethod
    def parse(cls, text: str) -> "AugmentPolicy":
        names = [p.strip() for p in text.split(",") if p.strip()]
        return cls(enabled=frozenset(names))

    def __str__(self):
        return ",".join(a for a in AUGMENTATIONS if a in self.enabled)


def adjust_brightness(x: Tensor, shift: Tensor) -> Tensor:
    return x + shift.view(-1, 1, 1, 1)


def adjust_saturation(x: Tensor, factor: Tensor) -> Tensor:
    mean = x.mean(dim=1, keepdim=True)
    return (x - mean) * factor.view(-1, 1, 1, 1) + mean


def adjust_contrast(x: Tensor, factor: Tensor) -> Tensor:
    mean = x.mean(dim=(1, 2, 3), keepdim=True)
    return (x - mean) * factor.view(-1, 1, 1, 1) + mean


def translate(x: Tensor, dy: Tensor, dx: Tensor) -> Tensor:
    """Shift each sample by integer pixel offsets, filling with zeros."""
    B, C, H, W = x.shape
    rows = torch.arange(H).view(1, H, 1) - dy.view(B, 1, 1)
    cols = torch.arange(W).view(1, 1, W) - dx.view(B, 1, 1)
    valid = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
    rows = rows.clamp(0, H - 1).expand(B, H, W)
    cols = cols.clamp(0, W - 1).expand(B, H, W)
    idx = (rows * W + cols).view(B, 1, H * W).expand(B, C, H * W)
    out = x.reshape(B, C, H * W).gather(2, idx).view(B, C, H, W)
    return out * valid.unsqueeze(1).to(x.dtype)


def cutout_mask(shape, cy: Tensor, cx: Tensor, size: Tuple[int, int]) -> Tensor:
    """Mask with a ``size`` square of zeros centred at (cy, cx), clipped at borders."""
    B, _, H, W = shape
    rows = torch.arange(H).view(1, H, 1)
    cols = torch.arange(W).view(1, 1, W)
    top = (cy - size[0] // 2).view(B, 1, 1)
    left = (cx - size[1] // 2).view(B, 1, 1)
    inside = (rows >= top) & (rows < top + size[0]) & (cols >= left) & (cols < left + size[1])
    return (~inside).unsqueeze(1)


def _uniform(n: int, lo: float, hi: float, g: Optional[torch.Generator]) -> Tensor:
    return torch.rand(n, generator=g) * (hi - lo) + lo


def diff_augment(x: Tensor, policy: AugmentPolicy, generator: Optional[torch.Generator] = None) -> Tensor:
    """Randomly jitter colour, translate and cut out, independently per sample.

    Every operation is differentiable with respect to the pixels of ``x``.
    Draws come from ``generator`` so a fixed generator state reproduces the output.
    """
    if not policy.enabled:
        return x
    B, _, H, W = x.shape
    g = generator
    if "color" in policy.enabled:
        x = adjust_brightness(x, _uniform(B, -policy.brightness, policy.brightness, g).to(x.dtype))
        x = adjust_saturation(x, _uniform(B, *policy.saturation, g).to(x.dtype))
        x = adjust_contrast(x, _uniform(B, *policy.contrast, g).to(x.dtype))
    if "translation" in policy.enabled:
        sy, sx = int(H * policy.translation + 0.5), int(W * policy.translation + 0.5)
        dy = torch.randint(-sy, sy + 1, (B,), generator=g)
        dx = torch.randint(-sx, sx + 1, (B,), generator=g)
        x = translate(x, dy, dx)
    if "cutout" in policy.enabled:
        size = (int(H * policy.cutout + 0.5), int(W * policy.cutout + 0.5))
        cy = torch.randint(0, H + (1 - size[0] % 2), (B,), generator=g)
        cx = torch.randint(0, W + (1 - size[1] % 2), (B,), generator=g)
        x = x * cutout_mask(x.shape, cy, cx, size).to(x.dtype)
    return x
