"""Image folders, reconstruction targets and a procedural toy-cell dataset."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import Tensor

from .discriminator import quadrant_slice
from .errors import ConfigError, DomainError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


@dataclass
class LabeledImageSet:
    images: Tensor  # [N, 3, H, W] in [-1, 1]
    labels: Tensor  # [N] int64
    class_names: List[str]

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DomainError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and int(self.labels.max()) >= len(self.class_names):
            raise DomainError("label index exceeds number of class names")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def resolution(self) -> int:
        return self.images.shape[-1]

    def subset(self, index) -> "LabeledImageSet":
        index = torch.as_tensor(index, dtype=torch.long)
        return LabeledImageSet(self.images[index], self.labels[index], list(self.class_names))

    def of_class(self, k: int) -> "LabeledImageSet":
        return self.subset(torch.nonzero(self.labels == k).flatten())

    def class_counts(self) -> List[int]:
        return torch.bincount(self.labels, minlength=self.num_classes).tolist()


def to_unit_range(arr: np.ndarray) -> Tensor:
    """uint8 HWC -> float CHW in [-1, 1]."""
    return torch.from_numpy(arr.astype(np.float32) / 255.0 * 2.0 - 1.0).permute(2, 0, 1).contiguous()


def to_uint8(img: Tensor) -> np.ndarray:
    """float CHW in [-1, 1] -> uint8 HWC."""
    x = ((img.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return x.permute(1, 2, 0).cpu().numpy()


def load_dataset(root, resolution: Optional[int] = None) -> LabeledImageSet:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DomainError(f"no class subdirectories under {root}")
    images, labels = [], []
    for k, d in enumerate(class_dirs):
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DomainError(f"class directory '{d.name}' contains no images")
        for f in files:
            try:
                with Image.open(f) as im:
                    im = im.convert("RGB")
                    if resolution is not None and im.size != (resolution, resolution):
                        im = im.resize((resolution, resolution), Image.BILINEAR)
                    arr = np.asarray(im)
            except (OSError, ValueError) as exc:
                raise DomainError(f"cannot read image file {f}: {exc}") from exc
            images.append(to_unit_range(arr))
            labels.append(k)
    sizes = {tuple(im.shape) for im in images}
    if len(sizes) != 1:
        raise DomainError(f"images have mixed sizes {sorted(sizes)}; pass a resolution to resize")
    return LabeledImageSet(torch.stack(images), torch.tensor(labels, dtype=torch.long), [d.name for d in class_dirs])


def save_png(img: Tensor, path) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def write_dataset(data: LabeledImageSet, root, manifest: Optional[dict] = None) -> None:
    """Write ``<root>/<class_name>/<class_name>_<i>.png`` plus ``manifest.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    counters = [0] * data.num_classes
    for img, y in zip(data.images, data.labels.tolist()):
        name = data.class_names[y]
        d = root / name
        d.mkdir(exist_ok=True)
        save_png(img, d / f"{name}_{counters[y]:05d}.png")
        counters[y] += 1
    info = {"class_names": data.class_names, "counts": counters}
    if manifest:
        info.update(manifest)
    (root / "manifest.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# reconstruction targets


def transform_half_downsample(img: Tensor) -> Tensor:
    H, W = img.shape[-2:]
    if H % 2 or W % 2:
        raise DomainError(f"resolution must be even, got {H}x{W}")
    return F.interpolate(img, size=(H // 2, W // 2), mode="bilinear", align_corners=False)


def transform_quarter_crop(img: Tensor, quadrant: int) -> Tensor:
    rows, cols = quadrant_slice(quadrant, img.shape[-1])
    return img[:, :, rows, cols]


@dataclass
class RealTargetPair:
    resized: Tensor
    cropped: Tensor
    quadrant: int


def make_targets(img: Tensor, quadrant: int) -> RealTargetPair:
    return RealTargetPair(transform_half_downsample(img), transform_quarter_crop(img, quadrant), quadrant)


# ---------------------------------------------------------------------------
# toy cells


@dataclass
class ToySpec:
    num_classes: int = 3
    images_per_class: int = 100
    resolution: int = 64
    nucleus_ratio: Tuple[float, ...] = (0.2, 0.45, 0.7)
    cells_per_image: Tuple[int, int] = (1, 3)
    overlap: bool = True
    seed: int = 0
    class_names: Optional[List[str]] = None

    def __post_init__(self):
        self.nucleus_ratio = tuple(float(r) for r in self.nucleus_ratio)
        self.cells_per_image = tuple(int(c) for c in self.cells_per_image)
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.images_per_class < 1:
            raise ConfigError("images_per_class must be >= 1")
        if self.resolution < 16 or self.resolution & (self.resolution - 1):
            raise ConfigError("resolution must be a power of two >= 16")
        if len(self.nucleus_ratio) != self.num_classes:
            self.nucleus_ratio = default_ratios(self.num_classes)
        if any(b <= a for a, b in zip(self.nucleus_ratio, self.nucleus_ratio[1:])):
            raise ConfigError("nucleus_ratio must be strictly increasing")
        if not all(0 < r < 1 for r in self.nucleus_ratio):
            raise ConfigError("nucleus_ratio entries must lie in (0, 1)")
        lo, hi = self.cells_per_image
        if not 1 <= lo <= hi:
            raise ConfigError("cells_per_image must satisfy 1 <= min <= max")
        if self.class_names is None:
            self.class_names = [f"class{k}" for k in range(self.num_classes)]
        if len(self.class_names) != self.num_classes:
            raise ConfigError("class_names length must equal num_classes")


def default_ratios(k: int) -> Tuple[float, ...]:
    if k == 3:
        return (0.2, 0.45, 0.7)
    return tuple(float(r) for r in np.linspace(0.2, 0.7, k)) if k > 1 else (0.45,)


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = math.cos(theta), math.sin(theta)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def _render_cell_image(rng: np.random.Generator, res: int, ratio: float, spec: ToySpec) -> np.ndarray:
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float32) + 0.5
    bg = np.array([0.92, 0.86, 0.88]) + rng.uniform(-0.04, 0.04, 3)
    img = np.broadcast_to(bg, (res, res, 3)).copy()
    img += rng.normal(0.0, 0.015, (res, res, 3))
    n_cells = int(rng.integers(spec.cells_per_image[0], spec.cells_per_image[1] + 1))
    occupied = np.zeros((res, res), bool)
    for _ in range(n_cells):
        for _attempt in range(20):
            r_cell = res * rng.uniform(0.16, 0.24)
            ry, rx = r_cell * rng.uniform(0.8, 1.0), r_cell * rng.uniform(0.8, 1.0)
            cy, cx = rng.uniform(ry, res - ry), rng.uniform(rx, res - rx)
            theta = rng.uniform(0, math.pi)
            cyto = _ellipse(yy, xx, cy, cx, ry, rx, theta)
            if spec.overlap or not (cyto & occupied).any():
                break
        occupied |= cyto
        cyto_col = np.array([0.72, 0.62, 0.80]) + rng.uniform(-0.05, 0.05, 3)
        img[cyto] = cyto_col + rng.normal(0.0, 0.02, (int(cyto.sum()), 3))
        r = ratio * rng.uniform(0.9, 1.1)
        ny, nx = cy + rng.uniform(-0.1, 0.1) * ry, cx + rng.uniform(-0.1, 0.1) * rx
        nuc = _ellipse(yy, xx, ny, nx, ry * r, rx * r, theta + rng.uniform(-0.3, 0.3))
        nuc_col = np.array([0.28, 0.16, 0.42]) + rng.uniform(-0.04, 0.04, 3)
        img[nuc] = nuc_col + rng.normal(0.0, 0.02, (int(nuc.sum()), 3))
    return (np.clip(img, 0, 1) * 255).round().astype(np.uint8)


def make_toy_dataset(spec: ToySpec) -> LabeledImageSet:
    """Cells whose nucleus-to-cytoplasm size ratio defines the class."""
    images, labels = [], []
    for k in range(spec.num_classes):
        # one stream per class keeps classes independent of each other's counts
        rng = np.random.default_rng([spec.seed, k])
        for _ in range(spec.images_per_class):
            images.append(to_unit_range(_render_cell_image(rng, spec.resolution, spec.nucleus_ratio[k], spec)))
            labels.append(k)
    return LabeledImageSet(torch.stack(images), torch.tensor(labels, dtype=torch.long), list(spec.class_names))


def toy_manifest(spec: ToySpec) -> dict:
    return {"generator": "toy-cells", "toy_spec": asdict(spec), "seed": spec.seed}


def dark_fraction(images: Tensor, dark: float = -0.3, background: float = 0.55) -> Tensor:
    """Fraction of cell pixels that are nucleus-dark, per image.

    Luminance below ``dark`` counts as nucleus, below ``background`` as cell.
    """
    lum = images.mean(dim=1)
    cell = (lum < background).float().sum(dim=(1, 2))
    nuc = (lum < dark).float().sum(dim=(1, 2))
    return nuc / cell.clamp(min=1.0)


def split_per_class(data: LabeledImageSet, n_first: int, seed: int = 0) -> Tuple[LabeledImageSet, LabeledImageSet]:
    """Random per-class split: ``n_first`` images of every class go to the first part."""
    g = torch.Generator().manual_seed(seed)
    first: List[int] = []
    rest: List[int] = []
    for k in range(data.num_classes):
        idx = torch.nonzero(data.labels == k).flatten()
        idx = idx[torch.randperm(len(idx), generator=g)]
        if len(idx) < n_first:
            raise DomainError(f"class {data.class_names[k]} has {len(idx)} images, need {n_first}")
        first += idx[:n_first].tolist()
        rest += idx[n_first:].tolist()
    return data.subset(sorted(first)), data.subset(sorted(rest))


def concat(sets: Sequence[LabeledImageSet]) -> LabeledImageSet:
    names = sets[0].class_names
    for s in sets[1:]:
        if s.class_names != names:
            raise DomainError("cannot concatenate sets with different class names")
    return LabeledImageSet(torch.cat([s.images for s in sets]), torch.cat([s.labels for s in sets]), list(names))
