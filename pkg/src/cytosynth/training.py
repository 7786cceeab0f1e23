"""
Adversarial training loop, checkpoints and sampling.

Randomness inside a step is drawn from a generator seeded by ``(seed, iteration)``,
so a run resumed from a checkpoint replays exactly the same batches, latents,
labels, augmentations and crop quadrants as an uninterrupted one.

Checkpoint layout (one directory per checkpoint)::

    manifest.json        format_version, iteration, config, class_names,
                         label_freq, last metrics, optimizer hyperparameters
    state.safetensors    named float/int arrays:
                           G/<param>, G_ema/<param>, D/<param or buffer>,
                           optG/<index>/<exp_avg|exp_avg_sq|step>, optD/...

``state.safetensors`` uses the safetensors container: an 8-byte little-endian
header length N, N bytes of JSON header (name -> dtype, shape, byte offsets),
then the raw little-endian tensor bytes.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional

import numpy as np
import torch
import torch.nn as nn
from PIL import Image
from safetensors.torch import load_file, save_file
from torch import Tensor

from .data import LabeledImageSet, make_targets, to_uint8
from .discriminator import Discriminator, DiscriminatorSpec
from .errors import ConfigError, DivergenceError, DomainError, StateError
from .generator import Generator, GeneratorSpec, sample_latents
from .losses import LossBreakdown, gradient_penalty, hinge_d, hinge_g, recon_loss, total_d_loss
from .trainutils import AugmentPolicy, diff_augment, ema_update

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
METRIC_COLUMNS = ["iter", "adv_d", "adv_g", "recon", "r1", "total_d", "secs"]


@dataclass
class TrainConfig:
    lr: float = 2.5e-4
    batch_size: int = 64
    total_iters: int = 100_000
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    lambda_reg: float = 0.01
    ema_decay: float = 0.999
    resolution: int = 256
    width: float = 1.0
    seed: int = 0
    use_patchgan: bool = True
    use_mapping: bool = True
    use_sgc: bool = True
    use_recon: bool = True
    spectral_norm: bool = True
    augment: str = "color,translation,cutout"
    fake_labels: str = "empirical"
    checkpoint_every: int = 1000
    sample_grid: int = 16

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.lambda_reg < 0:
            raise ConfigError("lambda_reg must be non-negative")
        if self.total_iters < 0:
            raise ConfigError("total_iters must be non-negative")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be >= 1")
        if self.fake_labels not in ("empirical", "uniform"):
            raise ConfigError("fake_labels must be 'empirical' or 'uniform'")
        if self.sample_grid < 1:
            raise ConfigError("sample_grid must be >= 1")
        AugmentPolicy.parse(self.augment)
        # resolution and width are checked by the network specs
        self.generator_spec(1)
        self.discriminator_spec(1)

    @property
    def policy(self) -> AugmentPolicy:
        return AugmentPolicy.parse(self.augment)

    def generator_spec(self, num_classes: int) -> GeneratorSpec:
        return GeneratorSpec(resolution=self.resolution, num_classes=num_classes, width=self.width,
                             use_mapping=self.use_mapping, use_sgc=self.use_sgc)

    def discriminator_spec(self, num_classes: int) -> DiscriminatorSpec:
        return DiscriminatorSpec(resolution=self.resolution, num_classes=num_classes, width=self.width,
                                 use_patchgan=self.use_patchgan, spectral_norm=self.spectral_norm)


@dataclass
class StepMetrics:
    iter: int
    adv_d: float
    adv_g: float
    recon: float
    r1: float
    total_d: float
    secs: float
    real_logit: float = 0.0
    fake_logit: float = 0.0

    @property
    def losses(self) -> LossBreakdown:
        return LossBreakdown(self.adv_d, self.adv_g, self.recon, self.r1, self.total_d)

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in (self.adv_d, self.adv_g, self.recon, self.r1, self.total_d))

    def row(self) -> Dict[str, object]:
        return {k: getattr(self, k) for k in METRIC_COLUMNS}


def step_generator(seed: int, iteration: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed) * 1_000_003 + int(iteration))


def label_frequencies(labels: Tensor, num_classes: int) -> Tensor:
    counts = torch.bincount(labels, minlength=num_classes).double()
    return counts / counts.sum()


def sample_fake_labels(freq: Tensor, n: int, generator: Optional[torch.Generator] = None) -> Tensor:
    return torch.multinomial(freq.float(), n, replacement=True, generator=generator)


class TrainState:
    """Networks, EMA copy, optimizers and the iteration counter."""

    def __init__(self, cfg: TrainConfig, num_classes: int, class_names: Optional[List[str]] = None,
                 label_freq: Optional[Tensor] = None):
        self.cfg = cfg
        self.num_classes = num_classes
        self.class_names = list(class_names) if class_names else [str(k) for k in range(num_classes)]
        self.label_freq = label_freq if label_freq is not None else torch.full((num_classes,), 1.0 / num_classes, dtype=torch.float64)
        torch.manual_seed(cfg.seed)
        self.G = Generator(cfg.generator_spec(num_classes))
        self.D = Discriminator(cfg.discriminator_spec(num_classes))
        self.G_ema = copy.deepcopy(self.G).eval()
        for p in self.G_ema.parameters():
            p.requires_grad_(False)
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        self.opt_G = torch.optim.Adam(self.G.parameters(), lr=cfg.lr, betas=betas)
        self.opt_D = torch.optim.Adam(self.D.parameters(), lr=cfg.lr, betas=betas)
        self.iteration = 0

    def fake_label_freq(self) -> Tensor:
        if self.cfg.fake_labels == "uniform":
            return torch.full((self.num_classes,), 1.0 / self.num_classes, dtype=torch.float64)
        return self.label_freq

    # -- checkpointing -----------------------------------------------------

    def tensors(self) -> Dict[str, Tensor]:
        out = {}
        for prefix, module in (("G", self.G), ("G_ema", self.G_ema), ("D", self.D)):
            for k, v in module.state_dict().items():
                out[f"{prefix}/{k}"] = v.detach().clone().contiguous()
        for prefix, opt in (("optG", self.opt_G), ("optD", self.opt_D)):
            for idx, st in opt.state_dict()["state"].items():
                for k, v in st.items():
                    out[f"{prefix}/{idx}/{k}"] = torch.as_tensor(v).detach().clone().contiguous()
        return out

    def save(self, path, metrics: Optional[StepMetrics] = None) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        save_file(self.tensors(), str(path / "state.safetensors"))
        manifest = {
            "format_version": FORMAT_VERSION,
            "iteration": self.iteration,
            "config": asdict(self.cfg),
            "num_classes": self.num_classes,
            "class_names": self.class_names,
            "label_freq": self.label_freq.tolist(),
            "rng": {"kind": "per-step", "seed": self.cfg.seed, "next_iteration": self.iteration + 1},
            # wall time stays in metrics.csv so checkpoints of identical runs are byte-identical
            "metrics": {k: v for k, v in metrics.row().items() if k != "secs"} if metrics else None,
            "optimizers": {
                "G": self.opt_G.state_dict()["param_groups"],
                "D": self.opt_D.state_dict()["param_groups"],
            },
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path, cfg: Optional[TrainConfig] = None) -> "TrainState":
        path = Path(path)
        mpath = path / "manifest.json"
        if not mpath.exists():
            raise StateError(f"no checkpoint manifest at {mpath}")
        manifest = json.loads(mpath.read_text())
        if manifest.get("format_version") != FORMAT_VERSION:
            raise StateError(f"unsupported checkpoint format {manifest.get('format_version')}")
        saved_cfg = TrainConfig(**manifest["config"])
        if cfg is None:
            cfg = saved_cfg
        state = cls(cfg, manifest["num_classes"], manifest["class_names"],
                    torch.tensor(manifest["label_freq"], dtype=torch.float64))
        tensors = load_file(str(path / "state.safetensors"))
        for prefix, module in (("G", state.G), ("G_ema", state.G_ema), ("D", state.D)):
            sd = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + "/")}
            module.load_state_dict(sd)
        for prefix, opt, groups in (("optG", state.opt_G, manifest["optimizers"]["G"]),
                                    ("optD", state.opt_D, manifest["optimizers"]["D"])):
            st: Dict[int, Dict[str, Tensor]] = {}
            for k, v in tensors.items():
                if k.startswith(prefix + "/"):
                    _, idx, name = k.split("/", 2)
                    st.setdefault(int(idx), {})[name] = v
            opt.load_state_dict({"state": st, "param_groups": groups})
        state.iteration = manifest["iteration"]
        return state


def _batch(data: LabeledImageSet, batch_size: int, g: torch.Generator):
    idx = torch.randperm(len(data), generator=g)[:batch_size]
    if len(idx) < batch_size:
        idx = torch.randint(0, len(data), (batch_size,), generator=g)
    return data.images[idx], data.labels[idx]


def train_step(state: TrainState, real: Tensor, labels: Tensor, g: Optional[torch.Generator] = None) -> StepMetrics:
    """One discriminator update followed by one generator update and an EMA update."""
    cfg = state.cfg
    G, D = state.G, state.D
    policy = cfg.policy
    if g is None:
        g = step_generator(cfg.seed, state.iteration + 1)
    t0 = time.perf_counter()
    B = real.shape[0]

    # -- discriminator
    for p in D.parameters():
        p.requires_grad_(True)
    z = sample_latents(B, g)
    y_fake = sample_fake_labels(state.fake_label_freq(), B, g)
    with torch.no_grad():
        fake = G(z, y_fake)
    x = real.detach().clone().requires_grad_(True)
    real_aug = diff_augment(x, policy, g)
    fake_aug = diff_augment(fake, policy, g)
    logit_real, enc = D(real_aug, labels, return_features=True)
    logit_fake = D(fake_aug, y_fake)
    adv_d = hinge_d(logit_real, logit_fake)
    quadrant = int(torch.randint(0, 4, (1,), generator=g))
    if cfg.use_recon:
        targets = make_targets(real_aug.detach(), quadrant)
        recon = recon_loss(D.decode_resize(enc.feat8), targets.resized) + \
            recon_loss(D.decode_crop(enc.feat16, quadrant), targets.cropped)
    else:
        recon = torch.zeros(())
    if cfg.lambda_reg > 0:
        r1 = gradient_penalty(logit_real, x)
    else:
        r1 = torch.zeros(())
    loss_d = total_d_loss(adv_d, recon, r1, cfg.lambda_reg)
    state.opt_D.zero_grad(set_to_none=True)
    loss_d.backward()
    state.opt_D.step()

    # -- generator
    for p in D.parameters():
        p.requires_grad_(False)
    z = sample_latents(B, g)
    y_gen = sample_fake_labels(state.fake_label_freq(), B, g)
    fake = G(z, y_gen)
    adv_g = hinge_g(D(diff_augment(fake, policy, g), y_gen))
    state.opt_G.zero_grad(set_to_none=True)
    adv_g.backward()
    state.opt_G.step()
    for p in D.parameters():
        p.requires_grad_(True)
    ema_update(state.G_ema, G, cfg.ema_decay)

    state.iteration += 1
    metrics = StepMetrics(
        iter=state.iteration,
        adv_d=adv_d.item(),
        adv_g=adv_g.item(),
        recon=recon.item(),
        r1=r1.item(),
        total_d=loss_d.item(),
        secs=time.perf_counter() - t0,
        real_logit=logit_real.mean().item(),
        fake_logit=logit_fake.mean().item(),
    )
    if not metrics.finite():
        raise DivergenceError(f"non-finite loss at iteration {state.iteration}: {metrics.row()}", metrics)
    return metrics


@torch.no_grad()
def sample(G_ema: Generator, cls: int, n: int, seed: int, chunk: int = 64) -> Tensor:
    """``n`` images of class ``cls``; latents depend only on ``seed``."""
    K = G_ema.spec.num_classes
    if not 0 <= cls < K:
        raise DomainError(f"class index must lie in [0, {K}), got {cls}")
    was_training = G_ema.training
    G_ema.eval()
    z = sample_latents(n, torch.Generator().manual_seed(int(seed)))
    y = torch.full((n,), cls, dtype=torch.long)
    out = torch.cat([G_ema(z[i:i + chunk], y[i:i + chunk]) for i in range(0, n, chunk)]) if n else \
        torch.empty(0, 3, G_ema.spec.resolution, G_ema.spec.resolution)
    G_ema.train(was_training)
    return out


def mosaic(images: Tensor, ncol: Optional[int] = None, pad: int = 2) -> np.ndarray:
    n = len(images)
    ncol = ncol or int(math.ceil(math.sqrt(n)))
    nrow = int(math.ceil(n / ncol))
    H, W = images.shape[-2:]
    canvas = np.full((nrow * (H + pad) + pad, ncol * (W + pad) + pad, 3), 255, np.uint8)
    for i, img in enumerate(images):
        r, c = divmod(i, ncol)
        canvas[pad + r * (H + pad):pad + r * (H + pad) + H, pad + c * (W + pad):pad + c * (W + pad) + W] = to_uint8(img)
    return canvas


def write_sample_grids(state: TrainState, out_dir: Path) -> None:
    d = out_dir / "samples"
    d.mkdir(parents=True, exist_ok=True)
    for k in range(state.num_classes):
        imgs = sample(state.G_ema, k, state.cfg.sample_grid, seed=state.cfg.seed)
        Image.fromarray(mosaic(imgs)).save(d / f"iter_{state.iteration}_class_{k}.png", format="PNG")


def _read_metric_rows(path: Path, upto: int) -> List[Dict[str, str]]:
    if not path.exists():
        return []
    with path.open() as fh:
        return [r for r in csv.DictReader(fh) if int(r["iter"]) <= upto]


def train(cfg: TrainConfig, data: LabeledImageSet, out_dir, resume=None,
          on_step=None) -> List[StepMetrics]:
    """Run until ``cfg.total_iters``; returns the metrics of the steps run here.

    Writes ``metrics.csv``, ``checkpoints/iter_<N>/`` (including ``iter_0``
    for a fresh run) and ``samples/iter_<N>_class_<k>.png`` under ``out_dir``.
    """
    if len(data) == 0:
        raise DomainError("training data is empty")
    missing = [data.class_names[k] for k, c in enumerate(data.class_counts()) if c == 0]
    if missing:
        raise DomainError(f"classes without training images: {missing}")
    if data.resolution != cfg.resolution:
        raise ConfigError(f"data resolution {data.resolution} differs from config resolution {cfg.resolution}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    ckpt_dir = out_dir / "checkpoints"
    metrics_path = out_dir / "metrics.csv"

    if resume is not None:
        state = TrainState.load(resume, cfg)
        rows = _read_metric_rows(metrics_path, state.iteration)
    else:
        state = TrainState(cfg, data.num_classes, data.class_names, label_frequencies(data.labels, data.num_classes))
        rows = []
        state.save(ckpt_dir / "iter_0")
        write_sample_grids(state, out_dir)

    history: List[StepMetrics] = []
    with metrics_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
        fh.flush()
        while state.iteration < cfg.total_iters:
            g = step_generator(cfg.seed, state.iteration + 1)
            real, labels = _batch(data, cfg.batch_size, g)
            try:
                m = train_step(state, real, labels, g)
            except DivergenceError as exc:
                path = state.save(ckpt_dir / f"diverged_iter_{state.iteration}",
                                  exc.metrics)
                log.error("training diverged; state saved to %s", path)
                raise
            writer.writerow(m.row())
            fh.flush()
            history.append(m)
            if on_step is not None:
                on_step(m)
            if state.iteration % cfg.checkpoint_every == 0 or state.iteration == cfg.total_iters:
                state.save(ckpt_dir / f"iter_{state.iteration}", m)
                write_sample_grids(state, out_dir)
                log.info("iter %d adv_d %.4f adv_g %.4f recon %.4f r1 %.4f", m.iter, m.adv_d, m.adv_g, m.recon, m.r1)
    return history


def config_from_dict(values: Dict[str, object]) -> TrainConfig:
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return TrainConfig(**values)
