"""FID and the k-fold classifier-augmentation benchmark."""
from __future__ import annotations

import csv
import hashlib
import io
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .data import LabeledImageSet, concat
from .errors import ConfigError, DomainError, ExtractorUnavailable, NumericalError

CACHE_ENV = "CYTOSYNTH_CACHE_DIR"
EIG_CLAMP = 1e-6


# ---------------------------------------------------------------------------
# feature extractors


class RandomProjectionExtractor(nn.Module):
    """Fixed, randomly initialised conv net. For tests only.

    FIDs computed with it are not comparable to Inception-based numbers.
    """

    extractor_id = "random-projection-v1"

    def __init__(self, dim: int = 64, seed: int = 1234):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        shapes = [(32, 3, 5), (64, 32, 3), (dim, 64, 3)]
        self.weights = nn.ParameterList()
        for out_ch, in_ch, k in shapes:
            w = torch.randn(out_ch, in_ch, k, k, generator=g) * (2.0 / (in_ch * k * k)) ** 0.5
            self.weights.append(nn.Parameter(w, requires_grad=False))
        self.dim = dim

    @torch.no_grad()
    def forward(self, x: Tensor) -> Tensor:
        for w in self.weights:
            x = F.relu(F.conv2d(x, w, stride=2, padding=w.shape[-1] // 2))
        return x.mean(dim=(2, 3))


class InceptionExtractor(nn.Module):
    """Pool3 features of torchvision's Inception-v3, loaded from a local weight file."""

    extractor_id = "inception-v3-pool3"
    WEIGHT_GLOB = "inception_v3*.pth"

    def __init__(self, weight_path=None):
        super().__init__()
        path = Path(weight_path) if weight_path else self.find_weights()
        try:
            from torchvision.models import inception_v3
        except ImportError as exc:  # pragma: no cover
            raise ExtractorUnavailable("torchvision is required for the pretrained extractor") from exc
        net = inception_v3(weights=None, aux_logits=True, init_weights=False)
        net.load_state_dict(torch.load(path, map_location="cpu"))
        net.fc = nn.Identity()
        self.net = net.eval()
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    @classmethod
    def find_weights(cls) -> Path:
        cache = os.environ.get(CACHE_ENV)
        hint = (f"Download torchvision's Inception-v3 weights (inception_v3_google-*.pth) into a directory "
                f"and set {CACHE_ENV} to it, or use --extractor random for test-only FIDs.")
        if not cache:
            raise ExtractorUnavailable(f"{CACHE_ENV} is not set. {hint}")
        found = sorted(Path(cache).glob(cls.WEIGHT_GLOB))
        if not found:
            raise ExtractorUnavailable(f"no {cls.WEIGHT_GLOB} file in {cache}. {hint}")
        return found[0]

    @torch.no_grad()
    def forward(self, x: Tensor) -> Tensor:
        x = F.interpolate((x + 1) / 2, size=(299, 299), mode="bilinear", align_corners=False)
        return self.net((x - self.mean) / self.std)


def get_extractor(name: str) -> nn.Module:
    if name == "random":
        return RandomProjectionExtractor()
    if name == "pretrained":
        return InceptionExtractor()
    raise ConfigError(f"unknown extractor '{name}'; choose 'random' or 'pretrained'")


@torch.no_grad()
def extract_features(images: Iterable[Tensor] | Tensor, extractor: Callable[[Tensor], Tensor], chunk: int = 64) -> np.ndarray:
    """Feature rows in input order. ``images`` is a tensor or an iterable of batches."""
    if isinstance(images, Tensor):
        batches = [images[i:i + chunk] for i in range(0, len(images), chunk)]
    else:
        batches = images
    rows = [extractor(b).double().cpu().numpy() for b in batches]
    if not rows:
        return np.zeros((0, getattr(extractor, "dim", 0)))
    return np.concatenate(rows, axis=0)


# ---------------------------------------------------------------------------
# Frechet distance


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int
    extractor_id: str = ""

    def __post_init__(self):
        if self.count < 2:
            raise DomainError("feature statistics need at least two samples")

    def save(self, path) -> None:
        """``np.savez`` archive with arrays mean, cov, count and extractor_id."""
        with open(path, "wb") as fh:
            np.savez(fh, mean=self.mean, cov=self.cov, count=np.int64(self.count),
                     extractor_id=np.array(self.extractor_id))

    @classmethod
    def load(cls, path) -> "FeatureStats":
        with np.load(path) as z:
            return cls(z["mean"], z["cov"], int(z["count"]), str(z["extractor_id"]))


def compute_stats(features: np.ndarray, extractor_id: str = "") -> FeatureStats:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or len(features) < 2:
        raise DomainError(f"need at least 2 feature rows, got shape {features.shape}")
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / (len(features) - 1)
    return FeatureStats(mean, (cov + cov.T) / 2, len(features), extractor_id)


def _psd_sqrt(m: np.ndarray, what: str) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    tol = EIG_CLAMP * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol:
        raise NumericalError(f"{what} has eigenvalue {vals.min():.3g} below clamp tolerance {-tol:.3g}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def trace_sqrt_product(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """``Tr((cov_a cov_b)^(1/2))`` via the symmetric form ``sqrt(A^½ B A^½)``."""
    ra = _psd_sqrt(cov_a, "first covariance")
    inner = ra @ cov_b @ ra
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    tol = EIG_CLAMP * max(1.0, float(np.abs(vals).max(initial=0.0)))
    if vals.min(initial=0.0) < -tol:
        raise NumericalError(f"covariance product has eigenvalue {vals.min():.3g} below clamp tolerance")
    return float(np.sqrt(np.clip(vals, 0.0, None)).sum())


def fid(a: FeatureStats, b: FeatureStats) -> float:
    if a.mean.shape != b.mean.shape:
        raise DomainError(f"feature dimensions differ: {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_sqrt_product(a.cov, b.cov))
    tol = EIG_CLAMP * max(1.0, float(np.trace(a.cov) + np.trace(b.cov)))
    if value < -tol:
        raise NumericalError(f"Frechet distance came out negative ({value:.3g})")
    return max(value, 0.0)


def stats_for_images(images: Tensor, extractor, extractor_id: str = "", cache_path=None) -> FeatureStats:
    if cache_path is not None and Path(cache_path).exists():
        st = FeatureStats.load(cache_path)
        if st.extractor_id == extractor_id and st.count == len(images):
            return st
    st = compute_stats(extract_features(images, extractor), extractor_id)
    if cache_path is not None:
        st.save(cache_path)
    return st


def fid_report(real: LabeledImageSet, fake: LabeledImageSet, extractor, extractor_id: str = "",
               cache_dir=None) -> Dict[str, float]:
    """Per-class FID (by class name, in class order) plus their ``Mean``."""
    if real.class_names != fake.class_names:
        raise DomainError(f"class sets differ: {real.class_names} vs {fake.class_names}")
    report: Dict[str, float] = {}
    for k, name in enumerate(real.class_names):
        cache = Path(cache_dir) / f"stats_real_{name}.npz" if cache_dir else None
        st_real = stats_for_images(real.of_class(k).images, extractor, extractor_id, cache)
        st_fake = stats_for_images(fake.of_class(k).images, extractor, extractor_id)
        report[name] = fid(st_real, st_fake)
    report["Mean"] = float(np.mean([report[n] for n in real.class_names]))
    return report


# ---------------------------------------------------------------------------
# classification metrics


def confusion_matrix(pred, true, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def per_class_scores(cm: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Precision, recall and F1 per class; 0/0 counts as 0."""
    tp = np.diag(cm).astype(np.float64)
    pred_pos = cm.sum(axis=0).astype(np.float64)
    true_pos = cm.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, pred_pos, out=np.zeros_like(tp), where=pred_pos > 0)
    recall = np.divide(tp, true_pos, out=np.zeros_like(tp), where=true_pos > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    return precision, recall, f1


def classification_metrics(pred, true, num_classes: int) -> Dict[str, float]:
    """Accuracy and macro-averaged precision, recall and F1."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if len(pred) != len(true):
        raise DomainError(f"{len(pred)} predictions for {len(true)} labels")
    if len(true) == 0:
        raise DomainError("no samples to score")
    cm = confusion_matrix(pred, true, num_classes)
    p, r, f = per_class_scores(cm)
    return {
        "accuracy": float(np.trace(cm) / cm.sum()),
        "precision": float(p.mean()),
        "recall": float(r.mean()),
        "f1": float(f.mean()),
    }


# ---------------------------------------------------------------------------
# classifiers


class SmallCNN(nn.Module):
    def __init__(self, num_classes: int, width: int = 16):
        super().__init__()
        chans = [3, width, 2 * width, 4 * width]
        layers = []
        for a, b in zip(chans, chans[1:]):
            layers += [nn.Conv2d(a, b, 3, padding=1), nn.BatchNorm2d(b), nn.ReLU(), nn.MaxPool2d(2)]
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(chans[-1], num_classes)

    def forward(self, x):
        return self.fc(self.features(x).mean(dim=(2, 3)))


def random_flip(x: Tensor, g: torch.Generator) -> Tensor:
    B = x.shape[0]
    h = torch.rand(B, generator=g) < 0.5
    v = torch.rand(B, generator=g) < 0.5
    x = torch.where(h.view(B, 1, 1, 1), x.flip(3), x)
    return torch.where(v.view(B, 1, 1, 1), x.flip(2), x)


@dataclass
class ClassifierConfig:
    lr: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 30
    width: int = 16
    flip: bool = True


class CNNClassifier:
    """SGD-trained :class:`SmallCNN` with random flips."""

    def __init__(self, num_classes: int, cfg: ClassifierConfig = ClassifierConfig(), seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        torch.manual_seed(seed)
        self.model = SmallCNN(num_classes, cfg.width)

    def fit(self, images: Tensor, labels: Tensor) -> "CNNClassifier":
        cfg = self.cfg
        g = torch.Generator().manual_seed(self.seed)
        opt = torch.optim.SGD(self.model.parameters(), lr=cfg.lr, momentum=cfg.momentum)
        self.model.train()
        n = len(images)
        for _ in range(cfg.epochs):
            perm = torch.randperm(n, generator=g)
            for i in range(0, n, cfg.batch_size):
                idx = perm[i:i + cfg.batch_size]
                if len(idx) < 2:
                    continue
                x = images[idx]
                if cfg.flip:
                    x = random_flip(x, g)
                loss = F.cross_entropy(self.model(x), labels[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
        return self

    @torch.no_grad()
    def predict(self, images: Tensor) -> Tensor:
        self.model.eval()
        return torch.cat([self.model(images[i:i + 256]).argmax(1) for i in range(0, len(images), 256)])


def _image_key(img: Tensor) -> str:
    return hashlib.sha1(img.detach().contiguous().numpy().tobytes()).hexdigest()


class OracleClassifier:
    """Looks up the true label of each image by content; a harness sanity check."""

    def __init__(self, reference: LabeledImageSet):
        self.table = {_image_key(img): int(y) for img, y in zip(reference.images, reference.labels)}

    def fit(self, images, labels):
        return self

    def predict(self, images: Tensor) -> Tensor:
        return torch.tensor([self.table[_image_key(img)] for img in images], dtype=torch.long)


class ConstantClassifier:
    def __init__(self, label: int = 0):
        self.label = label

    def fit(self, images, labels):
        return self

    def predict(self, images: Tensor) -> Tensor:
        return torch.full((len(images),), self.label, dtype=torch.long)


# ---------------------------------------------------------------------------
# cross-validation harness


@dataclass
class CVPlan:
    images_per_class: int = 400
    folds: int = 5
    synth_per_class: int = 2000
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.classifier, dict):
            self.classifier = ClassifierConfig(**self.classifier)
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.images_per_class < self.folds:
            raise ConfigError("images_per_class must be at least the number of folds")
        if self.images_per_class % self.folds:
            raise ConfigError(f"images_per_class ({self.images_per_class}) is not divisible by folds ({self.folds})")
        if self.synth_per_class < 0:
            raise ConfigError("synth_per_class must be non-negative")


METRIC_NAMES = ("accuracy", "precision", "recall", "f1")


@dataclass
class MetricsTable:
    setting: str
    folds: List[Dict[str, float]]

    def mean(self, metric: str) -> float:
        return float(np.mean([f[metric] for f in self.folds]))

    def std(self, metric: str) -> float:
        return float(np.std([f[metric] for f in self.folds]))

    def summary(self) -> Dict[str, float]:
        out = {}
        for m in METRIC_NAMES:
            out[f"{m}_mean"] = self.mean(m)
            out[f"{m}_std"] = self.std(m)
        return out


def make_folds(real: LabeledImageSet, plan: CVPlan) -> List[List[int]]:
    """Per class, pick ``images_per_class`` images at random and deal them into ``folds`` groups."""
    g = torch.Generator().manual_seed(plan.seed)
    per_fold = plan.images_per_class // plan.folds
    folds: List[List[int]] = [[] for _ in range(plan.folds)]
    for k in range(real.num_classes):
        idx = torch.nonzero(real.labels == k).flatten()
        if len(idx) < plan.images_per_class:
            raise DomainError(f"class {real.class_names[k]} has {len(idx)} images, plan needs {plan.images_per_class}")
        chosen = idx[torch.randperm(len(idx), generator=g)[:plan.images_per_class]].tolist()
        for f in range(plan.folds):
            folds[f] += chosen[f * per_fold:(f + 1) * per_fold]
    return [sorted(f) for f in folds]


def select_synthetic(synth: LabeledImageSet, plan: CVPlan, class_names: Sequence[str]) -> LabeledImageSet:
    if list(synth.class_names) != list(class_names):
        raise DomainError(f"synthetic classes {synth.class_names} differ from real classes {list(class_names)}")
    g = torch.Generator().manual_seed(plan.seed + 1)
    keep = []
    for k, name in enumerate(class_names):
        idx = torch.nonzero(synth.labels == k).flatten()
        if len(idx) == 0:
            raise DomainError(f"synthetic data has no images of class {name}")
        keep += idx[torch.randperm(len(idx), generator=g)[:plan.synth_per_class]].tolist()
    return synth.subset(sorted(keep))


ClassifierBuilder = Callable[[int, int], object]


def default_builder(plan: CVPlan) -> ClassifierBuilder:
    def build(num_classes: int, fold: int):
        return CNNClassifier(num_classes, plan.classifier, seed=plan.seed * 100 + fold)
    return build


def augmentation_benchmark(real: LabeledImageSet, synth: Optional[LabeledImageSet], plan: CVPlan,
                           builder: Optional[ClassifierBuilder] = None, setting: Optional[str] = None,
                           on_fold: Optional[Callable[[int, Dict[str, float]], None]] = None) -> MetricsTable:
    """k-fold CV: each fold tests on one real group, trains on the others (plus synthetic images)."""
    builder = builder or default_builder(plan)
    folds = make_folds(real, plan)
    extra = select_synthetic(synth, plan, real.class_names) if synth is not None else None
    results = []
    for f, test_idx in enumerate(folds):
        train_idx = sorted(i for j, fold in enumerate(folds) if j != f for i in fold)
        train_set = real.subset(train_idx)
        if extra is not None:
            train_set = concat([train_set, extra])
        test_set = real.subset(test_idx)
        clf = builder(real.num_classes, f)
        clf.fit(train_set.images, train_set.labels)
        pred = clf.predict(test_set.images)
        scores = classification_metrics(pred.numpy(), test_set.labels.numpy(), real.num_classes)
        results.append(scores)
        if on_fold is not None:
            on_fold(f, scores)
    return MetricsTable(setting or ("baseline" if synth is None else "augmented"), results)


def write_benchmark_csv(tables: Sequence[MetricsTable], path) -> None:
    """Rows = data setting; columns = ``<metric>_mean`` / ``<metric>_std`` plus per-fold accuracy."""
    n_folds = max(len(t.folds) for t in tables)
    cols = ["setting"] + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "std")] + \
        [f"fold{i}_accuracy" for i in range(n_folds)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for t in tables:
            s = t.summary()
            row = [t.setting] + [f"{s[c]:.6f}" for c in cols[1:1 + 2 * len(METRIC_NAMES)]]
            row += [f"{f['accuracy']:.6f}" for f in t.folds] + [""] * (n_folds - len(t.folds))
            w.writerow(row)
