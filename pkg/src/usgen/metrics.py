"""Frechet distance between feature distributions of real and synthetic images.

The feature extractor is pluggable: a bundled fixed-seed convolutional
encoder covers desk-scale runs, and any compatible weights file can be loaded
for larger studies.  Reports embed the extractor checksum so scores are never
compared across different feature spaces.
"""

import hashlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import DatasetManifest, load_batch
from .errors import NumericsError, UsgenError
from .seeding import np_rng, seeded_module

FID_CSV_HEADER = "epoch,model_tag,n_real,n_fake,feature_dim,extractor_checksum,fid"


class MetricsError(UsgenError):
    pass


class _ConvEncoder(nn.Module):
    def __init__(self, in_channels=1, widths=(16, 32, 64), feature_dim=64):
        super().__init__()
        layers = []
        prev = in_channels
        for w in widths:
            layers += [nn.Conv2d(prev, w, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            prev = w
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(prev, feature_dim)

    def forward(self, x):
        h = self.features(x)
        h = F.adaptive_avg_pool2d(h, 1).flatten(1)
        return self.head(h)


class FeatureExtractor:
    """A frozen encoder mapping image batches to (n, feature_dim) matrices."""

    def __init__(self, net: nn.Module, feature_dim: int, input_size: int, in_channels: int = 1):
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        self.net = net
        self.feature_dim = feature_dim
        self.input_size = input_size
        self.in_channels = in_channels
        self.checksum = self._checksum()

    def _checksum(self) -> str:
        h = hashlib.sha256()
        for name, tensor in sorted(self.net.state_dict().items()):
            h.update(name.encode("utf-8"))
            h.update(tensor.numpy().tobytes())
        return h.hexdigest()[:16]


def tiny_extractor(seed: int = 0, feature_dim: int = 64) -> FeatureExtractor:
    """The bundled desk-scale extractor: a fixed-seed random conv encoder."""
    net = seeded_module(lambda: _ConvEncoder(feature_dim=feature_dim), seed)
    return FeatureExtractor(net, feature_dim, input_size=64)


def save_extractor(extractor: FeatureExtractor, path):
    """Persist an extractor as a checkpoint-format weights file."""
    from .checkpoints import ModelCheckpoint, module_to_arrays, save_checkpoint

    widths = [m.out_channels for m in extractor.net.features if isinstance(m, nn.Conv2d)]
    ckpt = ModelCheckpoint(
        pipeline="feature_extractor",
        config={"widths": widths, "feature_dim": extractor.feature_dim,
                "input_size": extractor.input_size, "in_channels": extractor.in_channels},
        arrays=module_to_arrays(extractor.net, "net"),
    )
    return save_checkpoint(ckpt, path)


def load_extractor(path) -> FeatureExtractor:
    """Load an extractor weights file written by save_extractor."""
    from .checkpoints import load_checkpoint, module_from_arrays

    ckpt = load_checkpoint(path)
    if ckpt.pipeline != "feature_extractor":
        raise MetricsError(f"{path} is a {ckpt.pipeline!r} checkpoint, not a feature extractor")
    cfg = ckpt.config
    net = _ConvEncoder(in_channels=cfg["in_channels"], widths=tuple(cfg["widths"]),
                       feature_dim=cfg["feature_dim"])
    module_from_arrays(net, ckpt.arrays, "net")
    return FeatureExtractor(net, cfg["feature_dim"], cfg["input_size"], cfg["in_channels"])


def extract_features(extractor: FeatureExtractor, batch) -> np.ndarray:
    """Deterministic (n, feature_dim) float64 feature matrix for a batch."""
    x = torch.as_tensor(np.asarray(batch), dtype=torch.float32)
    if x.ndim != 4 or x.shape[0] == 0:
        raise MetricsError(f"expected a nonempty (n, c, h, w) batch, got shape {tuple(x.shape)}")
    if x.shape[1] != extractor.in_channels:
        x = x.mean(dim=1, keepdim=True) if extractor.in_channels == 1 else x.repeat(1, extractor.in_channels, 1, 1)
    if x.shape[-2:] != (extractor.input_size, extractor.input_size):
        x = F.interpolate(x, size=(extractor.input_size, extractor.input_size),
                          mode="bilinear", align_corners=False)
    with torch.no_grad():
        feats = extractor.net(x)
    feats = feats.numpy().astype(np.float64)
    if not np.all(np.isfinite(feats)):
        raise MetricsError(f"non-finite features from extractor {extractor.checksum}")
    return feats


@dataclass(frozen=True)
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray
    n: int

    def __post_init__(self):
        if self.n < 2:
            raise MetricsError(f"need at least 2 samples to fit a Gaussian, got {self.n}")
        asym = np.max(np.abs(self.sigma - self.sigma.T)) if self.sigma.size else 0.0
        if asym >= 1e-8:
            raise MetricsError(f"covariance asymmetry {asym} exceeds tolerance")


def gaussian_stats(features: np.ndarray) -> GaussianStats:
    """Column means and unbiased (n-1 divisor) covariance, symmetrized."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n < 2:
        raise MetricsError(f"need at least 2 feature rows, got {n}")
    mu = features.mean(axis=0)
    sigma = np.cov(features, rowvar=False, ddof=1)
    sigma = np.atleast_2d(sigma)
    sigma = (sigma + sigma.T) / 2.0
    return GaussianStats(mu, sigma, n)


def _sqrt_psd(matrix: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, clamping negatives."""
    vals, vecs = np.linalg.eigh((matrix + matrix.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The cross trace is computed as Tr((sqrt(S_a) S_b sqrt(S_a))^{1/2}) so the
    eigendecomposition only ever sees symmetric matrices; failures retry with
    a small diagonal jitter.
    """
    if a.mu.shape != b.mu.shape:
        raise MetricsError(f"feature dims differ: {a.mu.shape} vs {b.mu.shape}")
    mean_term = float(np.sum((a.mu - b.mu) ** 2))
    dim = a.sigma.shape[0]
    jitters = (0.0, 1e-6, 1e-5, 1e-4)
    for jitter in jitters:
        sa = a.sigma + jitter * np.eye(dim)
        sb = b.sigma + jitter * np.eye(dim)
        try:
            root_a = _sqrt_psd(sa)
            inner = root_a @ sb @ root_a
            vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
        except np.linalg.LinAlgError:
            continue
        cross = 2.0 * np.sum(np.sqrt(np.clip(vals, 0.0, None)))
        value = mean_term + float(np.trace(sa) + np.trace(sb) - cross)
        if np.isfinite(value) and value > -1e-3:
            return max(value, 0.0)
    raise NumericsError(f"frechet_distance failed after jitter attempts {jitters}")


@dataclass(frozen=True)
class FIDReport:
    epoch: int
    model_tag: str
    n_real: int
    n_fake: int
    feature_dim: int
    extractor_checksum: str
    fid: float

    def __post_init__(self):
        if not np.isfinite(self.fid) or self.fid < 0.0:
            raise MetricsError(f"fid must be finite and >= 0, got {self.fid}")

    def csv_row(self) -> str:
        return (f"{self.epoch},{self.model_tag},{self.n_real},{self.n_fake},"
                f"{self.feature_dim},{self.extractor_checksum},{self.fid!r}")


def fid_from_features(real_features, fake_features, extractor, epoch=0, model_tag="") -> FIDReport:
    value = frechet_distance(gaussian_stats(real_features), gaussian_stats(fake_features))
    return FIDReport(epoch, model_tag, len(real_features), len(fake_features),
                     extractor.feature_dim, extractor.checksum, value)


def fid(real_manifest: DatasetManifest, fake_images, extractor: FeatureExtractor,
        sample_count: int, seed: int, epoch: int = 0, model_tag: str = "") -> FIDReport:
    """FID between a seed-selected real subset and a batch of fake images."""
    fake_images = np.asarray(fake_images)
    if real_manifest.count < 2 or fake_images.shape[0] < 2:
        raise MetricsError("fid needs at least 2 images on each side")
    take = min(sample_count, real_manifest.count)
    chosen = np.sort(np_rng(seed).choice(real_manifest.count, size=take, replace=False))
    real = load_batch(real_manifest, chosen, extractor.input_size, extractor.in_channels)
    real_features = extract_features(extractor, real)
    fake_features = extract_features(extractor, fake_images)
    return fid_from_features(real_features, fake_features, extractor, epoch, model_tag)
