"""Histogram matching of synthetic images against a real-image reference CDF.

Intensities are quantized to the native 8-bit depth of the source data; the
reference CDF is pooled over a seed-selected set of real images.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import DatasetManifest, denormalize_u8, normalize_u8
from .errors import UsgenError
from .seeding import np_rng

LEVELS = 256


class HistogramError(UsgenError):
    pass


@dataclass(frozen=True)
class IntensityCDF:
    """Cumulative distribution over the 256 8-bit intensity levels."""

    cdf: np.ndarray  # shape (256,), monotone nondecreasing, cdf[255] == 1

    def __post_init__(self):
        cdf = np.asarray(self.cdf, dtype=np.float64)
        if cdf.shape != (LEVELS,):
            raise HistogramError(f"cdf must have {LEVELS} entries, got shape {cdf.shape}")
        if np.any(np.diff(cdf) < 0):
            raise HistogramError("cdf must be monotone nondecreasing")
        if cdf[-1] != 1.0:
            raise HistogramError(f"cdf must end at exactly 1, got {cdf[-1]}")
        object.__setattr__(self, "cdf", cdf)

    def save(self, path) -> None:
        lines = "".join(f"{level}\t{float(value)!r}\n" for level, value in enumerate(self.cdf))
        Path(path).write_text(lines, encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path) -> "IntensityCDF":
        values = np.empty(LEVELS, dtype=np.float64)
        seen = 0
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line:
                continue
            level, value = line.split("\t")
            values[int(level)] = float(value)
            seen += 1
        if seen != LEVELS:
            raise HistogramError(f"expected {LEVELS} cdf lines in {path}, got {seen}")
        return cls(values)


def _cdf_from_counts(counts: np.ndarray) -> IntensityCDF:
    total = counts.sum()
    if total == 0:
        raise HistogramError("cannot build a CDF from zero pixels")
    return IntensityCDF(counts.cumsum() / total)


def compute_cdf(channel: np.ndarray) -> IntensityCDF:
    """Empirical CDF of one 2-D channel with values in [-1, 1]."""
    channel = np.asarray(channel)
    if channel.size == 0:
        raise HistogramError("compute_cdf requires a nonempty channel")
    levels = denormalize_u8(channel)
    counts = np.bincount(levels.ravel(), minlength=LEVELS)
    return _cdf_from_counts(counts)


def match_levels(source_levels: np.ndarray, reference_cdf: IntensityCDF) -> np.ndarray:
    """Map 8-bit levels so the source distribution follows the reference CDF.

    Each source level s maps to the smallest reference level r with
    reference_cdf[r] >= source_cdf[s]; the mapping is monotone and idempotent.
    """
    counts = np.bincount(source_levels.ravel(), minlength=LEVELS)
    source_cdf = counts.cumsum() / counts.sum()
    lut = np.searchsorted(reference_cdf.cdf, source_cdf, side="left")
    return lut.astype(np.uint8)[source_levels]


def histogram_match(source: np.ndarray, reference_cdf: IntensityCDF) -> np.ndarray:
    """Match every channel of every image in the batch to the reference CDF.

    Input and output are float batches in [-1, 1]; matching happens at 8-bit
    depth, so the output is quantized to the 256 representable levels.
    """
    source = np.asarray(source)
    if source.size == 0:
        raise HistogramError("histogram_match requires a nonempty batch")
    out = np.empty_like(source, dtype=np.float32)
    for i in range(source.shape[0]):
        for c in range(source.shape[1]):
            levels = denormalize_u8(source[i, c])
            out[i, c] = normalize_u8(match_levels(levels, reference_cdf))
    return out


def build_reference_pool(manifest: DatasetManifest, sample_count: int, seed: int) -> IntensityCDF:
    """Pool the pixel histograms of `sample_count` seed-selected real images.

    Images are read at native resolution and converted to 8-bit luminance, so
    the reference reflects the raw acquisition intensities.
    """
    if sample_count < 1:
        raise HistogramError(f"sample_count must be >= 1, got {sample_count}")
    if manifest.count == 0:
        raise HistogramError("cannot build a reference pool from an empty manifest")
    rng = np_rng(seed)
    chosen = rng.choice(manifest.count, size=min(sample_count, manifest.count), replace=False)
    counts = np.zeros(LEVELS, dtype=np.int64)
    for idx in sorted(int(i) for i in chosen):
        record = manifest.records[idx]
        with Image.open(record.resolve(manifest.root)) as im:
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
        counts += np.bincount(arr.ravel(), minlength=LEVELS)
    return _cdf_from_counts(counts)
