"""Dataset ingestion, normalization, and training-time augmentation.

Image batches throughout the package are numpy float32 arrays of shape
(count, channels, height, width) with values in [-1, 1].
"""

import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import UsgenError
from .seeding import derive_seed, np_rng

TRANS_CEREBELLUM = "trans-cerebellum"
TRANS_THALAMIC = "trans-thalamic"
OTHER = "other"
PLANES = (TRANS_CEREBELLUM, TRANS_THALAMIC, OTHER)

RASTER_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


class DatasetError(UsgenError):
    pass


class EmptyDatasetError(DatasetError):
    pass


class ImageLoadError(DatasetError):
    pass


@dataclass(frozen=True)
class ImageRecord:
    path: str  # POSIX path relative to the manifest root
    plane: str
    width: int
    height: int

    def __post_init__(self):
        if self.plane not in PLANES:
            raise DatasetError(f"unknown plane {self.plane!r}, expected one of {PLANES}")
        if self.width < 1 or self.height < 1:
            raise DatasetError(f"bad image size {self.width}x{self.height} for {self.path}")

    def resolve(self, root) -> Path:
        return Path(root) / self.path

    def line(self) -> str:
        return f"{self.path}\t{self.plane}\t{self.width}\t{self.height}"


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple
    plane: str
    root: str
    skipped: tuple = ()  # (path, reason) pairs from scanning

    def __post_init__(self):
        paths = [r.path for r in self.records]
        if paths != sorted(paths):
            raise DatasetError("manifest records must be sorted lexicographically by path")

    @property
    def count(self) -> int:
        return len(self.records)

    @property
    def checksum(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(r.line().encode("utf-8"))
            h.update(b"\n")
        return h.hexdigest()

    def save(self, path) -> None:
        """Write the tab-separated manifest; paths are rewritten relative to
        the manifest file's directory so it loads from wherever it sits."""
        path = Path(path)
        base = path.resolve().parent
        lines = []
        for r in self.records:
            rel = Path(os.path.relpath(r.resolve(self.root).resolve(), base)).as_posix()
            lines.append(f"{rel}\t{r.plane}\t{r.width}\t{r.height}")
        lines.sort()
        path.write_text("".join(line + "\n" for line in lines), encoding="utf-8", newline="\n")


def load_manifest(path, root=None) -> DatasetManifest:
    """Read a tab-separated manifest file; `root` defaults to the file's directory."""
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    records = []
    plane_seen = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DatasetError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        rec = ImageRecord(parts[0], parts[1], int(parts[2]), int(parts[3]))
        records.append(rec)
        plane_seen.add(rec.plane)
    plane = plane_seen.pop() if len(plane_seen) == 1 else OTHER
    return DatasetManifest(tuple(records), plane, str(root))


@dataclass(frozen=True)
class AugmentConfig:
    horizontal_flip_prob: float = 0.5
    zoom_range: tuple = (0.9, 1.1)
    rotation_range_deg: tuple = (-10.0, 10.0)

    def __post_init__(self):
        if not 0.0 <= self.horizontal_flip_prob <= 1.0:
            raise DatasetError(f"flip_prob must be in [0,1], got {self.horizontal_flip_prob}")
        lo, hi = self.zoom_range
        if not (0.0 < lo <= hi):
            raise DatasetError(f"zoom_range must satisfy 0 < min <= max, got {self.zoom_range}")
        lo, hi = self.rotation_range_deg
        if lo > hi:
            raise DatasetError(f"rotation_range_deg must satisfy min <= max, got {self.rotation_range_deg}")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(horizontal_flip_prob=0.0, zoom_range=(1.0, 1.0), rotation_range_deg=(0.0, 0.0))


def infer_plane(path: str):
    """Guess the imaging plane from keywords in a path, or None."""
    lower = str(path).lower()
    if "cerebel" in lower:
        return TRANS_CEREBELLUM
    if "thalam" in lower:
        return TRANS_THALAMIC
    return None


def scan_dataset(root, plane: str = OTHER) -> DatasetManifest:
    """Build a manifest of every readable raster image under `root`.

    Files whose paths carry a plane keyword (e.g. "cerebellum") that
    contradicts the requested plane are excluded; unlabeled files are assumed
    to belong to the requested plane, so pointing `root` at a per-plane
    directory works without any naming convention.  Unreadable files are
    skipped and listed in ``manifest.skipped``.
    """
    root = Path(root)
    if plane not in PLANES:
        raise DatasetError(f"unknown plane {plane!r}, expected one of {PLANES}")
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    records = []
    skipped = []
    for file in sorted(root.rglob("*")):
        if not file.is_file() or file.suffix.lower() not in RASTER_EXTENSIONS:
            continue
        rel = file.relative_to(root).as_posix()
        inferred = infer_plane(rel)
        if plane != OTHER:
            if inferred is not None and inferred != plane:
                continue
            label = plane
        else:
            label = inferred or OTHER
        try:
            with Image.open(file) as im:
                width, height = im.size
        except Exception as exc:  # corrupt or non-image file
            skipped.append((rel, str(exc)))
            continue
        records.append(ImageRecord(rel, label, width, height))
    if not records:
        raise EmptyDatasetError(f"no readable {plane} images found under {root}")
    return DatasetManifest(tuple(records), plane, str(root), tuple(skipped))


def normalize_u8(u8: np.ndarray) -> np.ndarray:
    """Map 8-bit levels to float32 in [-1, 1] via 2*(v/255) - 1."""
    return u8.astype(np.float32) / 255.0 * 2.0 - 1.0


def denormalize_u8(x: np.ndarray) -> np.ndarray:
    """Inverse of normalize_u8; exact on every level 0..255."""
    return np.clip(np.round((np.asarray(x, dtype=np.float32) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def load_image(record: ImageRecord, target_size: int, channels: int = 1, root=None) -> np.ndarray:
    """Load one record as a (1, channels, target_size, target_size) batch.

    Center-crops to the largest centered square, resizes bilinearly, converts
    to the requested channel count (luminance for 1), and scales to [-1, 1].
    """
    if target_size < 8 or (target_size & (target_size - 1)) != 0:
        raise DatasetError(f"target_size must be a power of two >= 8, got {target_size}")
    if channels not in (1, 3):
        raise DatasetError(f"channels must be 1 or 3, got {channels}")
    path = Path(record.path) if root is None else record.resolve(root)
    try:
        with Image.open(path) as im:
            im.load()
            side = min(im.width, im.height)
            left = (im.width - side) // 2
            top = (im.height - side) // 2
            im = im.crop((left, top, left + side, top + side))
            if side != target_size:
                im = im.resize((target_size, target_size), Image.BILINEAR)
            im = im.convert("L" if channels == 1 else "RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except DatasetError:
        raise
    except Exception as exc:
        raise ImageLoadError(f"failed to decode {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None, :, :]
    else:
        arr = arr.transpose(2, 0, 1)
    return normalize_u8(arr)[None, :, :, :]


def _warp(channel: np.ndarray, scale: float, angle_deg: float) -> np.ndarray:
    """Zoom about the center then rotate, in one bilinear resampling pass."""
    theta = np.deg2rad(angle_deg)
    cos, sin = np.cos(theta), np.sin(theta)
    matrix = np.array([[cos, -sin], [sin, cos]]) / scale
    center = (np.array(channel.shape) - 1.0) / 2.0
    offset = center - matrix @ center
    return ndimage.affine_transform(channel, matrix, offset=offset, order=1, mode="reflect", output=np.float32)


def augment(batch: np.ndarray, cfg: AugmentConfig, seed: int) -> np.ndarray:
    """Per-image random horizontal flip, zoom, and rotation with reflect padding.

    Identical (batch, cfg, seed) triples produce identical output; the
    identity config returns the input unchanged.
    """
    if batch.size == 0:
        raise DatasetError("augment requires a nonempty batch")
    rng = np_rng(seed)
    out = batch.copy()
    for i in range(batch.shape[0]):
        flip = rng.random() < cfg.horizontal_flip_prob
        scale = rng.uniform(*cfg.zoom_range)
        angle = rng.uniform(*cfg.rotation_range_deg)
        img = out[i]
        if flip:
            img = img[:, :, ::-1]
        if scale != 1.0 or angle != 0.0:
            img = np.stack([_warp(c, scale, angle) for c in img])
        out[i] = img
    return out


def batch_plan(count: int, batch_size: int, shuffle_seed: int) -> list:
    """Deterministic epoch plan: a shuffled index permutation cut into batches."""
    if batch_size < 1:
        raise DatasetError(f"batch_size must be >= 1, got {batch_size}")
    perm = np_rng(shuffle_seed).permutation(count)
    return [perm[i:i + batch_size] for i in range(0, count, batch_size)]


def load_batch(manifest: DatasetManifest, indices, target_size: int, channels: int = 1) -> np.ndarray:
    parts = [load_image(manifest.records[int(i)], target_size, channels, root=manifest.root) for i in indices]
    return np.concatenate(parts, axis=0)


def make_batches(manifest: DatasetManifest, batch_size: int, target_size: int,
                 channels: int, shuffle_seed: int):
    """One epoch of batches; every record appears exactly once, order seeded."""
    for indices in batch_plan(manifest.count, batch_size, shuffle_seed):
        yield load_batch(manifest, indices, target_size, channels)


def stage_plan(count: int, batch_size: int, seed: int, index: int, unit: str) -> list:
    """Batch index arrays for training-loop unit `index`.

    With unit "epochs" this is a full shuffled pass; with unit "steps" it is
    the single batch at position `index` of an endless deterministic cycle,
    so a resumed run replays exactly the same batches.
    """
    if unit == "epochs":
        return batch_plan(count, batch_size, derive_seed(seed, "shuffle", index))
    if unit == "steps":
        n_batches = (count + batch_size - 1) // batch_size
        cycle, offset = divmod(index, n_batches)
        return [batch_plan(count, batch_size, derive_seed(seed, "shuffle", cycle))[offset]]
    raise DatasetError(f"unknown epoch unit {unit!r}")
