"""Dataset file format and the synthetic desk-scale image generator.

Binary layout: magic "AFDS1", five little-endian u32 fields (num_samples,
height, width, channels, num_classes), then the pixel bytes (u8, row-major,
channel-last) and one u8 label per sample. File length is fully determined
by the header, and the reader enforces that.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"AFDS1"
_HEADER = struct.Struct("<5I")


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) uint8
    labels: np.ndarray  # (N,) uint8
    classes: int

    def __len__(self):
        return len(self.images)


def save_dataset(path, ds: Dataset) -> None:
    n, h, w, c = ds.images.shape
    if ds.classes > 256:
        raise DataError("labels are stored as u8; at most 256 classes")
    if ds.labels.shape != (n,):
        raise DataError(f"labels shape {ds.labels.shape} does not match {n} samples")
    if int(ds.labels.max(initial=0)) >= ds.classes:
        raise DataError("label value outside [0, num_classes)")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(_HEADER.pack(n, h, w, c, ds.classes))
        f.write(np.ascontiguousarray(ds.images, dtype=np.uint8).tobytes())
        f.write(np.ascontiguousarray(ds.labels, dtype=np.uint8).tobytes())


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e}") from e
    if blob[:5] != MAGIC:
        raise DataError(f"{path}: bad magic {blob[:5]!r}, expected {MAGIC!r}")
    if len(blob) < 5 + _HEADER.size:
        raise DataError(f"{path}: truncated header ({len(blob)} bytes)")
    n, h, w, c, classes = _HEADER.unpack_from(blob, 5)
    expected = 5 + _HEADER.size + n * h * w * c + n
    if len(blob) != expected:
        raise DataError(
            f"{path}: length {len(blob)} != {expected} expected from header "
            f"(n={n}, h={h}, w={w}, c={c})")
    offset = 5 + _HEADER.size
    pixels = np.frombuffer(blob, dtype=np.uint8, count=n * h * w * c, offset=offset)
    labels = np.frombuffer(blob, dtype=np.uint8, count=n, offset=offset + n * h * w * c)
    if labels.size and int(labels.max()) >= classes:
        raise DataError(f"{path}: label {int(labels.max())} >= num_classes {classes}")
    return Dataset(images=pixels.reshape(n, h, w, c).copy(),
                   labels=labels.copy(), classes=classes)


# -- synthetic data -----------------------------------------------------------


def _motif(cls: int, size: int, phase: int) -> np.ndarray:
    """Class-determined pixel structure in [0, 1].

    Eight base classes form four families x two variants: horizontal bars,
    vertical bars and checkers each at period 4 or 8 (fine-grained pairs, so
    capacity matters under noise), plus the two gradient orientations.
    Classes beyond 8 recycle the families at coarser periods.
    """
    yy, xx = np.mgrid[0:size, 0:size]
    family, variant = divmod(cls % 8, 2)
    scale = 1 + cls // 8
    period = (4 if variant == 0 else 8) * scale
    half = period // 2
    if family == 0:
        return ((yy + phase) // half) % 2
    if family == 1:
        return ((xx + phase) // half) % 2
    if family == 2:
        return (((xx + phase) // half) + ((yy + phase) // half)) % 2
    axis = xx if variant == 0 else yy
    return ((axis + phase) % size) / (size - 1)


def synth_dataset(classes: int, samples: int, size: int, seed: int,
                  channels: int = 1, noise: float = 64.0) -> Dataset:
    """Deterministic synthetic set whose class is a function of pixel
    structure (oriented bars / checkers / gradients plus pixel noise).

    Classes are balanced to within one sample.
    """
    if classes < 2 or classes > 256:
        raise DataError("classes must lie in [2, 256]")
    rng = np.random.default_rng(seed)
    labels = (np.arange(samples) % classes).astype(np.uint8)
    labels = labels[rng.permutation(samples)]
    images = np.empty((samples, size, size, channels), dtype=np.uint8)
    for i in range(samples):
        c = int(labels[i])
        phase = int(rng.integers(0, size))
        pattern = _motif(c, size, phase).astype(np.float64)
        amp = rng.uniform(0.5, 1.0)
        offset = rng.uniform(0.0, 1.0 - amp)
        base = (offset + amp * pattern) * 255.0
        pix = base[:, :, None] + rng.normal(0.0, noise, size=(size, size, channels))
        images[i] = np.clip(pix, 0, 255).astype(np.uint8)
    return Dataset(images=images, labels=labels, classes=classes)


def split_for_search(ds: Dataset, max_samples: int):
    """Leading subset used as the search validation split (0 = all)."""
    if max_samples and max_samples < len(ds):
        return ds.images[:max_samples], ds.labels[:max_samples]
    return ds.images, ds.labels
