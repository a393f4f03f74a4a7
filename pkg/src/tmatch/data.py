"""Datasets: CIFAR-10 binary records, a synthetic motif benchmark,
stratified splits and crop/flip augmentation.

Images are kept as uint8 [M, 3, H, W] until the training loop scales
them; every operation here is deterministic given its seed.

The synthetic benchmark is built so that class identity is a *pair* of
small motif tiles placed on a noise background, with motifs shared
between classes. No single motif determines the class, so a model must
detect co-occurring templates; an exact-matching oracle achieves 100%
by construction. Motif tiles are horizontally symmetric, which keeps
mirror augmentation label-preserving, and their pixel range (>= 150)
never collides with the background's (< 64).
"""

import itertools
import math
import os
from dataclasses import dataclass

import numpy as np

CIFAR10_CLASSES = ["airplane", "automobile", "bird", "cat", "deer",
                   "dog", "frog", "horse", "ship", "truck"]

_RECORD_BYTES = 1 + 3 * 32 * 32


@dataclass
class Dataset:
    images: np.ndarray  # uint8 [M, 3, H, W]
    labels: np.ndarray  # int64 [M]
    class_names: list

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.uint8)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"images must be [M, 3, H, W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match {self.images.shape[0]} images")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= len(self.class_names)):
            bad = int(np.argmax((self.labels < 0) | (self.labels >= len(self.class_names))))
            raise ValueError(
                f"label {self.labels[bad]} at index {bad} outside "
                f"[0, {len(self.class_names)})")

    def __len__(self):
        return self.images.shape[0]

    @property
    def num_classes(self):
        return len(self.class_names)

    def subset(self, indices):
        return Dataset(self.images[indices], self.labels[indices], self.class_names)


# ---------------------------------------------------------------------
# CIFAR-10 binary format
# ---------------------------------------------------------------------

def decode_cifar_records(blob, source="<bytes>"):
    """Parse concatenated 3073-byte records: label byte + RGB planes."""
    if len(blob) % _RECORD_BYTES != 0:
        raise ValueError(
            f"{source}: size {len(blob)} is not a multiple of the "
            f"{_RECORD_BYTES}-byte record (label byte + 3x32x32 pixels)")
    n = len(blob) // _RECORD_BYTES
    records = np.frombuffer(blob, dtype=np.uint8).reshape(n, _RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise ValueError(f"{source}: record {bad} has label {labels[bad]}, expected 0..9")
    images = records[:, 1:].reshape(n, 3, 32, 32)
    return images.copy(), labels


def encode_cifar_records(images, labels):
    """Inverse of decode_cifar_records, byte-exact on round trip."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    labels = np.asarray(labels)
    n = images.shape[0]
    if images.shape != (n, 3, 32, 32):
        raise ValueError(f"expected [N, 3, 32, 32] images, got {images.shape}")
    if labels.shape != (n,) or (labels < 0).any() or (labels > 9).any():
        raise ValueError("labels must be N values in 0..9")
    records = np.empty((n, _RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = images.reshape(n, -1)
    return records.tobytes()


def load_cifar10(dir_path):
    """All *.bin record files under dir_path, in sorted name order."""
    names = sorted(n for n in os.listdir(dir_path) if n.endswith(".bin"))
    if not names:
        raise FileNotFoundError(f"no .bin record files in {dir_path}")
    images, labels = [], []
    for name in names:
        with open(os.path.join(dir_path, name), "rb") as fh:
            blob = fh.read()
        imgs, labs = decode_cifar_records(blob, source=name)
        images.append(imgs)
        labels.append(labs)
    return Dataset(np.concatenate(images), np.concatenate(labels), CIFAR10_CLASSES)


# ---------------------------------------------------------------------
# synthetic motif benchmark
# ---------------------------------------------------------------------

_TILE = 5
_BG_HIGH = 64     # background noise is uniform below this
_MOTIF_LOW = 150  # motif pixels all sit at or above this


def _make_motifs(count, gen):
    """Distinct h-symmetric 5x5x3 tiles, one dominant color channel each."""
    motifs = []
    for m in range(count):
        tile = gen.integers(_MOTIF_LOW, 210, size=(3, _TILE, _TILE), dtype=np.int64)
        tile[m % 3] = gen.integers(225, 256, size=(_TILE, _TILE))
        tile[:, :, _TILE // 2 + 1:] = tile[:, :, :_TILE // 2][:, :, ::-1]
        motifs.append(tile.astype(np.uint8))
    return motifs


def _class_pairs(classes):
    need = classes
    count = 2
    while math.comb(count, 2) < need:
        count += 1
    return count, list(itertools.combinations(range(count), 2))[:need]


def synth_dataset(classes, samples, size=(16, 16), seed=0):
    """Balanced motif-pair dataset; class c shows motif pair _class_pairs(c)[1][c].

    ``samples`` must divide evenly across classes. Placement rejects
    overlapping tiles; after 200 rejected draws the two tiles fall back
    to opposite corners.
    """
    classes = int(classes)
    samples = int(samples)
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if samples % classes != 0:
        raise ValueError(f"{samples} samples do not split evenly over {classes} classes")
    h, w = size
    if h < 2 * _TILE or w < _TILE + 1:
        raise ValueError(f"images of size {size} cannot hold two {_TILE}x{_TILE} tiles")

    gen = np.random.Generator(np.random.Philox(key=seed))
    motif_count, pairs = _class_pairs(classes)
    motifs = _make_motifs(motif_count, gen)

    labels = np.arange(samples, dtype=np.int64) % classes
    images = np.empty((samples, 3, h, w), dtype=np.uint8)
    for i in range(samples):
        img = gen.integers(0, _BG_HIGH, size=(3, h, w), dtype=np.int64).astype(np.uint8)
        first, second = pairs[labels[i]]
        y1 = int(gen.integers(0, h - _TILE + 1))
        x1 = int(gen.integers(0, w - _TILE + 1))
        for _ in range(200):
            y2 = int(gen.integers(0, h - _TILE + 1))
            x2 = int(gen.integers(0, w - _TILE + 1))
            if abs(y2 - y1) >= _TILE or abs(x2 - x1) >= _TILE:
                break
        else:
            y1, x1 = 0, 0
            y2, x2 = h - _TILE, w - _TILE
        img[:, y1:y1 + _TILE, x1:x1 + _TILE] = motifs[first]
        img[:, y2:y2 + _TILE, x2:x2 + _TILE] = motifs[second]
        images[i] = img
    names = [f"pair-{a}-{b}" for a, b in pairs]
    return Dataset(images, labels, names)


def synth_oracle_label(image, classes, seed=0):
    """Class implied by exact motif matching; the generator's ground truth.

    Scans every position for each motif tile; background pixels can never
    equal motif pixels, so presence detection is exact.
    """
    motif_count, pairs = _class_pairs(classes)
    gen = np.random.Generator(np.random.Philox(key=seed))
    motifs = _make_motifs(motif_count, gen)
    _, h, w = image.shape
    present = set()
    for m, tile in enumerate(motifs):
        for y in range(h - _TILE + 1):
            for x in range(w - _TILE + 1):
                if np.array_equal(image[:, y:y + _TILE, x:x + _TILE], tile):
                    present.add(m)
    for c, pair in enumerate(pairs):
        if set(pair) <= present:
            return c
    raise ValueError("no motif pair found; image is not from this generator")


# ---------------------------------------------------------------------
# splits and augmentation
# ---------------------------------------------------------------------

def split(dataset, fractions=(0.65, 0.15, 0.20), seed=0):
    """Stratified split into len(fractions) parts, exact per class.

    Per-class counts come from largest-remainder rounding, so sizes are
    reproducible and sum exactly. A class too small to give every
    non-zero fraction at least one sample is an error.
    """
    fractions = tuple(float(f) for f in fractions)
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    gen = np.random.Generator(np.random.Philox(key=seed))
    parts = [[] for _ in fractions]
    for c in range(dataset.num_classes):
        idx = np.nonzero(dataset.labels == c)[0]
        if idx.size == 0:
            continue
        gen.shuffle(idx)
        quotas = [f * idx.size for f in fractions]
        counts = [int(q) for q in quotas]
        remainders = sorted(range(len(fractions)),
                            key=lambda i: (-(quotas[i] - counts[i]), i))
        for i in remainders[:idx.size - sum(counts)]:
            counts[i] += 1
        for i, f in enumerate(fractions):
            if f > 0 and counts[i] == 0:
                raise ValueError(
                    f"class {c} has only {idx.size} samples; fraction {f} "
                    f"of part {i} rounds to zero")
        start = 0
        for i, count in enumerate(counts):
            parts[i].append(np.sort(idx[start:start + count]))
            start += count
    return tuple(dataset.subset(np.concatenate(p) if p else np.empty(0, dtype=np.int64))
                 for p in parts)


def hflip(images):
    """Mirror the width axis; an involution."""
    return images[..., ::-1].copy()


def augment(images, seed, pad=4):
    """Random-crop-with-padding plus per-image mirror, deterministic per seed.

    Each image is zero-padded by ``pad`` on every side, cropped back to
    its original size at a uniform offset in [0, 2*pad]^2, then mirrored
    with probability 1/2.
    """
    n, c, h, w = images.shape
    gen = np.random.Generator(np.random.Philox(key=seed))
    offsets = gen.integers(0, 2 * pad + 1, size=(n, 2))
    flips = gen.integers(0, 2, size=n).astype(bool)
    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=images.dtype)
    padded[:, :, pad:pad + h, pad:pad + w] = images
    out = np.empty_like(images)
    for i in range(n):
        oy, ox = offsets[i]
        crop = padded[i, :, oy:oy + h, ox:ox + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out
