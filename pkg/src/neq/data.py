"""Datasets: IDX (ubyte) files, synthetic 2-D classes, and probe splitting."""

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SYNTHETIC_KINDS = ("rings", "moons", "rings-image", "moons-image")


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        return Dataset(self.x[idx], self.y[idx], self.num_classes)


# ---------------------------------------------------------------------------
# IDX
# ---------------------------------------------------------------------------


def _read_bytes(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(blob, magic, ndim, path):
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise DataError(f"{path}: truncated IDX header")
    got = struct.unpack(">I", blob[:4])[0]
    if got != magic:
        raise DataError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    payload = blob[header:]
    if len(payload) < count:
        raise DataError(f"{path}: truncated payload ({len(payload)} of {count} bytes)")
    return np.frombuffer(payload, dtype=np.uint8, count=count).reshape(dims)


def load_idx_dataset(images_path, labels_path, num_classes=None):
    """Read an IDX image/label pair into images (N, 1, H, W) in [0, 1] and int labels."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    y = labels.astype(np.int64)
    if num_classes is None:
        num_classes = int(y.max()) + 1 if y.size else 1
    elif y.size and y.max() >= num_classes:
        raise DataError(f"label {int(y.max())} out of range for {num_classes} classes")
    x = (images.astype(np.float32) / np.float32(255.0))[:, None, :, :]
    return Dataset(x, y, num_classes)


def write_idx_dataset(dataset, images_path, labels_path):
    """Write single-channel images (values in [0, 1]) and labels as IDX files."""
    x = dataset.x
    if x.ndim != 4 or x.shape[1] != 1:
        raise DataError(f"IDX holds single-channel images, got shape {x.shape}")
    n, _, h, w = x.shape
    pixels = np.clip(np.rint(x[:, 0].astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w))
        fh.write(pixels.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        fh.write(dataset.y.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# synthetic
# ---------------------------------------------------------------------------


def _balanced_labels(n, classes):
    return np.arange(n) % classes


def ring_points(n, noise, rng, classes=4):
    """Points on concentric rings of radius ``c + 1``; class = ring index."""
    y = _balanced_labels(n, classes)
    angle = rng.uniform(0.0, 2 * np.pi, n)
    radius = y + 1.0 + noise * rng.standard_normal(n)
    pts = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    return pts, y, float(classes) + 0.5


def moon_points(n, noise, rng):
    """Two interleaving half circles."""
    y = _balanced_labels(n, 2)
    t = rng.uniform(0.0, np.pi, n)
    pts = np.where(
        (y == 0)[:, None],
        np.stack([np.cos(t), np.sin(t)], axis=1),
        np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1),
    )
    pts = pts - np.array([0.5, 0.25])
    pts = pts + noise * rng.standard_normal(pts.shape)
    return pts, y, 2.0


def render_points(pts, extent, size, sigma=0.8):
    """Render each 2-D point as a Gaussian blob on a ``size`` x ``size`` grid over [-extent, extent]^2."""
    grid = np.linspace(-extent, extent, size)
    scale = (size - 1) / (2 * extent)
    dx = (grid[None, :] - pts[:, 0:1]) * scale
    dy = (grid[::-1][None, :] - pts[:, 1:2]) * scale
    img = np.exp(-(dy[:, :, None] ** 2 + dx[:, None, :] ** 2) / (2 * sigma ** 2))
    return img[:, None, :, :]


def gen_synthetic(kind, n, noise, seed, image_size=8, classes=4):
    """Deterministic synthetic dataset.

    ``rings``/``moons`` give raw 2-D feature vectors; the ``-image`` variants
    render the same points as single-channel ``image_size`` squares.
    """
    if kind not in SYNTHETIC_KINDS:
        raise DataError(f"unknown synthetic kind {kind!r}; expected one of {SYNTHETIC_KINDS}")
    if n < 0 or noise < 0:
        raise DataError("n and noise must be non-negative")
    rng = np.random.default_rng(seed)
    if kind.startswith("rings"):
        pts, y, extent = ring_points(n, noise, rng, classes)
        k = classes
    else:
        pts, y, extent = moon_points(n, noise, rng)
        k = 2
    order = rng.permutation(n)
    pts, y = pts[order], y[order].astype(np.int64)
    if kind.endswith("-image"):
        x = render_points(pts, extent, image_size).astype(np.float32)
    else:
        x = pts.astype(np.float32)
    return Dataset(x, y, k)


def _shift(img, dy, dx):
    out = np.zeros_like(img)
    h, w = img.shape
    out[max(dy, 0):h + min(dy, 0), max(dx, 0):w + min(dx, 0)] = \
        img[max(-dy, 0):h + min(-dy, 0), max(-dx, 0):w + min(-dx, 0)]
    return out


def make_digits(n_train=8000, n_test=2000, noise=0.2, seed=0, train_sources=1400):
    """Augmented 8x8 handwritten digits (10 classes) as (train, test) datasets.

    Built from scikit-learn's bundled digit scans.  The source images are split
    once into disjoint train and test pools of ``train_sources`` and the rest;
    every sample is a random pool image with a shift of at most one pixel, an
    intensity scale in [0.7, 1] and additive Gaussian noise, clipped to [0, 1].
    """
    try:
        from sklearn.datasets import load_digits
    except ImportError as exc:  # pragma: no cover
        raise DataError("make_digits needs scikit-learn (pip install scikit-learn)") from exc
    raw = load_digits()
    images = raw.images / 16.0
    labels = raw.target.astype(np.int64)
    if not 0 < train_sources < len(labels):
        raise DataError(f"train_sources must lie in (0, {len(labels)})")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(labels))

    def draw(pool, n):
        x = np.zeros((n, 1, 8, 8))
        pick = rng.choice(pool, n)
        for k, i in enumerate(pick):
            dy, dx = rng.integers(-1, 2, 2)
            img = _shift(images[i], int(dy), int(dx))
            img = img * rng.uniform(0.7, 1.0) + rng.normal(0.0, noise, img.shape)
            x[k, 0] = np.clip(img, 0.0, 1.0)
        return Dataset(x.astype(np.float32), labels[pick], 10)

    return draw(perm[:train_sources], n_train), draw(perm[train_sources:], n_test)


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def stratified_pick(labels, count, rng):
    """Positions of ``count`` labels, round-robin over classes in ascending order.

    Each class pool is shuffled by ``rng`` first; returns sorted positions.
    """
    pools = [list(rng.permutation(np.flatnonzero(labels == c))) for c in np.unique(labels)]
    picked = []
    depth = 0
    while len(picked) < count:
        progressed = False
        for pool in pools:
            if depth < len(pool) and len(picked) < count:
                picked.append(pool[depth])
                progressed = True
        if not progressed:
            break
        depth += 1
    return np.sort(np.array(picked, dtype=np.int64))


def split_probe(dataset, probe_size, seed, test_fraction=0.2, heldout=None):
    """Split into (train, probe, test); the probe comes from held-out data only.

    Without ``heldout`` a seeded ``test_fraction`` of ``dataset`` is held out.
    The probe is stratified by class and disjoint from train and test.
    """
    if probe_size < 1:
        raise DataError(f"probe_size must be >= 1, got {probe_size}")
    rng = np.random.default_rng(seed)
    if heldout is None:
        perm = rng.permutation(len(dataset))
        n_hold = int(round(len(dataset) * test_fraction))
        train = dataset.subset(np.sort(perm[n_hold:]))
        heldout = dataset.subset(np.sort(perm[:n_hold]))
    else:
        train = dataset
    if probe_size > len(heldout):
        raise DataError(f"probe of {probe_size} exceeds held-out pool of {len(heldout)}")
    probe_idx = stratified_pick(heldout.y, probe_size, rng)
    rest = np.setdiff1d(np.arange(len(heldout)), probe_idx)
    return train, heldout.subset(probe_idx), heldout.subset(rest)


def channel_stats(x):
    """Per-channel mean and std over (N, H, W) or per-feature for flat data."""
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    mean = x.astype(np.float64).mean(axis=axes)
    std = x.astype(np.float64).std(axis=axes)
    return mean, np.where(std > 0, std, 1.0)


def normalize(x, mean, std):
    shape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    return ((x - mean.reshape(shape)) / std.reshape(shape)).astype(x.dtype)
