"""Datasets (CIFAR-10 binary, synthetic blobs) and the resize / crop evaluation pipeline."""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

CIFAR_RECORD = 3073
CIFAR_SIDE = 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


@dataclass
class Dataset:
    images: np.ndarray            # N x C x H x W in [0, 1]
    labels: np.ndarray            # N ints
    split: str = "train"
    provenance: str = ""
    num_classes: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x C x H x W, got shape {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if not self.num_classes:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in 0..{self.num_classes - 1}")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], split or self.split, self.provenance,
                       self.num_classes, dict(self.meta))

    def split_off(self, n_val: int, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Seeded shuffle, then (train, val) with ``n_val`` held out."""
        order = np.random.default_rng(seed).permutation(len(self))
        return self.subset(order[n_val:], "train"), self.subset(order[:n_val], "val")


# ---------------------------------------------------------------------------
# CIFAR-10
# ---------------------------------------------------------------------------
def parse_cifar_bytes(buf: bytes, source: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    if len(buf) % CIFAR_RECORD:
        whole = len(buf) // CIFAR_RECORD
        raise ValueError(f"{source}: truncated record at byte offset {whole * CIFAR_RECORD} "
                         f"(file size {len(buf)} is not a multiple of {CIFAR_RECORD})")
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.flatnonzero(labels > 9)[0])
        raise ValueError(f"{source}: label {labels[bad]} out of range at byte offset {bad * CIFAR_RECORD}")
    images = raw[:, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE).astype(np.float32) / np.float32(255)
    return images, labels


def load_cifar10(directory: str, split: str = "test", limit: int | None = None) -> Dataset:
    """Read the canonical binary CIFAR-10 batches from ``directory``."""
    names = CIFAR_TEST_FILES if split == "test" else CIFAR_TRAIN_FILES
    paths = [os.path.join(directory, n) for n in names if os.path.exists(os.path.join(directory, n))]
    if not paths:
        paths = sorted(os.path.join(directory, n) for n in os.listdir(directory) if n.endswith(".bin"))
    if not paths:
        raise FileNotFoundError(f"no CIFAR-10 .bin batch files in {directory}")
    imgs, labs = [], []
    for path in paths:
        with open(path, "rb") as fh:
            x, y = parse_cifar_bytes(fh.read(), path)
        imgs.append(x)
        labs.append(y)
    images, labels = np.concatenate(imgs), np.concatenate(labs)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    return Dataset(images, labels, split, os.path.abspath(directory), 10)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------
def synth_blobs(n: int, classes: int = 3, resolution: int = 32, margin: float = 8.0, seed: int = 0,
                sigma: float = 0.05, channels: int = 3) -> Dataset:
    """Class-conditional Gaussian images around well-separated smooth prototypes.

    ``margin`` is the minimum pairwise distance between class means in units
    of the per-pixel noise ``sigma``. Prototypes are low-frequency patterns
    in [0.25, 0.75], rescaled about 0.5 until the margin holds.
    """
    if classes < 2:
        raise ValueError("synth_blobs needs at least 2 classes")
    rng = np.random.default_rng(seed)
    d = channels * resolution * resolution
    coarse = rng.uniform(-1.0, 1.0, size=(classes, channels, 4, 4))
    mh = T.bicubic_matrix(4, resolution)
    protos = (mh @ coarse @ mh.T).reshape(classes, d)
    protos /= np.abs(protos).max(axis=1, keepdims=True)
    diffs = np.linalg.norm(protos[:, None] - protos[None], axis=2)
    closest = diffs[~np.eye(classes, dtype=bool)].min()
    scale = max(margin * sigma / closest, 1e-12)
    means = np.clip(0.5 + scale * protos, 0.0, 1.0)
    labels = np.arange(n) % classes
    rng.shuffle(labels)
    images = means[labels] + sigma * rng.standard_normal((n, d))
    images = np.clip(images, 0.0, 1.0).reshape(n, channels, resolution, resolution).astype(np.float32)
    ds = Dataset(images, labels, "train", f"synth_blobs(seed={seed})", classes)
    ds.meta["means"] = means.reshape(classes, channels, resolution, resolution)
    return ds


def nearest_centroid(images: np.ndarray, means: np.ndarray) -> np.ndarray:
    flat = images.reshape(len(images), -1).astype(np.float64)
    m = means.reshape(len(means), -1)
    d2 = (flat * flat).sum(1)[:, None] - 2 * flat @ m.T + (m * m).sum(1)[None]
    return d2.argmin(axis=1)


# ---------------------------------------------------------------------------
# resolution protocol
# ---------------------------------------------------------------------------
def intermediate_size(ns: int, sr: float) -> int:
    """Short side after the resize step: ``round(ns / sr)``, halves rounded up."""
    return int(np.floor(ns / sr + 0.5))


def resize_pipeline(image: np.ndarray, ns: int, sr: float = 0.875) -> np.ndarray:
    """Bicubic resize of the short side to ``round(ns / sr)`` then a centred ``ns x ns`` crop.

    Accepts C x H x W or N x C x H x W; output is clipped to [0, 1].
    """
    if ns < 4:
        raise ValueError(f"NS must be at least 4, got {ns}")
    if not 0 < sr <= 1:
        raise ValueError(f"SR must lie in (0, 1], got {sr}")
    img = np.asarray(image)
    single = img.ndim == 3
    if single:
        img = img[None]
    h, w = img.shape[-2:]
    short = intermediate_size(ns, sr)
    if h <= w:
        nh, nw = short, max(short, int(np.floor(w * short / h + 0.5)))
    else:
        nh, nw = max(short, int(np.floor(h * short / w + 0.5))), short
    if (nh, nw) != (h, w):
        mh = T.bicubic_matrix(h, nh).astype(img.dtype)
        mw = T.bicubic_matrix(w, nw).astype(img.dtype)
        img = np.clip(mh @ img @ mw.T, 0.0, 1.0).astype(image.dtype)
    top, left = (nh - ns) // 2, (nw - ns) // 2
    out = np.ascontiguousarray(img[..., top:top + ns, left:left + ns])
    return out[0] if single else out


def scale_epsilon_l2(base_eps: float, base_res: int, d: int) -> float:
    """ℓ2 radius scaled linearly with the image side: ``base_eps * d / base_res``."""
    if d < 1 or base_res < 1:
        raise ValueError("resolutions must be positive")
    return base_eps * d / base_res
