"""Image and label augmentations on C x H x W / N x C x H x W arrays in [0, 1].

Every function takes an explicit ``numpy.random.Generator`` (or a seed),
so a training run is a pure function of its seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

MAX_MAGNITUDE = 30


@dataclass(frozen=True)
class AugmentationConfig:
    ra_layers: int = 2
    ra_magnitude: int = 9
    ra_prob: float = 0.5
    mix_alpha: float = 0.8
    erase_prob: float = 0.25
    mix_mode_prob: float = 0.5     # probability of MixUp (else CutMix) per batch
    pad: int = 4                   # basic random crop padding at 32 px
    jitter: float = 0.4            # three_aug colour jitter strength

    def __post_init__(self):
        for name in ("ra_prob", "erase_prob", "mix_mode_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not 0 <= self.ra_magnitude <= MAX_MAGNITUDE:
            raise ValueError(f"ra_magnitude must lie in 0..{MAX_MAGNITUDE}")
        if self.mix_alpha <= 0:
            raise ValueError("mix_alpha must be positive")


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# labels
# ---------------------------------------------------------------------------
def label_smooth(y, s: float, k: int) -> np.ndarray:
    """Uniform-mixture smoothing: true class ``1 - s + s/k``, every other class ``s/k``."""
    if not 0.0 <= s < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {s}")
    y = np.asarray(y, dtype=np.int64)
    out = np.full((len(y), k), s / k)
    out[np.arange(len(y)), y] += 1.0 - s
    return out


def mixup(batch: np.ndarray, targets: np.ndarray, alpha: float, seed=None, lam: float | None = None):
    """Blend each example with a permuted partner; returns (images, targets, lam)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    rng = _rng(seed)
    lam = float(rng.beta(alpha, alpha)) if lam is None else float(lam)
    perm = rng.permutation(len(batch))
    x = (lam * batch + (1.0 - lam) * batch[perm]).astype(batch.dtype)
    t = lam * targets + (1.0 - lam) * targets[perm]
    return x, t, lam


def cutmix(batch: np.ndarray, targets: np.ndarray, alpha: float, seed=None, lam: float | None = None):
    """Paste one rectangle from a permuted partner; label weight is the exact pasted fraction.

    Returns (images, targets, pasted_fraction).
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    rng = _rng(seed)
    lam = float(rng.beta(alpha, alpha)) if lam is None else float(lam)
    perm = rng.permutation(len(batch))
    h, w = batch.shape[-2:]
    ratio = math.sqrt(1.0 - lam)
    ch, cw = int(h * ratio), int(w * ratio)
    cy, cx = int(rng.integers(h)), int(rng.integers(w))
    y0, y1 = np.clip([cy - ch // 2, cy + ch // 2], 0, h)
    x0, x1 = np.clip([cx - cw // 2, cx + cw // 2], 0, w)
    frac = (y1 - y0) * (x1 - x0) / (h * w)
    x = batch.copy()
    x[..., y0:y1, x0:x1] = batch[perm][..., y0:y1, x0:x1]
    t = (1.0 - frac) * targets + frac * targets[perm]
    return x, t, float(frac)


# ---------------------------------------------------------------------------
# basic geometry
# ---------------------------------------------------------------------------
def random_crop_flip(image: np.ndarray, pad: int, rng) -> np.ndarray:
    """Zero-pad by ``pad``, crop back to the original size, flip horizontally half the time."""
    rng = _rng(rng)
    c, h, w = image.shape
    if pad:
        padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
        dy, dx = rng.integers(0, 2 * pad + 1, size=2)
        image = padded[:, dy:dy + h, dx:dx + w]
    if rng.random() < 0.5:
        image = image[:, :, ::-1]
    return np.ascontiguousarray(image)


def _gray(img: np.ndarray) -> np.ndarray:
    if img.shape[0] != 3:
        return img.mean(axis=0, keepdims=True)
    return (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2])[None]


def _blend(a: np.ndarray, b: np.ndarray, factor: float) -> np.ndarray:
    """``b + factor * (a - b)``: factor 1 returns ``a``, 0 returns ``b``."""
    return b + factor * (a - b)


def color_jitter(image: np.ndarray, strength: float, rng) -> np.ndarray:
    rng = _rng(rng)
    out = image
    for kind in rng.permutation(3):
        f = float(rng.uniform(1 - strength, 1 + strength))
        if kind == 0:
            out = out * f
        elif kind == 1:
            out = _blend(out, np.full_like(out, _gray(out).mean()), f)
        else:
            out = _blend(out, np.broadcast_to(_gray(out), out.shape), f)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


# ---------------------------------------------------------------------------
# RandAugment
# ---------------------------------------------------------------------------
def _affine(img: np.ndarray, matrix: np.ndarray, offset_fn) -> np.ndarray:
    h, w = img.shape[1:]
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - matrix @ centre + offset_fn(h, w)
    return np.stack([ndimage.affine_transform(ch, matrix, offset=offset, order=1, mode="nearest")
                     for ch in img])


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the centre; edges replicate the border so constant images stay constant."""
    a = math.radians(degrees)
    m = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]])
    return _affine(img, m, lambda h, w: 0.0)


def _shear(img, s, axis):
    m = np.eye(2)
    m[1 - axis, axis] = s
    return _affine(img, m, lambda h, w: 0.0)


def _translate(img, frac, axis):
    shift = [0.0, 0.0, 0.0]
    shift[2 - axis] = frac * img.shape[2 - axis]
    return ndimage.shift(img, shift, order=1, mode="nearest")


def _auto_contrast(img):
    lo = img.min(axis=(1, 2), keepdims=True)
    hi = img.max(axis=(1, 2), keepdims=True)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.where(hi > lo, (img - lo) / span, img)


def _equalize(img):
    out = np.empty_like(img)
    for c, ch in enumerate(img):
        q = np.clip(np.round(ch * 255), 0, 255).astype(np.int64)
        hist = np.bincount(q.ravel(), minlength=256)
        cdf = np.cumsum(hist)
        nz = cdf[hist > 0]
        lo, total = (nz[0] if nz.size else 0), cdf[-1]
        if total == lo:
            out[c] = ch
            continue
        out[c] = (cdf[q] - lo) / (total - lo)
    return out


def _posterize(img, s):
    bits = 8 - int(round(4 * s))
    if bits >= 8:
        return img
    q = np.floor(np.clip(img, 0, 1) * 255).astype(np.int64)
    shift = 8 - bits
    return ((q >> shift) << shift) / 255.0


def _solarize(img, s):
    return np.where(img > 1.0 - s, 1.0 - img, img)


def _sharpness(img, factor):
    kernel = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0
    smooth = np.stack([ndimage.convolve(ch, kernel, mode="nearest") for ch in img])
    return _blend(img, smooth, factor)


def _signed(rng) -> float:
    return 1.0 if rng.random() < 0.5 else -1.0


# each op maps (image, strength in [0, 1], rng) -> image; strength 0 is the identity
RAND_AUGMENT_OPS = {
    "identity": lambda im, s, r: im,
    "auto_contrast": lambda im, s, r: _blend(_auto_contrast(im), im, s),
    "equalize": lambda im, s, r: _blend(_equalize(im), im, s),
    "rotate": lambda im, s, r: im if s == 0 else rotate(im, 30.0 * s * _signed(r)),
    "posterize": lambda im, s, r: _posterize(im, s),
    "solarize": lambda im, s, r: _solarize(im, s),
    "color": lambda im, s, r: _blend(im, np.broadcast_to(_gray(im), im.shape), 1 + 0.9 * s * _signed(r)),
    "contrast": lambda im, s, r: _blend(im, np.full_like(im, _gray(im).mean()), 1 + 0.9 * s * _signed(r)),
    "brightness": lambda im, s, r: _blend(im, np.zeros_like(im), 1 + 0.9 * s * _signed(r)),
    "sharpness": lambda im, s, r: _sharpness(im, 1 + 0.9 * s * _signed(r)),
    "shear_x": lambda im, s, r: im if s == 0 else _shear(im, 0.3 * s * _signed(r), 1),
    "shear_y": lambda im, s, r: im if s == 0 else _shear(im, 0.3 * s * _signed(r), 0),
    "translate_x": lambda im, s, r: im if s == 0 else _translate(im, 0.45 * s * _signed(r), 1),
    "translate_y": lambda im, s, r: im if s == 0 else _translate(im, 0.45 * s * _signed(r), 0),
}


def rand_augment(image: np.ndarray, layers: int = 2, magnitude: int = 9, prob: float = 0.5,
                 seed=None) -> np.ndarray:
    """Apply ``layers`` uniformly drawn ops, each with probability ``prob``."""
    if not 0 <= magnitude <= MAX_MAGNITUDE:
        raise ValueError(f"magnitude must lie in 0..{MAX_MAGNITUDE}, got {magnitude}")
    rng = _rng(seed)
    names = list(RAND_AUGMENT_OPS)
    s = magnitude / MAX_MAGNITUDE
    out = image.astype(np.float64)
    changed = False
    for _ in range(layers):
        name = names[int(rng.integers(len(names)))]
        if rng.random() < prob:
            out = RAND_AUGMENT_OPS[name](out, s, rng)
            changed = True
    if not changed:
        return image.copy()
    return np.clip(out, 0.0, 1.0).astype(image.dtype)


def random_erase(image: np.ndarray, prob: float = 0.25, seed=None, return_box: bool = False,
                 area=(0.02, 0.33), log_ratio=(math.log(0.3), math.log(1 / 0.3))):
    """With probability ``prob`` replace one rectangle by uniform noise.

    The rectangle covers an integer area fraction inside ``area``; pixels
    outside it are untouched.
    """
    rng = _rng(seed)
    out = image.copy()
    box = None
    if rng.random() < prob:
        c, h, w = image.shape
        for _ in range(10):
            target = rng.uniform(*area) * h * w
            ratio = math.exp(rng.uniform(*log_ratio))
            eh = int(round(math.sqrt(target * ratio)))
            ew = int(round(math.sqrt(target / ratio)))
            if not (0 < eh <= h and 0 < ew <= w):
                continue
            if not area[0] <= eh * ew / (h * w) <= area[1]:
                continue
            y0 = int(rng.integers(0, h - eh + 1))
            x0 = int(rng.integers(0, w - ew + 1))
            out[:, y0:y0 + eh, x0:x0 + ew] = rng.uniform(size=(c, eh, ew)).astype(image.dtype)
            box = (y0, x0, eh, ew)
            break
    return (out, box) if return_box else out


# ---------------------------------------------------------------------------
# batch pipeline
# ---------------------------------------------------------------------------
AUGMENTATION_MODES = ("none", "basic", "three_aug", "randaug", "heavy")


def augment_batch(images: np.ndarray, labels: np.ndarray, num_classes: int, mode: str,
                  smoothing: float, cfg: AugmentationConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    """Augmented images and soft target rows for one training batch.

    ``basic``: pad-crop + flip; ``three_aug``: plus colour jitter; ``randaug``:
    basic + RandAugment; ``heavy``: basic + RandAugment + random erasing, then
    MixUp or CutMix per batch.
    Label smoothing applies in every mode.
    """
    if mode not in AUGMENTATION_MODES:
        raise ValueError(f"unknown augmentation {mode!r}")
    rng = _rng(rng)
    pad = max(1, round(cfg.pad * images.shape[-1] / 32)) if cfg.pad else 0
    out = np.empty_like(images)
    for i, img in enumerate(images):
        if mode != "none":
            img = random_crop_flip(img, pad, rng)
        if mode == "three_aug":
            img = color_jitter(img, cfg.jitter, rng)
        if mode in ("randaug", "heavy"):
            img = rand_augment(img, cfg.ra_layers, cfg.ra_magnitude, cfg.ra_prob, rng)
        if mode == "heavy":
            img = random_erase(img, cfg.erase_prob, rng)
        out[i] = img
    targets = label_smooth(labels, smoothing, num_classes)
    if mode == "heavy" and len(images) > 1:
        if rng.random() < cfg.mix_mode_prob:
            out, targets, _ = mixup(out, targets, cfg.mix_alpha, rng)
        else:
            out, targets, _ = cutmix(out, targets, cfg.mix_alpha, rng)
    return out, targets
