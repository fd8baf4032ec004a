"""Desk-scale digit dataset: sklearn digits upsampled to 16x16 with
deterministic shift augmentation and source-disjoint splits."""
import numpy as np
from sklearn.datasets import load_digits

IMAGE_SIZE = 16
CLASS_COUNT = 10


def load_source():
    """All 1797 source digits as (N, 1, 16, 16) float images in [0, 1]."""
    digits = load_digits()
    imgs = digits.images.astype(np.float64) / 16.0
    up = np.repeat(np.repeat(imgs, 2, axis=1), 2, axis=2)
    return up[:, None, :, :], digits.target.astype(np.int64)


def split_sources(n, seed):
    """Disjoint source-level index splits (train, calibration, validation).

    Splitting before augmentation guarantees no augmented sample in one
    split shares a source image with another split.
    """
    perm = np.random.default_rng(seed).permutation(n)
    return perm[:1200], perm[1200:1400], perm[1400:]


def _shift(img, dy, dx):
    out = np.zeros_like(img)
    h, w = img.shape[1:]
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    ys_src = slice(max(-dy, 0), h + min(-dy, 0))
    xs_src = slice(max(-dx, 0), w + min(-dx, 0))
    out[:, ys, xs] = img[:, ys_src, xs_src]
    return out


def augment(images, labels, variants, seed, max_shift=2):
    """`variants` deterministic copies per source image.

    The first variant is always the untouched image; the rest are shifted
    by up to `max_shift` pixels and scaled by a small intensity jitter.
    """
    rng = np.random.default_rng(seed)
    out_x = []
    out_y = []
    for img, lab in zip(images, labels):
        for v in range(variants):
            if v == 0:
                out_x.append(img)
            else:
                dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
                gain = rng.uniform(0.85, 1.15)
                out_x.append(np.clip(_shift(img, int(dy), int(dx)) * gain,
                                     0.0, 1.0))
            out_y.append(lab)
    return np.stack(out_x), np.array(out_y, dtype=np.int64)


def build_splits(seed):
    """Returns dict with train/calib/val arrays; calibration has 1600 samples."""
    images, labels = load_source()
    tr, ca, va = split_sources(len(labels), seed)
    train_x, train_y = augment(images[tr], labels[tr], 10, seed + 1)
    calib_x, calib_y = augment(images[ca], labels[ca], 8, seed + 2)
    val_x, val_y = augment(images[va], labels[va], 4, seed + 3)
    assert len(calib_y) == 1600
    return {
        "train": (train_x, train_y),
        "calib": (calib_x, calib_y),
        "val": (val_x, val_y),
    }
