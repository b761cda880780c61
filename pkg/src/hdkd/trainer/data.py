"""Datasets: synthetic geometric patterns, directory-per-class images, augmentation and balancing."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

SHAPES = ("disk", "square", "triangle", "plus")
IMAGE_EXTS = (".png", ".ppm", ".pgm", ".jpg", ".jpeg", ".bmp")


@dataclass
class DatasetSplit:
    images: np.ndarray  # [N, C, H, W] float in [0, 1]
    labels: np.ndarray  # [N] int64
    num_classes: int
    class_names: tuple = ()

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def take(self, idx) -> "DatasetSplit":
        idx = np.asarray(idx, dtype=np.int64)
        return DatasetSplit(self.images[idx], self.labels[idx], self.num_classes, self.class_names)


# -- synthetic ---------------------------------------------------------------

def _shape_mask(kind: str, size: int, cx: float, cy: float, r: float, angle: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    c, s = math.cos(angle), math.sin(angle)
    u, v = c * dx + s * dy, -s * dx + c * dy
    if kind == "disk":
        return (dx * dx + dy * dy) <= r * r
    if kind == "square":
        return (np.abs(u) <= r * 0.85) & (np.abs(v) <= r * 0.85)
    if kind == "triangle":
        # equilateral, circumradius r: three half-planes at distance r/2 from the centre
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            theta = math.pi / 2 + 2 * math.pi * k / 3
            inside &= (math.cos(theta) * u + math.sin(theta) * v) <= r * 0.5
        return inside
    if kind == "plus":
        arm = r * 0.35
        return ((np.abs(u) <= arm) & (np.abs(v) <= r)) | ((np.abs(v) <= arm) & (np.abs(u) <= r))
    raise ValueError(f"unknown shape {kind!r}")


def synthetic_dataset(n: int, image_size: int = 64, num_classes: int = 4, seed: int = 0,
                      noise: float = 0.12, clutter: int = 2) -> DatasetSplit:
    """Labeled geometric-pattern images (balanced, ``n`` total).

    Each image holds one class shape (random position, size, rotation and
    colour) on a smooth random background with ``clutter`` small distractor
    blobs and additive Gaussian noise.
    """
    if not 1 <= num_classes <= len(SHAPES):
        raise ValueError(f"synthetic mode supports 1..{len(SHAPES)} classes")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    S = image_size
    yy, xx = np.mgrid[0:S, 0:S] / S
    images = np.empty((n, 3, S, S), dtype=np.float32)
    for i, y in enumerate(labels):
        bg = rng.uniform(0.2, 0.6, 3)[:, None, None] + rng.uniform(-0.2, 0.2, (3, 1, 1)) * (
            xx * math.cos(rng.uniform(0, 2 * math.pi)) + yy * math.sin(rng.uniform(0, 2 * math.pi)))
        img = np.broadcast_to(bg, (3, S, S)).copy()
        for _ in range(clutter):
            cx, cy = rng.uniform(0, S, 2)
            rad = rng.uniform(0.04, 0.08) * S
            blob = ((xx * S - cx) ** 2 + (yy * S - cy) ** 2) <= rad * rad
            img[:, blob] = rng.uniform(0, 1, 3)[:, None]
        r = rng.uniform(0.18, 0.3) * S
        cx, cy = rng.uniform(r, S - r, 2)
        mask = _shape_mask(SHAPES[y], S, cx, cy, r, rng.uniform(0, 2 * math.pi))
        colour = rng.uniform(0, 1, 3)
        colour = np.where(np.abs(colour - bg.mean(axis=(1, 2))) < 0.25, 1.0 - colour, colour)
        img[:, mask] = colour[:, None]
        img += rng.normal(0, noise, img.shape)
        images[i] = np.clip(img, 0, 1)
    return DatasetSplit(images, labels, num_classes, SHAPES[:num_classes])


# -- on-disk -----------------------------------------------------------------

def load_image_dir(root: str, image_size: int) -> DatasetSplit:
    """Load ``root/<class_name>/*.{png,ppm,...}``; classes sorted by name."""
    from PIL import Image

    classes = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    if not classes:
        raise FileNotFoundError(f"no class directories under {root}")
    images, labels = [], []
    for k, name in enumerate(classes):
        files = sorted(f for f in os.listdir(os.path.join(root, name)) if f.lower().endswith(IMAGE_EXTS))
        for f in files:
            with Image.open(os.path.join(root, name, f)) as im:
                im = im.convert("RGB").resize((image_size, image_size), Image.BILINEAR)
                images.append(np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0)
            labels.append(k)
    if not images:
        raise FileNotFoundError(f"no images found under {root}")
    return DatasetSplit(np.stack(images), np.array(labels), len(classes), tuple(classes))


# -- augmentation --------------------------------------------------------------

@dataclass(frozen=True)
class AugmentPolicy:
    flip_p: float = 0.0
    rotate_deg: float = 0.0
    crop_scale: tuple = (1.0, 1.0)

    @property
    def is_identity(self) -> bool:
        return self.flip_p == 0 and self.rotate_deg == 0 and self.crop_scale == (1.0, 1.0)


POLICIES = {
    "identity": AugmentPolicy(),
    "student": AugmentPolicy(flip_p=0.5),
    "teacher": AugmentPolicy(flip_p=0.5, rotate_deg=15.0, crop_scale=(0.8, 1.0)),
}


def resolve_policy(policy) -> AugmentPolicy:
    if isinstance(policy, str):
        try:
            return POLICIES[policy]
        except KeyError:
            raise ValueError(f"unknown augmentation policy {policy!r}") from None
    return policy


def flip_only(policy) -> bool:
    policy = resolve_policy(policy)
    return policy.rotate_deg == 0 and policy.crop_scale == (1.0, 1.0)


def augment(batch: np.ndarray, policy, rng: np.random.Generator, return_flips: bool = False):
    """Apply a policy sample by sample; ``policy`` may be a name from ``POLICIES``.

    With ``return_flips`` the per-sample horizontal-flip flags are returned too.
    """
    policy = resolve_policy(policy)
    if policy.is_identity:
        return (batch, np.zeros(len(batch), dtype=bool)) if return_flips else batch
    out = np.empty_like(batch)
    flips = np.zeros(len(batch), dtype=bool)
    C, H, W = batch.shape[1:]
    centre = np.array([(H - 1) / 2, (W - 1) / 2])
    for i, img in enumerate(batch):
        flip = flips[i] = rng.random() < policy.flip_p
        if policy.rotate_deg == 0 and policy.crop_scale == (1.0, 1.0):
            out[i] = img[:, :, ::-1] if flip else img
            continue
        angle = math.radians(rng.uniform(-policy.rotate_deg, policy.rotate_deg))
        side = math.sqrt(rng.uniform(*policy.crop_scale))
        max_shift = (1 - side) * np.array([H, W]) / 2
        shift = rng.uniform(-1, 1, 2) * max_shift
        c, s = math.cos(angle), math.sin(angle)
        # output pixel -> input pixel: scale into the crop, rotate about the centre
        mat = side * np.array([[c, -s], [s, c]])
        offset = centre + shift - mat @ centre
        src = img[:, :, ::-1] if flip else img
        for ch in range(C):
            out[i, ch] = ndimage.affine_transform(src[ch], mat, offset=offset, order=1, mode="nearest")
    return (out, flips) if return_flips else out


# -- balancing & subsets -------------------------------------------------------

def balance_dataset(split: DatasetSplit) -> DatasetSplit:
    """Duplicate minority-class samples (cyclically, in index order) up to the majority count."""
    hist = split.histogram()
    if np.any(hist == 0):
        empty = [k for k in range(split.num_classes) if hist[k] == 0]
        raise ValueError(f"classes {empty} have no samples")
    target = hist.max()
    idx = []
    for k in range(split.num_classes):
        members = np.flatnonzero(split.labels == k)
        idx.append(np.resize(members, target))
    order = np.sort(np.concatenate(idx), kind="stable")
    return split.take(order)


def class_subset_indices(split: DatasetSplit, per_class: int, seed: int) -> np.ndarray:
    """Seeded per-class selection of up to ``per_class`` samples (all of a class if it has fewer)."""
    rng = np.random.default_rng(seed)
    picks = []
    for k in range(split.num_classes):
        members = np.flatnonzero(split.labels == k)
        picks.append(rng.permutation(members)[:per_class])
    return np.sort(np.concatenate(picks))


def class_subset(split: DatasetSplit, per_class: int, seed: int) -> DatasetSplit:
    return split.take(class_subset_indices(split, per_class, seed))


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator, shuffle: bool = True,
                    drop_last: bool = False):
    """Index batches; a trailing singleton is dropped since batch norm cannot train on it."""
    order = rng.permutation(n) if shuffle else np.arange(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2 or not shuffle:
            yield idx
