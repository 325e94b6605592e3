"""Datasets: binary CIFAR loading, synthetic generation, splits, augmentation.

A Dataset stores images as one [N, H, W, C] float32 array in [0, 1] plus
parallel id/label arrays.  Splitting utilities work on example ids so that
chunk membership is stable however the arrays are sliced.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from .engine import ValidationError

_CIFAR_RECORD = 3073  # label byte + 3 * 32 * 32 channel planes


@dataclass(frozen=True)
class Example:
    id: int
    image: np.ndarray
    label: int
    fine_label: int | None = None


class Dataset:
    def __init__(self, images, labels, ids=None, fine_labels=None, coarse_map=None):
        self.images = np.ascontiguousarray(images, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.ids = (np.arange(len(self.labels), dtype=np.int64)
                    if ids is None else np.asarray(ids, dtype=np.int64))
        self.fine_labels = None if fine_labels is None else np.asarray(fine_labels, dtype=np.int64)
        # fine class index -> coarse class index, when the dataset is hierarchical
        self.coarse_map = None if coarse_map is None else tuple(int(c) for c in coarse_map)
        if self.images.ndim != 4:
            raise ValidationError(f"images must be [N,H,W,C], got {self.images.shape}")
        if not (len(self.images) == len(self.labels) == len(self.ids)):
            raise ValidationError("images/labels/ids length mismatch")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValidationError("example ids must be unique")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValidationError("pixel values must lie in [0, 1]")
        if self.fine_labels is not None and self.coarse_map is not None:
            if not np.array_equal(np.asarray(self.coarse_map)[self.fine_labels], self.labels):
                raise ValidationError("fine labels inconsistent with the coarsening table")
        self._index = {int(e): i for i, e in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, i):
        fl = None if self.fine_labels is None else int(self.fine_labels[i])
        return Example(id=int(self.ids[i]), image=self.images[i],
                       label=int(self.labels[i]), fine_label=fl)

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def rows(self, ids):
        """Positional indices for the given example ids (order preserved)."""
        try:
            return np.asarray([self._index[int(e)] for e in ids], dtype=np.int64)
        except KeyError as exc:
            raise ValidationError(f"unknown example id {exc.args[0]}") from None

    def content_hash(self):
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        h.update(self.ids.tobytes())
        if self.fine_labels is not None:
            h.update(self.fine_labels.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class CenterSplit:
    """Ordered disjoint chunks of example ids covering the training pool."""

    chunks: tuple
    seed: int
    source_hash: str

    def __post_init__(self):
        all_ids = np.concatenate(self.chunks) if self.chunks else np.array([], dtype=np.int64)
        if len(np.unique(all_ids)) != len(all_ids):
            raise ValidationError("center chunks overlap")

    @property
    def stages(self):
        return len(self.chunks)

    def split_hash(self):
        h = hashlib.sha256()
        for c in self.chunks:
            h.update(np.asarray(c, dtype=np.int64).tobytes())
            h.update(b"|")
        return h.hexdigest()


def load_cifar_binary(path):
    """Read consecutive 3073-byte records (label byte + 3 channel planes)."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % _CIFAR_RECORD != 0:
        raise ValidationError(
            f"{path}: size {raw.size} is not a multiple of {_CIFAR_RECORD}")
    records = raw.reshape(-1, _CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= 10:
        raise ValidationError(f"{path}: label byte {labels.max()} out of range [0, 10)")
    planes = records[:, 1:].reshape(-1, 3, 32, 32)  # CHW planes, R then G then B
    images = planes.transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return Dataset(images, labels)


def generate_synthetic(n_per_class, classes, image_shape, noise_sigma, seed,
                       fine_split=None, template_contrast=1.0, label_noise=0.0,
                       instance=0):
    """Seeded template-plus-noise images, optionally with a fine/coarse hierarchy.

    Templates depend only on (seed, image_shape, class structure); noise and
    label corruption depend additionally on `instance`, so train/test draws
    share the same class templates.  `fine_split` lists subclasses per coarse
    class, e.g. (1, 2) -> three fine classes where coarse 1 splits in two.
    `template_contrast` scales template separation relative to the noise;
    `label_noise` relabels that fraction of examples uniformly at random.
    """
    if classes < 2:
        raise ValidationError(f"need >= 2 classes, got {classes}")
    h, w, c = image_shape
    if h < 1 or w < 1 or c < 1:
        raise ValidationError(f"degenerate image shape {image_shape}")
    if not 0.0 <= label_noise < 1.0:
        raise ValidationError(f"label_noise must be in [0, 1), got {label_noise}")
    if fine_split is not None:
        if len(fine_split) != classes or any(int(s) < 1 for s in fine_split):
            raise ValidationError(f"fine_split {fine_split} incompatible with {classes} classes")
        n_fine = int(sum(fine_split))
        coarse_map = tuple(coarse for coarse, s in enumerate(fine_split) for _ in range(int(s)))
    else:
        n_fine = classes
        coarse_map = None

    template_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=(0x7e3a,))))
    templates = 0.5 + 0.25 * template_contrast * template_rng.standard_normal((n_fine, h, w, c))
    templates = np.clip(templates, 0.0, 1.0).astype(np.float32)

    noise_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=(0x5b21, instance))))
    n = n_per_class * n_fine
    fine = np.repeat(np.arange(n_fine), n_per_class)
    images = templates[fine] + noise_sigma * noise_rng.standard_normal((n, h, w, c)).astype(np.float32)
    images = np.clip(images, 0.0, 1.0)

    if coarse_map is not None:
        labels = np.asarray(coarse_map, dtype=np.int64)[fine]
        fine_labels = fine
    else:
        labels = fine.astype(np.int64)
        fine_labels = None

    if label_noise > 0.0:
        flip_rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence(entropy=seed, spawn_key=(0x11f9, instance))))
        flip = flip_rng.random(n) < label_noise
        if fine_labels is not None:
            fine_labels = fine_labels.copy()
            fine_labels[flip] = flip_rng.integers(0, n_fine, int(flip.sum()))
            labels = np.asarray(coarse_map, dtype=np.int64)[fine_labels]
        else:
            labels = labels.copy()
            labels[flip] = flip_rng.integers(0, classes, int(flip.sum()))

    return Dataset(images, labels, fine_labels=fine_labels, coarse_map=coarse_map)


def train_val_split(dataset, val_count, seed):
    """Seeded disjoint (train pool ids, validation ids)."""
    n = len(dataset)
    if not 0 < val_count < n:
        raise ValidationError(f"val_count {val_count} must be in (0, {n})")
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=(0x3d5c,))))
    perm = rng.permutation(dataset.ids)
    return np.sort(perm[val_count:]), np.sort(perm[:val_count])


def multi_center_split(dataset, stages, seed, pool_ids=None):
    """Seeded shuffle of the pool then contiguous partition into S chunks."""
    ids = dataset.ids if pool_ids is None else np.asarray(pool_ids, dtype=np.int64)
    if stages < 1 or stages > len(ids):
        raise ValidationError(f"cannot split {len(ids)} examples into {stages} chunks")
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=(0x914e,))))
    perm = rng.permutation(ids)
    chunks = tuple(np.array(c) for c in np.array_split(perm, stages))
    return CenterSplit(chunks=chunks, seed=seed, source_hash=dataset.content_hash())


def epoch_crop_offsets(seed, epoch, max_id, pad):
    """Crop offsets for every example id, for one epoch.

    A pure function of (seed, epoch, id): batch order cannot change which
    crop an example receives.
    """
    rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=(0xa06f, epoch))))
    return rng.integers(0, 2 * pad + 1, size=(max_id + 1, 2))


def pad_crop_augment(image, pad, offset):
    """Zero-pad by `pad` each side, crop back to the original size at `offset`."""
    if pad == 0:
        return image
    h, w, _ = image.shape
    dy, dx = int(offset[0]), int(offset[1])
    padded = np.pad(image, ((pad, pad), (pad, pad), (0, 0)))
    return padded[dy:dy + h, dx:dx + w, :]


def augment_batch(images, ids, pad, offsets):
    if pad == 0:
        return images
    out = np.empty_like(images)
    for i, eid in enumerate(ids):
        out[i] = pad_crop_augment(images[i], pad, offsets[int(eid)])
    return out


def export_table(dataset, path):
    """Write (id, label, fine_label, flattened pixels) rows as CSV."""
    n_pix = int(np.prod(dataset.image_shape))
    with open(path, "w", encoding="utf-8") as fh:
        cols = ["id", "label", "fine_label"] + [f"p{i}" for i in range(n_pix)]
        fh.write(",".join(cols) + "\n")
        for i in range(len(dataset)):
            fine = "" if dataset.fine_labels is None else str(int(dataset.fine_labels[i]))
            pixels = [np.format_float_positional(v, unique=True, trim="0")
                      for v in dataset.images[i].ravel()]
            fh.write(f"{int(dataset.ids[i])},{int(dataset.labels[i])},{fine}," + ",".join(pixels) + "\n")
