"""Synthetic datasets with known ground truth, and their on-disk format.

The image task places a class-informative square patch on a background whose
brightness is spuriously correlated with the class label: at correlation rho
the background level matches the class with probability rho and is uniform
otherwise.  Both cues are individually sufficient on a rho=1 split, which is
what makes the input-gradient penalty measurable: with provenance masks the
patch is the only sanctioned evidence.

Every sample records the exact patch support, so downstream code never has to
guess where the sanctioned evidence lives.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from .synthesis import ProvenanceMask


class DatasetError(ValueError):
    pass


MAGIC = b"PVGD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")  # magic, version, H, W, C, N, num_classes


@dataclass(frozen=True)
class ToyImageSpec:
    image_size: int = 16
    channels: int = 1
    num_classes: int = 2
    num_train: int = 512
    num_test: int = 512
    patch_size: int = 6
    rho_train: float = 1.0
    rho_test: float = 0.0
    noise_sigma: float = 0.05
    patch_levels: Optional[Tuple[float, ...]] = None
    background_levels: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.image_size < 1 or self.channels < 1:
            raise DatasetError(
                f"image_size and channels must be positive, got {self.image_size}, {self.channels}"
            )
        if self.num_classes < 2 or self.num_classes > 15:
            # group ids c * K + b must fit the uint8 column with room to spare
            raise DatasetError(f"num_classes must be in [2, 15], got {self.num_classes}")
        if not 1 <= self.patch_size <= self.image_size:
            raise DatasetError(
                f"patch_size {self.patch_size} must fit the {self.image_size}-pixel image"
            )
        for name, rho in (("rho_train", self.rho_train), ("rho_test", self.rho_test)):
            if not 0.0 <= rho <= 1.0:
                raise DatasetError(f"{name} must be in [0, 1], got {rho}")
        if self.noise_sigma < 0:
            raise DatasetError(f"noise_sigma must be nonnegative, got {self.noise_sigma}")
        for name, levels in (
            ("patch_levels", self.patch_levels),
            ("background_levels", self.background_levels),
        ):
            if levels is not None and len(levels) != self.num_classes:
                raise DatasetError(
                    f"{name} must list one level per class, got {len(levels)}"
                )

    def resolved_patch_levels(self) -> np.ndarray:
        if self.patch_levels is not None:
            return np.asarray(self.patch_levels, dtype=np.float64)
        return np.linspace(0.15, 0.85, self.num_classes)

    def resolved_background_levels(self) -> np.ndarray:
        if self.background_levels is not None:
            return np.asarray(self.background_levels, dtype=np.float64)
        return np.linspace(0.35, 0.65, self.num_classes)


@dataclass
class ImageDataset:
    """One split: images (N, H, W, C), labels, patch masks and group ids.

    The group id of a sample is class * num_classes + background_class, the
    unit worst-group accuracy minimizes over.
    """

    images: np.ndarray
    labels: np.ndarray
    masks: np.ndarray
    groups: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, H, W, C), got {self.images.shape}")
        n = self.images.shape[0]
        if not (self.labels.shape == self.groups.shape == (n,)):
            raise DatasetError("labels and groups must be one entry per image")
        if self.masks.shape != self.images.shape[:3]:
            raise DatasetError(
                f"masks shape {self.masks.shape} does not match images {self.images.shape}"
            )
        if self.images.dtype != np.float64:
            raise DatasetError(f"images must be float64, got {self.images.dtype}")
        if self.labels.dtype != np.uint16:
            raise DatasetError(f"labels must be uint16, got {self.labels.dtype}")
        if self.masks.dtype != np.uint8 or self.groups.dtype != np.uint8:
            raise DatasetError("masks and groups must be uint8")
        if self.labels.size and int(self.labels.max()) >= self.num_classes:
            raise DatasetError("label out of range for num_classes")
        if self.labels.size and not np.array_equal(
            self.groups // self.num_classes, self.labels
        ):
            raise DatasetError("group ids must encode class * num_classes + background")

    def __len__(self) -> int:
        return self.images.shape[0]

    def image(self, i: int) -> np.ndarray:
        return self.images[i]

    def label(self, i: int) -> int:
        return int(self.labels[i])

    def target_mask(self, i: int) -> ProvenanceMask:
        return ProvenanceMask(self.masks[i].astype(np.float64), "edit_target")


def generate_image_split(
    spec: ToyImageSpec, n: int, rho: float, rng: np.random.Generator
) -> ImageDataset:
    """Draw n samples at background correlation rho.

    Per sample the draw order is fixed (correlation coin, alternative
    background, patch row, patch column, noise field) and every draw happens
    on every sample, so equal seeds give bit-identical datasets regardless of
    which branches are taken.
    """
    h = w = spec.image_size
    c = spec.channels
    k = spec.num_classes
    p = spec.patch_size
    patch_levels = spec.resolved_patch_levels()
    background_levels = spec.resolved_background_levels()

    images = np.empty((n, h, w, c), dtype=np.float64)
    labels = np.empty(n, dtype=np.uint16)
    masks = np.zeros((n, h, w), dtype=np.uint8)
    groups = np.empty(n, dtype=np.uint8)
    for i in range(n):
        cls = i % k
        coin = rng.random()
        b_alt = int(rng.integers(k))
        bg = cls if coin < rho else b_alt
        r0 = int(rng.integers(h - p + 1))
        c0 = int(rng.integers(w - p + 1))
        noise = rng.normal(0.0, spec.noise_sigma, size=(h, w, c))
        img = np.full((h, w, c), background_levels[bg])
        img[r0 : r0 + p, c0 : c0 + p, :] = patch_levels[cls]
        images[i] = img + noise
        labels[i] = cls
        masks[i, r0 : r0 + p, c0 : c0 + p] = 1
        groups[i] = cls * k + bg
    return ImageDataset(images, labels, masks, groups, num_classes=k)


def generate_image_dataset(
    spec: ToyImageSpec, split: str, rng: np.random.Generator
) -> ImageDataset:
    if split == "train":
        return generate_image_split(spec, spec.num_train, spec.rho_train, rng)
    if split == "test":
        return generate_image_split(spec, spec.num_test, spec.rho_test, rng)
    raise DatasetError(f"split must be 'train' or 'test', got {split!r}")


# ------------------------------------------------------------------ file IO


def write_dataset(path: str, ds: ImageDataset) -> None:
    n, h, w, c = ds.images.shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, h, w, c, n, ds.num_classes)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(ds.images, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.labels, dtype="<u2").tobytes())
        fh.write(np.ascontiguousarray(ds.masks, dtype=np.uint8).tobytes())
        fh.write(np.ascontiguousarray(ds.groups, dtype=np.uint8).tobytes())


def read_dataset(path: str) -> ImageDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise DatasetError(f"{path}: too short to hold a dataset header")
    magic, version, h, w, c, n, k = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise DatasetError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported format version {version}")
    sizes = (n * h * w * c * 8, n * 2, n * h * w, n)
    if len(blob) != _HEADER.size + sum(sizes):
        raise DatasetError(
            f"{path}: expected {_HEADER.size + sum(sizes)} bytes, found {len(blob)}"
        )
    off = _HEADER.size
    images = np.frombuffer(blob, dtype="<f8", count=n * h * w * c, offset=off)
    off += sizes[0]
    labels = np.frombuffer(blob, dtype="<u2", count=n, offset=off)
    off += sizes[1]
    masks = np.frombuffer(blob, dtype=np.uint8, count=n * h * w, offset=off)
    off += sizes[2]
    groups = np.frombuffer(blob, dtype=np.uint8, count=n, offset=off)
    return ImageDataset(
        images.reshape(n, h, w, c).astype(np.float64),
        labels.astype(np.uint16),
        masks.reshape(n, h, w).copy(),
        groups.copy(),
        num_classes=int(k),
    )


# ----------------------------------------------------------------- skeletons


@dataclass(frozen=True)
class ToySkeletonSpec:
    num_skeletons: int = 6
    num_frames: int = 8
    in_features: int = 2
    num_classes: int = 2
    num_train: int = 256
    num_test: int = 256
    noise_sigma: float = 0.05
    walk_sigma: float = 0.25

    def __post_init__(self):
        if self.num_skeletons < 2:
            raise DatasetError("need at least one actor and one distractor skeleton")
        if self.num_frames < 2 or self.in_features < 1:
            raise DatasetError(
                f"need at least 2 frames and 1 coordinate, got {self.num_frames}, {self.in_features}"
            )
        if self.num_classes < 2:
            raise DatasetError(f"num_classes must be at least 2, got {self.num_classes}")
        if self.noise_sigma < 0 or self.walk_sigma < 0:
            raise DatasetError("noise levels must be nonnegative")


@dataclass
class SkeletonDataset:
    """Clips of shape (N, P, F, E) with the true actor index per clip."""

    feats: np.ndarray
    labels: np.ndarray
    actors: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.feats.ndim != 4:
            raise DatasetError(f"feats must be (N, P, F, E), got {self.feats.shape}")
        n = self.feats.shape[0]
        if self.labels.shape != (n,) or self.actors.shape != (n,):
            raise DatasetError("labels and actors must be one entry per clip")
        if self.actors.size and int(self.actors.max()) >= self.feats.shape[1]:
            raise DatasetError("actor index out of range")

    def __len__(self) -> int:
        return self.feats.shape[0]


def generate_skeleton_split(
    spec: ToySkeletonSpec, n: int, rng: np.random.Generator
) -> SkeletonDataset:
    """The actor skeleton traces a sinusoid whose frequency encodes the class;
    the rest perform class-independent random walks."""
    p, f, e = spec.num_skeletons, spec.num_frames, spec.in_features
    k = spec.num_classes
    t = np.arange(f, dtype=np.float64)
    feats = np.empty((n, p, f, e), dtype=np.float64)
    labels = np.empty(n, dtype=np.uint16)
    actors = np.empty(n, dtype=np.uint8)
    for i in range(n):
        cls = i % k
        actor = int(rng.integers(p))
        phases = rng.uniform(0.0, 2.0 * np.pi, size=e)
        walk = np.cumsum(rng.normal(0.0, spec.walk_sigma, size=(p, f, e)), axis=1)
        noise = rng.normal(0.0, spec.noise_sigma, size=(f, e))
        clip = walk
        freq = cls + 1.0
        clip[actor] = np.sin(2.0 * np.pi * freq * t[:, None] / f + phases[None, :]) + noise
        feats[i] = clip
        labels[i] = cls
        actors[i] = actor
    return SkeletonDataset(feats, labels, actors, num_classes=k)


def generate_skeleton_dataset(
    spec: ToySkeletonSpec, split: str, rng: np.random.Generator
) -> SkeletonDataset:
    if split == "train":
        return generate_skeleton_split(spec, spec.num_train, rng)
    if split == "test":
        return generate_skeleton_split(spec, spec.num_test, rng)
    raise DatasetError(f"split must be 'train' or 'test', got {split!r}")
