"""Class-incremental task streams, rehearsal memory and contrastive views.

Labels inside a stream are ordinal: the class placed at position ``k`` of the
seeded class order gets label ``k``, so the classes of task ``t`` form a
contiguous block and ``Y_t`` is ``range(n_seen)``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torchvision.transforms.v2 import functional as TF

from ._validation import check_images, check_labels

__all__ = [
    "SplitSpec", "TaskDataset", "make_splits", "herding_select",
    "RehearsalMemory", "rebalance_memory", "AugmentConfig", "AugmentedPair",
    "two_view_augment", "augment_batch", "CollisionSpec",
    "generate_collision_dataset", "read_cifar_binary", "write_cifar_binary",
    "save_dataset_dir", "load_dataset_dir",
]


# --------------------------------------------------------------------------- splits

@dataclass(frozen=True)
class SplitSpec:
    total_classes: int
    base_size: int
    increment_size: int
    class_order_seed: int = 1993

    def __post_init__(self):
        if self.total_classes <= 0 or self.base_size <= 0:
            raise ValueError("total_classes and base_size must be positive")
        if self.base_size > self.total_classes:
            raise ValueError("base_size exceeds total_classes")
        rest = self.total_classes - self.base_size
        if rest and (self.increment_size <= 0 or rest % self.increment_size):
            raise ValueError(
                f"{rest} classes after the base task cannot be split into "
                f"increments of {self.increment_size}")

    @property
    def n_tasks(self) -> int:
        rest = self.total_classes - self.base_size
        return 1 + (rest // self.increment_size if rest else 0)

    @property
    def task_sizes(self) -> List[int]:
        return [self.base_size] + [self.increment_size] * (self.n_tasks - 1)

    def class_order(self) -> np.ndarray:
        """Seeded permutation of the original class ids."""
        rng = np.random.default_rng(self.class_order_seed)
        return rng.permutation(self.total_classes)


@dataclass
class TaskDataset:
    task_index: int
    images: np.ndarray                 # (n, H, W, C) in [0, 1]
    labels: np.ndarray                 # (n,) ordinal class labels
    class_set: Tuple[int, ...]
    class_names: Tuple[str, ...] = ()

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.class_set = tuple(sorted(int(c) for c in self.class_set))
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")
        if len(self.labels) and not set(np.unique(self.labels)) <= set(self.class_set):
            raise ValueError("label outside the task's class set")

    def __len__(self):
        return len(self.labels)

    def __iter__(self) -> Iterator[Tuple[np.ndarray, int]]:
        for image, label in zip(self.images, self.labels):
            yield image, int(label)

    @property
    def samples(self) -> List[Tuple[np.ndarray, int]]:
        return list(self)


def make_splits(spec: SplitSpec, images, labels,
                class_names: Optional[Sequence[str]] = None) -> List[TaskDataset]:
    """Cut a labelled dataset into class-disjoint tasks.

    ``labels`` hold original class ids in ``[0, total_classes)``. The seeded
    class order is applied first; returned labels are positions in that order.
    """
    images = check_images(images)
    labels = check_labels(labels, len(images))
    if labels.size and labels.max() >= spec.total_classes:
        raise ValueError("label id exceeds total_classes")
    if class_names is not None and len(class_names) != spec.total_classes:
        raise ValueError("class_names must have total_classes entries")

    order = spec.class_order()
    rank = np.empty_like(order)
    rank[order] = np.arange(spec.total_classes)
    ordinal = rank[labels]

    tasks, start = [], 0
    for t, size in enumerate(spec.task_sizes):
        classes = tuple(range(start, start + size))
        mask = (ordinal >= start) & (ordinal < start + size)
        names = tuple(class_names[order[c]] for c in classes) if class_names else ()
        tasks.append(TaskDataset(t, images[mask], ordinal[mask], classes, names))
        start += size
    return tasks


# --------------------------------------------------------------------------- herding

def herding_select(class_features, m: int) -> List[int]:
    """Greedy herding order over one class's features (iCaRL).

    At step k the sample whose addition brings the running exemplar mean
    closest to the class mean is taken. Ties go to the lowest index.
    """
    features = np.asarray(class_features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("herding needs a non-empty (n, d) feature array")
    n = features.shape[0]
    if not 0 <= m <= n:
        raise ValueError(f"cannot select {m} exemplars from {n} samples")

    mu = features.mean(axis=0)
    running = np.zeros_like(mu)
    available = np.ones(n, dtype=bool)
    selected: List[int] = []
    for k in range(1, m + 1):
        candidate_means = (features + running) / k
        dist = np.linalg.norm(mu - candidate_means, axis=1)
        dist[~available] = np.inf
        i = int(np.argmin(dist))
        selected.append(i)
        available[i] = False
        running += features[i]
    return selected


@dataclass
class RehearsalMemory:
    """Constant-capacity exemplar store; each class keeps its herding order."""

    capacity: int
    exemplars: Dict[int, np.ndarray] = field(default_factory=dict)
    per_class_quota: int = 0

    def __post_init__(self):
        if self.capacity < 0:
            raise ValueError("capacity must be non-negative")

    def __len__(self):
        return int(sum(len(v) for v in self.exemplars.values()))

    @property
    def classes(self) -> List[int]:
        return sorted(self.exemplars)

    def data(self) -> Tuple[np.ndarray, np.ndarray]:
        """All exemplars, class by class, as (images, labels)."""
        if not self.exemplars:
            return np.zeros((0, 1, 1, 3), np.float32), np.zeros(0, np.int64)
        images = np.concatenate([self.exemplars[c] for c in self.classes])
        labels = np.concatenate(
            [np.full(len(self.exemplars[c]), c, np.int64) for c in self.classes])
        return images, labels


def rebalance_memory(memory: RehearsalMemory, new_task: TaskDataset,
                     extractor: Callable[[np.ndarray], np.ndarray]) -> RehearsalMemory:
    """End-of-task selection and eviction.

    The quota becomes ``capacity // |Y_t|``; old classes keep the prefix of
    their herding order and new classes are filled by herding on
    ``extractor(images)`` features.
    """
    seen = set(memory.exemplars) | set(new_task.class_set)
    overlap = set(memory.exemplars) & set(new_task.class_set)
    if overlap:
        raise ValueError(f"classes {sorted(overlap)} are already in memory")
    quota = memory.capacity // len(seen) if seen else 0

    kept = {c: ex[:quota].copy() for c, ex in memory.exemplars.items()}
    expected_dim = getattr(extractor, "out_dim", None)
    for c in new_task.class_set:
        images = new_task.images[new_task.labels == c]
        if len(images) == 0 or quota == 0:
            kept[c] = images[:0].copy()
            continue
        features = np.asarray(extractor(images))
        if features.ndim != 2 or features.shape[0] != len(images):
            raise ValueError(
                f"extractor returned shape {features.shape} for {len(images)} images")
        if expected_dim is not None and features.shape[1] != expected_dim:
            raise ValueError(
                f"extractor produced {features.shape[1]}-d features, expected {expected_dim}")
        order = herding_select(features, min(quota, len(images)))
        kept[c] = images[order].copy()

    out = RehearsalMemory(memory.capacity, kept, quota)
    assert len(out) <= out.capacity
    return out


# --------------------------------------------------------------------------- augmentation

@dataclass(frozen=True)
class AugmentConfig:
    """Crop-resize, horizontal flip, color jitter and grayscale, in that order."""

    crop_scale: Tuple[float, float] = (0.3, 1.0)
    crop_ratio: Tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_p: float = 0.2

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), flip_p=0.0,
                   jitter_p=0.0, grayscale_p=0.0)


PIPELINES = {
    "simclr": AugmentConfig(),
    # full hue rotation: colour stops being a usable contrastive cue
    "simclr-hue": AugmentConfig(hue=0.5),
    "identity": AugmentConfig.identity(),
}


@dataclass
class AugmentedPair:
    view_a: np.ndarray
    view_b: np.ndarray
    source_index: int
    seed: int


def _crop_box(rng, h, w, scale, ratio):
    area = h * w
    if scale == (1.0, 1.0) and ratio == (1.0, 1.0):
        return 0, 0, h, w
    for _ in range(10):
        target = area * rng.uniform(*scale)
        log_ratio = np.log(ratio)
        aspect = np.exp(rng.uniform(*log_ratio))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    return 0, 0, h, w


def _augment_view(img: torch.Tensor, rng: np.random.Generator,
                  cfg: AugmentConfig) -> torch.Tensor:
    # Every random draw happens unconditionally so that the stream of draws
    # does not depend on earlier outcomes.
    _, h, w = img.shape
    top, left, ch, cw = _crop_box(rng, h, w, cfg.crop_scale, cfg.crop_ratio)
    flip = rng.uniform() < cfg.flip_p
    jitter = rng.uniform() < cfg.jitter_p
    factors = rng.uniform(
        [1 - cfg.brightness, 1 - cfg.contrast, 1 - cfg.saturation, -cfg.hue],
        [1 + cfg.brightness, 1 + cfg.contrast, 1 + cfg.saturation, cfg.hue])
    gray = rng.uniform() < cfg.grayscale_p

    if (top, left, ch, cw) != (0, 0, h, w):
        img = TF.resized_crop(img, top, left, ch, cw, [h, w], antialias=True)
    if flip:
        img = TF.horizontal_flip(img)
    if jitter and img.shape[0] == 3:
        img = TF.adjust_brightness(img, float(factors[0]))
        img = TF.adjust_contrast(img, float(factors[1]))
        img = TF.adjust_saturation(img, float(factors[2]))
        img = TF.adjust_hue(img, float(factors[3]))
    if gray and img.shape[0] == 3:
        img = TF.rgb_to_grayscale(img, num_output_channels=3)
    return img.clamp(0.0, 1.0)


def two_view_augment(image, seed: int, config: AugmentConfig = AugmentConfig(),
                     source_index: int = -1) -> AugmentedPair:
    """Two independently transformed views of one (H, W, C) image.

    View ``v`` draws its parameters from a generator seeded by ``(seed, v)``,
    so the pair is a pure function of ``(image, seed, config)``.
    """
    image = np.asarray(image, dtype=np.float32)
    chw = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))
    views = []
    for view_id in (0, 1):
        rng = np.random.default_rng([int(seed), view_id])
        views.append(_augment_view(chw.clone(), rng, config).numpy().transpose(1, 2, 0))
    return AugmentedPair(np.ascontiguousarray(views[0]), np.ascontiguousarray(views[1]),
                         source_index, int(seed))


def augment_batch(images: np.ndarray, seeds: Sequence[int],
                  config: AugmentConfig = AugmentConfig()) -> Tuple[np.ndarray, np.ndarray]:
    pairs = [two_view_augment(img, s, config, i) for i, (img, s) in enumerate(zip(images, seeds))]
    return (np.stack([p.view_a for p in pairs]), np.stack([p.view_b for p in pairs]))


# --------------------------------------------------------------------------- collision data

SHAPES = ("square", "triangle", "circle")


@dataclass(frozen=True)
class CollisionSpec:
    """Synthetic colour/shape stream in which a new task collides with an old one.

    Task ``j`` pairs colour ``i`` with shape ``(i + j) % k``: task 0 is
    solvable by colour alone, later tasks reuse the colours on other shapes.
    """

    image_size: int = 32
    classes_per_task: int = 2
    n_tasks: int = 2
    color_palette: Tuple[Tuple[float, float, float], ...] = ((0.9, 0.15, 0.15),
                                                             (0.15, 0.8, 0.15))
    shape_set: Tuple[str, ...] = ("square", "triangle")
    position_jitter: float = 0.2      # fraction of image size
    scale_range: Tuple[float, float] = (0.3, 0.5)   # side of equal-area square / size
    color_noise: float = 0.05
    pixel_noise: float = 0.03
    background: float = 0.2
    samples_per_class: int = 100

    def validate(self):
        k = self.classes_per_task
        if len(self.color_palette) < k or len(self.shape_set) < k:
            raise ValueError(
                f"{k} classes per task need at least {k} colours and {k} shapes")
        if not 1 <= self.n_tasks <= k:
            raise ValueError(f"n_tasks must lie in [1, {k}]")
        unknown = set(self.shape_set) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown shapes {sorted(unknown)}")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")

    def class_table(self) -> List[List[Tuple[int, str]]]:
        k = self.classes_per_task
        return [[(i, self.shape_set[(i + j) % k]) for i in range(k)]
                for j in range(self.n_tasks)]


def _shape_mask(shape: str, size: int, cy: float, cx: float, side: float) -> np.ndarray:
    """Boolean mask of a shape whose area equals ``side**2``."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if shape == "square":
        half = side / 2
        return (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    if shape == "circle":
        r = side / np.sqrt(np.pi)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    # upright isosceles triangle, base = height = side * sqrt(2)
    s = side * np.sqrt(2)
    top, bottom = cy - s / 2, cy + s / 2
    frac = (yy - top) / s
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= frac * s / 2)


def generate_collision_dataset(spec: CollisionSpec, seed: int) -> List[TaskDataset]:
    spec.validate()
    rng = np.random.default_rng(seed)
    size = spec.image_size
    tasks = []
    label = 0
    for t, table in enumerate(spec.class_table()):
        images, labels, classes, names = [], [], [], []
        for color_idx, shape in table:
            color = np.asarray(spec.color_palette[color_idx], np.float64)
            for _ in range(spec.samples_per_class):
                side = rng.uniform(*spec.scale_range) * size
                cy, cx = size / 2 + rng.uniform(-1, 1, 2) * spec.position_jitter * size
                tint = np.clip(color + rng.normal(0, spec.color_noise, 3), 0, 1)
                img = np.full((size, size, 3), spec.background)
                img[_shape_mask(shape, size, cy, cx, side)] = tint
                img += rng.normal(0, spec.pixel_noise, img.shape)
                images.append(np.clip(img, 0, 1).astype(np.float32))
                labels.append(label)
            classes.append(label)
            names.append(f"color{color_idx}-{shape}")
            label += 1
        tasks.append(TaskDataset(t, np.stack(images), np.asarray(labels),
                                 tuple(classes), tuple(names)))
    return tasks


# --------------------------------------------------------------------------- dataset directories

def read_cifar_binary(path, *, label_bytes: int = 1,
                      image_shape: Tuple[int, int, int] = (32, 32, 3)):
    """Parse the packed CIFAR layout: label byte(s) then R, G and B planes.

    With several label bytes (CIFAR-100 stores coarse then fine) the last one
    is used.
    """
    h, w, c = image_shape
    record = label_bytes + h * w * c
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % record:
        raise ValueError(f"{path}: size {raw.size} is not a multiple of record size {record}")
    raw = raw.reshape(-1, record)
    labels = raw[:, label_bytes - 1].astype(np.int64)
    planes = raw[:, label_bytes:].reshape(-1, c, h, w)
    images = planes.transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return images, labels


def write_cifar_binary(path, images, labels, *, label_bytes: int = 1):
    images = check_images(images)
    labels = check_labels(labels, len(images))
    if labels.size and labels.max() > 255:
        raise ValueError("packed layout stores labels in one byte")
    planes = np.rint(images * 255).astype(np.uint8).transpose(0, 3, 1, 2).reshape(len(images), -1)
    head = np.zeros((len(images), label_bytes), np.uint8)
    head[:, -1] = labels
    np.concatenate([head, planes], axis=1).tofile(path)


def save_dataset_dir(root, splits: Dict[str, Tuple[np.ndarray, np.ndarray]],
                     class_names: Sequence[str], *, fmt: str = "npy"):
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    shape = None
    for name, (images, labels) in splits.items():
        images = check_images(images)
        labels = check_labels(labels, len(images))
        shape = list(images.shape[1:])
        if fmt == "npy":
            np.save(root / f"{name}_images.npy", images)
            np.save(root / f"{name}_labels.npy", labels)
        elif fmt == "cifar-binary":
            write_cifar_binary(root / f"{name}.bin", images, labels)
        else:
            raise ValueError(f"unknown dataset format {fmt!r}")
    meta = {
        "class_names": list(class_names),
        "counts": {name: int(len(lbl)) for name, (_, lbl) in splits.items()},
        "image_size": shape,
        "format": fmt,
        "label_bytes": 1,
    }
    tmp = root / "meta.json.tmp"
    tmp.write_text(json.dumps(meta, indent=2))
    os.replace(tmp, root / "meta.json")


def load_dataset_dir(root) -> Tuple[dict, Dict[str, Tuple[np.ndarray, np.ndarray]]]:
    """Read ``meta.json`` and every split it lists."""
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text())
    fmt = meta.get("format", "npy")
    shape = tuple(meta["image_size"])
    splits = {}
    for name in meta["counts"]:
        if fmt == "cifar-binary":
            images, labels = read_cifar_binary(root / f"{name}.bin",
                                               label_bytes=meta.get("label_bytes", 1),
                                               image_shape=shape)
        else:
            images = np.load(root / f"{name}_images.npy")
            labels = np.load(root / f"{name}_labels.npy")
        if len(labels) != meta["counts"][name]:
            raise ValueError(f"split {name!r}: meta.json says {meta['counts'][name]} "
                             f"samples, found {len(labels)}")
        splits[name] = (images, labels)
    return meta, splits
