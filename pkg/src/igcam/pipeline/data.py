"""Synthetic shapes benchmark with pixel-exact ground-truth masks.

Classes: 1 = square, 2 = disk, 3 = triangle, each drawn in a jittered class
colour over a noisy grey background. Shapes never overlap.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ..diffmodel import LabeledImage
from ..errors import ConfigurationError

SHAPES = ("square", "disk", "triangle")
CLASS_COLORS = np.array([[0.85, 0.25, 0.2], [0.25, 0.8, 0.3], [0.25, 0.35, 0.9]])
MIN_SIDE = 6


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_images: int = 64
    num_val: int = 16
    num_eval: int = 32
    image_size: int = 32
    min_shapes: int = 1
    max_shapes: int = 3
    min_side: int = 6
    max_side: int = 12
    noise_std: float = 0.05
    color_jitter: float = 0.1
    label_noise_rate: float = 0.2
    rng_seed: int = 0

    def __post_init__(self):
        if self.num_images < 1 or self.num_val < 1 or self.num_eval < 0:
            raise ConfigurationError("split sizes must be positive")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ConfigurationError("need 1 <= min_shapes <= max_shapes")
        if self.min_side < MIN_SIDE or self.max_side < self.min_side:
            raise ConfigurationError(f"shape sides must be >= {MIN_SIDE} and ordered")
        if self.max_side + 2 > self.image_size:
            raise ConfigurationError("shapes do not fit in the image")
        if not 0 <= self.label_noise_rate <= 1:
            raise ConfigurationError("label_noise_rate must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def with_seed(self, seed: int) -> "SyntheticDatasetSpec":
        return replace(self, rng_seed=seed)


@dataclass
class Dataset:
    train: list
    val: list
    eval: list
    spec: Optional[SyntheticDatasetSpec] = None


def square_mask(size: int, x0: int, y0: int, side: int) -> np.ndarray:
    m = np.zeros((size, size), dtype=bool)
    m[y0 : y0 + side, x0 : x0 + side] = True
    return m


def disk_mask(size: int, x0: int, y0: int, side: int) -> np.ndarray:
    """Disk inscribed in the side x side box at (x0, y0), tested at pixel centres."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    c = side / 2.0
    return (yy - y0 - c) ** 2 + (xx - x0 - c) ** 2 <= c * c


def triangle_mask(size: int, x0: int, y0: int, side: int) -> np.ndarray:
    """Upward isosceles triangle filling the side x side box, tested at pixel centres."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    t = (yy - y0) / side  # 0 at apex row, 1 at base
    half = 0.5 * side * t
    cx = x0 + side / 2.0
    return (t >= 0) & (t <= 1) & (np.abs(xx - cx) <= half + 1e-9)


RENDERERS = {"square": square_mask, "disk": disk_mask, "triangle": triangle_mask}


def _render(spec: SyntheticDatasetSpec, rng: np.random.Generator):
    n = spec.image_size
    base = rng.uniform(0.2, 0.45)
    pixels = np.full((n, n, 3), base) + rng.normal(0.0, spec.noise_std, (n, n, 3))
    gt = np.zeros((n, n), dtype=np.int64)
    count = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    boxes = []
    for _ in range(count):
        cls = int(rng.integers(len(SHAPES)))
        for _attempt in range(50):
            side = int(rng.integers(spec.min_side, spec.max_side + 1))
            x0 = int(rng.integers(0, n - side + 1))
            y0 = int(rng.integers(0, n - side + 1))
            box = (x0 - 1, y0 - 1, x0 + side, y0 + side)
            if all(box[2] < b[0] or b[2] < box[0] or box[3] < b[1] or b[3] < box[1] for b in boxes):
                break
        else:
            continue
        boxes.append(box)
        mask = RENDERERS[SHAPES[cls]](n, x0, y0, side)
        color = CLASS_COLORS[cls] + rng.uniform(-spec.color_jitter, spec.color_jitter, 3)
        pixels[mask] = color + rng.normal(0.0, spec.noise_std, (int(mask.sum()), 3))
        gt[mask] = cls + 1
    labels = np.zeros(len(SHAPES), dtype=np.int64)
    for c in np.unique(gt):
        if c > 0:
            labels[c - 1] = 1
    return np.clip(pixels, 0.0, 1.0), labels, gt


def _corrupt(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Flip one image-level label, never leaving the image without a positive."""
    out = labels.copy()
    order = rng.permutation(len(out))
    for k in order:
        trial = out.copy()
        trial[k] = 1 - trial[k]
        if trial.sum() >= 1:
            return trial
    return out


def gen_dataset(spec: SyntheticDatasetSpec = SyntheticDatasetSpec()) -> Dataset:
    rng = np.random.default_rng(spec.rng_seed)
    splits = {}
    for name, count in (("train", spec.num_images), ("val", spec.num_val), ("eval", spec.num_eval)):
        items = []
        while len(items) < count:
            pixels, labels, gt = _render(spec, rng)
            if labels.sum() == 0:
                continue
            items.append((pixels, labels, gt))
        splits[name] = items
    n_noisy = int(round(spec.label_noise_rate * spec.num_images))
    noisy = set(rng.choice(spec.num_images, size=n_noisy, replace=False).tolist()) if n_noisy else set()
    train = [
        LabeledImage(p, _corrupt(l, rng) if i in noisy else l, None, f"train-{i:04d}")
        for i, (p, l, _) in enumerate(splits["train"])
    ]
    val = [LabeledImage(p, l, None, f"val-{i:04d}") for i, (p, l, _) in enumerate(splits["val"])]
    ev = [LabeledImage(p, l, g, f"eval-{i:04d}") for i, (p, l, g) in enumerate(splits["eval"])]
    return Dataset(train, val, ev, spec)


def save_dataset(ds: Dataset, path):
    arrays = {}
    for split in ("train", "val", "eval"):
        items = getattr(ds, split)
        arrays[f"{split}_pixels"] = np.stack([s.pixels for s in items]) if items else np.zeros((0,))
        arrays[f"{split}_labels"] = np.stack([s.image_labels for s in items]) if items else np.zeros((0,))
        arrays[f"{split}_ids"] = np.array([s.id for s in items])
        if split == "eval" and items:
            arrays["eval_masks"] = np.stack([s.gt_mask for s in items])
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_dataset(path) -> Dataset:
    data = np.load(Path(path), allow_pickle=False)
    out = {}
    for split in ("train", "val", "eval"):
        ids = data[f"{split}_ids"]
        items = []
        for i, sid in enumerate(ids):
            gt = data["eval_masks"][i] if split == "eval" else None
            items.append(LabeledImage(data[f"{split}_pixels"][i], data[f"{split}_labels"][i], gt, str(sid)))
        out[split] = items
    return Dataset(out["train"], out["val"], out["eval"])
