"""Deterministic instance proposals: a multi-resolution box grid plus colour regions."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import PreconditionError

SOURCE_ORDER = {"grid": 0, "region": 1, "file": 2}


@dataclass
class Proposal:
    box: tuple[int, int, int, int]  # x0, y0, x1, y1 inclusive
    mask: np.ndarray
    source: str = "grid"

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class ProposalSet:
    proposals: list[Proposal]
    alpha: np.ndarray = None
    beta: np.ndarray = None

    def __post_init__(self):
        if not self.proposals:
            raise PreconditionError("a proposal set needs at least one proposal")
        k = len(self.proposals)
        self.alpha = np.zeros(k) if self.alpha is None else np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.ones(k) if self.beta is None else np.asarray(self.beta, dtype=np.float64)

    def __len__(self):
        return len(self.proposals)

    def masks(self) -> np.ndarray:
        return np.stack([p.mask for p in self.proposals]).astype(np.float64)

    def softmax_alpha(self) -> np.ndarray:
        a = self.alpha - self.alpha.max()
        e = np.exp(a)
        return e / e.sum()


def box_mask(box, shape) -> np.ndarray:
    x0, y0, x1, y1 = box
    m = np.zeros(shape, dtype=bool)
    m[y0 : y1 + 1, x0 : x1 + 1] = True
    return m


def box_iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0]) + 1
    iy = min(a[3], b[3]) - max(a[1], b[1]) + 1
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    area = lambda r: (r[2] - r[0] + 1) * (r[3] - r[1] + 1)
    return inter / (area(a) + area(b) - inter)


def _grid_boxes(h: int, w: int, sizes: Sequence[int]) -> list[tuple[int, int, int, int]]:
    boxes = []
    for size in sizes:
        sh, sw = min(size, h), min(size, w)
        step_y, step_x = max(sh // 2, 1), max(sw // 2, 1)
        ys = list(range(0, h - sh + 1, step_y))
        xs = list(range(0, w - sw + 1, step_x))
        # keep the last row/column flush with the border so the grid covers the image
        if ys[-1] != h - sh:
            ys.append(h - sh)
        if xs[-1] != w - sw:
            xs.append(w - sw)
        boxes += [(x, y, x + sw - 1, y + sh - 1) for y in ys for x in xs]
    return boxes


def _region_proposals(pixels: np.ndarray, quant_levels: int) -> list[Proposal]:
    q = np.minimum((pixels * quant_levels).astype(np.int64), quant_levels - 1)
    codes = np.zeros(q.shape[:2], dtype=np.int64)
    for c in range(q.shape[2]):
        codes = codes * quant_levels + q[..., c]
    out = []
    for code in np.unique(codes):
        labels, n = ndimage.label(codes == code)
        for lab in range(1, n + 1):
            mask = labels == lab
            ys, xs = np.nonzero(mask)
            box = (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))
            out.append(Proposal(box, mask, "region"))
    return out


def _sort_key(p: Proposal):
    return (SOURCE_ORDER[p.source], p.box[1], p.box[0], p.area, p.box[3], p.box[2])


def dedup(proposals: Sequence[Proposal], iou_thresh: float = 0.9) -> list[Proposal]:
    """Greedy in order: keep a proposal unless its box IoU with a kept one reaches ``iou_thresh``."""
    kept: list[Proposal] = []
    boxes = np.empty((len(proposals), 4), dtype=np.int64)
    for p in proposals:
        k = boxes[: len(kept)]
        ix = np.minimum(k[:, 2], p.box[2]) - np.maximum(k[:, 0], p.box[0]) + 1
        iy = np.minimum(k[:, 3], p.box[3]) - np.maximum(k[:, 1], p.box[1]) + 1
        inter = np.where((ix > 0) & (iy > 0), ix * iy, 0)
        areas = (k[:, 2] - k[:, 0] + 1) * (k[:, 3] - k[:, 1] + 1)
        own = (p.box[2] - p.box[0] + 1) * (p.box[3] - p.box[1] + 1)
        if np.all(inter / (areas + own - inter) < iou_thresh):
            boxes[len(kept)] = p.box
            kept.append(p)
    return kept


def generate_proposals(image, grid_sizes: Sequence[int] = (8, 16, 32), quant_levels: int = 4,
                       min_region_area: int = 1) -> ProposalSet:
    pixels = image.pixels if hasattr(image, "pixels") else np.asarray(image)
    h, w = pixels.shape[:2]
    grid = [Proposal(b, box_mask(b, (h, w)), "grid") for b in _grid_boxes(h, w, grid_sizes)]
    regions = [p for p in _region_proposals(pixels, quant_levels) if p.area >= min_region_area]
    ordered = sorted(grid, key=_sort_key) + sorted(regions, key=_sort_key)
    return ProposalSet(dedup(ordered))


def proposal_influence_weight(p: Proposal, influence) -> float:
    """Mean of the full-resolution aggregated influence over the proposal mask."""
    agg = influence.aggregated if hasattr(influence, "aggregated") else np.asarray(influence)
    if p.mask.shape != agg.shape:
        raise PreconditionError("proposal mask and influence map differ in shape")
    if not p.mask.any():
        raise PreconditionError("proposal mask is empty")
    return float(agg[p.mask].mean())


def load_proposals(path, shape: tuple[int, int]) -> ProposalSet:
    """Read ``x0 y0 x1 y1`` lines into box proposals, clipped to the image."""
    h, w = shape
    props = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        x0, y0, x1, y1 = (int(round(float(t))) for t in line.split()[:4])
        x0, x1 = sorted((max(0, min(w - 1, x0)), max(0, min(w - 1, x1))))
        y0, y1 = sorted((max(0, min(h - 1, y0)), max(0, min(h - 1, y1))))
        box = (x0, y0, x1, y1)
        props.append(Proposal(box, box_mask(box, shape), "file"))
    return ProposalSet(props)


def save_proposals(pset: ProposalSet, path):
    Path(path).write_text("".join(f"{p.box[0]} {p.box[1]} {p.box[2]} {p.box[3]}\n" for p in pset.proposals))
