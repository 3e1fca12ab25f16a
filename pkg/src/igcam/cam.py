"""Influence-attended features and instance-guided multi-scale CAMs.

Per proposal and scale, features are pooled inside the proposal mask (weighted
by the scale's influence map) and mapped to class scores by that scale's head.
Each score is painted uniformly over its proposal, the painted maps are summed
with weights softmax(alpha)_k * beta_k, and every scale is clipped at zero and
min-max normalised per class (negative evidence carries no location). The
full-resolution CAM is the normalised weighted sum of the upsampled scale maps.

Torch functions (suffix ``_t``) keep the graph for training; the unsuffixed
wrappers take and return numpy arrays.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .diffmodel import DTYPE
from .errors import ConfigurationError, PreconditionError
from .imaging import area_downsample_t, minmax_normalize_t, upsample_t

log = logging.getLogger(__name__)


def normalize_cam_t(cam: torch.Tensor) -> torch.Tensor:
    """Per-class min-max normalisation of the positive part."""
    return minmax_normalize_t(torch.relu(cam))


@dataclass
class AttentionState:
    alpha: float = 0.1
    projections: list = field(default_factory=list)  # per scale, (C,) 1x1 conv weights

    @classmethod
    def init(cls, num_scales: int, channels: int, seed: int = 0, alpha: float = 0.1) -> "AttentionState":
        rng = np.random.default_rng(seed)
        a = 1.0 / np.sqrt(channels)
        return cls(alpha, [rng.uniform(-a, a, channels) for _ in range(num_scales)])

    def flat(self) -> np.ndarray:
        return np.concatenate([[self.alpha]] + [np.asarray(p, dtype=np.float64) for p in self.projections])

    @classmethod
    def from_flat(cls, values, num_scales: int) -> "AttentionState":
        values = np.asarray(values, dtype=np.float64)
        parts = np.split(values[1:], num_scales) if num_scales else []
        return cls(float(values[0]), [p.copy() for p in parts])


@dataclass
class CamStack:
    per_scale: list  # normalised CAM_s, each (classes, H_s, W_s)
    raw: list  # CAM_s before normalisation
    aggregated: np.ndarray  # (classes, H, W) in [0, 1]
    scales: list  # indices into the model's scale list
    base_scale: int = 0


# ---------------------------------------------------------------- attention


def attention_maps_t(feats: Sequence[torch.Tensor], inf_maps: Sequence[torch.Tensor],
                     projections: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Single-channel gates sigmoid(project(F_s) * I_s), each (..., H_s, W_s)."""
    out = []
    for f, inf, proj in zip(feats, inf_maps, projections):
        if f.shape[-2:] != inf.shape[-2:]:
            raise ConfigurationError(f"influence map {tuple(inf.shape)} does not match features {tuple(f.shape)}")
        projected = torch.einsum("...chw,c->...hw", f, proj)
        out.append(torch.sigmoid(projected * inf))
    return out


def attend_features_t(feats, inf_maps, alpha, projections) -> tuple[list, list]:
    gates = attention_maps_t(feats, inf_maps, projections)
    enhanced = [f * (1 + alpha * g.unsqueeze(-3)) for f, g in zip(feats, gates)]
    return enhanced, gates


def attend_features(pyramid, influence, att: AttentionState):
    """numpy wrapper: returns the enhanced FeaturePyramid grids.

    ``influence`` is either a list of per-scale maps or a MultiScaleInfluence.
    """
    grids = pyramid.grids if hasattr(pyramid, "grids") else list(pyramid)
    if hasattr(influence, "at_scale"):
        scales = pyramid.scale_factors
        infs = [influence.at_scale(s, g.shape[-2:]) for s, g in zip(scales, grids)]
    else:
        infs = list(influence)
    if len(infs) != len(grids) or len(att.projections) != len(grids):
        raise ConfigurationError("need one influence map and one projection per scale")
    enhanced, _ = attend_features_t(
        [torch.as_tensor(g) for g in grids],
        [torch.as_tensor(np.asarray(i, dtype=np.float64)) for i in infs],
        torch.tensor(att.alpha, dtype=DTYPE),
        [torch.as_tensor(np.asarray(p, dtype=np.float64)) for p in att.projections],
    )
    return [e.numpy() for e in enhanced]


# ---------------------------------------------------------------- proposal CAMs


def masks_at_scales(masks_full, shapes) -> list[tuple[torch.Tensor, torch.Tensor]]:
    """Area-average proposal masks to each shape and threshold at 0.5; also return validity flags.

    Binary masks go through one pyramid of 2x2 pixel counts (exact, and much
    cheaper than pooling); other masks or ratios fall back to area pooling.
    """
    m = torch.as_tensor(np.asarray(masks_full, dtype=np.float64)) if not torch.is_tensor(masks_full) else masks_full
    H, W = m.shape[-2:]
    counts = {}
    if m.numel() and bool(((m == 0) | (m == 1)).all()):
        c = m.to(torch.int32)
        counts[(H, W)] = c
        while c.shape[-2] % 2 == 0 and c.shape[-1] % 2 == 0 and c.shape[-2] > 1 and c.shape[-1] > 1:
            c = c[..., 0::2, :] + c[..., 1::2, :]
            c = c[..., 0::2] + c[..., 1::2]
            counts[tuple(c.shape[-2:])] = c
    out = []
    for shape in shapes:
        h, w = tuple(shape)
        if (h, w) in counts:
            small = (counts[(h, w)] * 2 >= (H // h) * (W // w)).to(DTYPE)
        else:
            small = (area_downsample_t(m, (h, w)) >= 0.5).to(DTYPE)
        out.append((small, small.sum(dim=(-2, -1)) > 0))
    return out


def masks_at_scale(masks_full, shape) -> tuple[torch.Tensor, torch.Tensor]:
    """Single-shape form of :func:`masks_at_scales`."""
    return masks_at_scales(masks_full, [shape])[0]


def proposal_scores_t(feat: torch.Tensor, masks: torch.Tensor, inf: torch.Tensor, head: torch.Tensor) -> torch.Tensor:
    """(K, classes): pool feat * mask * inf inside each mask, then apply the bias-free head."""
    counts = masks.sum(dim=(-2, -1)).clamp(min=1.0)
    pooled = torch.einsum("chw,khw->kc", feat * inf, masks) / counts[:, None]
    return pooled @ head.T


def cam_for_proposal(feat, mask, inf, head):
    """Class scores of one proposal at one scale, or None when the mask vanishes there."""
    feat = torch.as_tensor(np.asarray(feat, dtype=np.float64))
    small, valid = masks_at_scale(np.asarray(mask, dtype=np.float64)[None], feat.shape[-2:])
    if not bool(valid[0]):
        return None
    inf = torch.as_tensor(np.asarray(inf, dtype=np.float64))
    return proposal_scores_t(feat, small, inf, torch.as_tensor(np.asarray(head, dtype=np.float64)))[0].numpy()


def paint_t(scores: torch.Tensor, masks: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """(classes, H, W) = sum_k weights_k * scores_k painted over mask_k."""
    return torch.einsum("k,kc,khw->chw", weights, scores, masks)


def pixel_cams_t(feat: torch.Tensor, inf: torch.Tensor, head: torch.Tensor) -> torch.Tensor:
    """Classic per-pixel CAM, head applied at every location (no proposals)."""
    return torch.einsum("chw,kc->khw", feat * inf, head)


def combine_scales_t(per_scale_norm: Sequence[torch.Tensor], out_size, scale_weights=None) -> torch.Tensor:
    if scale_weights is None:
        scale_weights = [1.0] * len(per_scale_norm)
    total = sum(w * upsample_t(c, tuple(out_size)) for w, c in zip(scale_weights, per_scale_norm))
    return minmax_normalize_t(total)


def proposal_cam_stack_t(feats, inf_maps, heads, masks_full, alpha_k, beta, out_size,
                         scales: Optional[Sequence[int]] = None, scale_weights=None) -> dict:
    """Instance-guided CAMs for one image.

    ``feats``/``inf_maps``/``heads`` are indexed by model scale; ``scales``
    selects which ones take part. Returns per-scale raw and normalised maps and
    the aggregated map; scales where every proposal vanishes are dropped.
    """
    scales = list(range(len(feats))) if scales is None else list(scales)
    masks_full = torch.as_tensor(np.asarray(masks_full, dtype=np.float64)) if not torch.is_tensor(masks_full) else masks_full
    beta = torch.as_tensor(np.asarray(beta, dtype=np.float64)) if not torch.is_tensor(beta) else beta
    weights = torch.softmax(alpha_k, dim=0) * beta
    raw, norm, used, sw = [], [], [], []
    small_masks = masks_at_scales(masks_full, [feats[s].shape[-2:] for s in scales])
    for j, s in enumerate(scales):
        small, valid = small_masks[j]
        if not bool(valid.any()):
            warnings.warn(f"all proposals vanish at scale {s}; scale omitted", RuntimeWarning, stacklevel=2)
            continue
        scores = proposal_scores_t(feats[s], small, inf_maps[s], heads[s])
        cam = paint_t(scores, small, weights * valid.to(DTYPE))
        raw.append(cam)
        norm.append(normalize_cam_t(cam))
        used.append(s)
        sw.append(1.0 if scale_weights is None else scale_weights[j])
    if not used:
        raise PreconditionError("no proposal survives at any scale")
    agg = combine_scales_t(norm, out_size, sw)
    return {"raw": raw, "norm": norm, "aggregated": agg, "scales": used}


def pixel_cam_stack_t(feats, inf_maps, heads, out_size, scales=None, scale_weights=None) -> dict:
    scales = list(range(len(feats))) if scales is None else list(scales)
    raw = [pixel_cams_t(feats[s], inf_maps[s], heads[s]) for s in scales]
    norm = [normalize_cam_t(c) for c in raw]
    agg = combine_scales_t(norm, out_size, scale_weights)
    return {"raw": raw, "norm": norm, "aggregated": agg, "scales": scales}


def to_stack(d: dict) -> CamStack:
    return CamStack(
        per_scale=[c.detach().numpy().copy() for c in d["norm"]],
        raw=[c.detach().numpy().copy() for c in d["raw"]],
        aggregated=d["aggregated"].detach().numpy().copy(),
        scales=list(d["scales"]),
        base_scale=d["scales"][0],
    )


def aggregate_cams(scores: Sequence, pset, scale_shapes: Sequence[tuple[int, int]], out_size,
                   valid: Optional[Sequence] = None) -> CamStack:
    """numpy wrapper of the paint-and-normalise step.

    ``scores[j]`` is a (K, classes) array for scale j (rows of skipped proposals
    ignored); ``pset`` supplies full-resolution masks, alpha and beta.
    """
    masks_full = torch.as_tensor(pset.masks())
    weights = torch.softmax(torch.as_tensor(pset.alpha), 0) * torch.as_tensor(pset.beta)
    raw, norm, used = [], [], []
    small_masks = masks_at_scales(masks_full, scale_shapes)
    for j, sc in enumerate(scores):
        small, ok = small_masks[j]
        if valid is not None:
            ok = ok & torch.as_tensor(np.asarray(valid[j], dtype=bool))
        if not bool(ok.any()):
            warnings.warn(f"all proposals skipped at scale {j}; scale omitted", RuntimeWarning, stacklevel=2)
            continue
        sc_t = torch.as_tensor(np.nan_to_num(np.asarray(sc, dtype=np.float64)))
        cam = paint_t(sc_t, small, weights * ok.to(DTYPE))
        raw.append(cam)
        norm.append(normalize_cam_t(cam))
        used.append(j)
    if not used:
        raise PreconditionError("no proposal survives at any scale")
    return to_stack({"raw": raw, "norm": norm, "aggregated": combine_scales_t(norm, out_size), "scales": used})


# ---------------------------------------------------------------- consistency


def consistency_residuals_t(norm_maps: Sequence[torch.Tensor]) -> list[torch.Tensor]:
    """Mean squared gap between each upsampled scale map and the base (first) one."""
    base = norm_maps[0]
    size = tuple(base.shape[-2:])
    return [((upsample_t(c, size) - base) ** 2).mean() for c in norm_maps]


def consistency_residuals(stack: CamStack) -> list[float]:
    if not stack.per_scale:
        raise PreconditionError("empty CAM stack")
    res = consistency_residuals_t([torch.as_tensor(c) for c in stack.per_scale])
    return [float(r) for r in res]
