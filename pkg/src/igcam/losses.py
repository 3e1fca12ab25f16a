"""The five influence-weighted training objectives and their stage-weighted total.

Influence quantities (sample weights, scale gates, proposal weights, maps) enter
every loss as constants; only the CAM or the logits carry gradients, except for
the influence regulariser whose only trainable input is the scale weighting.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from .diffmodel import DTYPE, bce_with_logits
from .errors import ConfigurationError, NumericError, PreconditionError
from .imaging import luminance, sobel_t

COMPONENTS = ("l_ig", "l_consistency", "l_boundary", "l_completeness", "l_reg")

STAGE_LAMBDAS = {
    1: (1.0, 0.0, 0.0, 0.0, 0.0),
    2: (1.0, 0.5, 0.3, 0.0, 0.0),
    3: (1.0, 0.5, 0.3, 0.2, 0.1),
}


def stage_lambdas(stage: int) -> tuple[float, ...]:
    try:
        return STAGE_LAMBDAS[stage]
    except KeyError:
        raise ConfigurationError(f"unknown training stage {stage!r}; expected 1, 2 or 3") from None


@dataclass
class LossBreakdown:
    l_ig: float
    l_consistency: float
    l_boundary: float
    l_completeness: float
    l_reg: float
    total: float
    stage_weights: tuple

    def log_record(self, iteration: int, stage: int) -> dict:
        return {
            "iter": iteration,
            "stage": stage,
            "l_ig": self.l_ig,
            "l_cons": self.l_consistency,
            "l_bnd": self.l_boundary,
            "l_comp": self.l_completeness,
            "l_reg": self.l_reg,
            "total": self.total,
            "lambdas": list(self.stage_weights),
        }


def _t(x):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def loss_ig_t(sample_losses: torch.Tensor, weights) -> torch.Tensor:
    if sample_losses.numel() == 0:
        raise PreconditionError("influence-guided loss needs at least one sample")
    w = _t(weights)
    if torch.any(w < 0):
        raise PreconditionError("sample weights must be nonnegative")
    return (w * sample_losses).mean()


def loss_ig(logits, labels, weights) -> float:
    logits, labels = _t(logits), _t(labels)
    if logits.ndim == 1:
        logits, labels = logits[None], labels[None]
    return float(loss_ig_t(bce_with_logits(logits, labels), weights))


def loss_consistency_inf_t(norm_maps: Sequence[torch.Tensor], scale_weights) -> torch.Tensor:
    """Sum over scales of gate-weight * mean squared gap to the base scale."""
    from .cam import consistency_residuals_t

    residuals = consistency_residuals_t(norm_maps)
    return sum(float(w) * r for w, r in zip(scale_weights, residuals))


def loss_consistency_inf(stack, scale_weights) -> float:
    return float(loss_consistency_inf_t([torch.as_tensor(c) for c in stack.per_scale], scale_weights))


def boundary_weight(image_hwc, inf_map) -> np.ndarray:
    lum = torch.as_tensor(luminance(image_hwc))
    gx, gy = sobel_t(lum)
    return torch.sigmoid(_t(inf_map) * torch.sqrt(gx**2 + gy**2)).numpy()


def loss_boundary_inf_t(cam: torch.Tensor, image_hwc, inf_map) -> torch.Tensor:
    lum = torch.as_tensor(luminance(image_hwc))
    ix, iy = sobel_t(lum)
    weight = torch.sigmoid(_t(inf_map) * torch.sqrt(ix**2 + iy**2))
    cx, cy = sobel_t(cam)
    return (weight * ((cx - ix).abs() + (cy - iy).abs())).mean()


def loss_boundary_inf(cam_map, image_hwc, inf_map) -> float:
    return float(loss_boundary_inf_t(_t(cam_map), image_hwc, inf_map))


def proposal_influence_weights(masks, inf_map) -> np.ndarray:
    m = np.asarray(masks, dtype=np.float64)
    inf = np.asarray(inf_map, dtype=np.float64)
    return (m * inf).sum(axis=(1, 2)) / m.sum(axis=(1, 2))


def loss_completeness_inf_t(cam: torch.Tensor, masks, proposal_weights) -> torch.Tensor:
    m = _t(masks)
    if m.shape[0] == 0:
        raise PreconditionError("completeness loss needs at least one proposal")
    coverage = (m * cam).sum(dim=(1, 2)) / m.sum(dim=(1, 2))
    return (_t(proposal_weights) * (1 - coverage) ** 2).mean()


def loss_completeness_inf(cam_map, pset, inf_map) -> float:
    masks = pset.masks() if hasattr(pset, "masks") else np.asarray(pset)
    if len(masks) == 0:
        raise PreconditionError("completeness loss needs at least one proposal")
    w = proposal_influence_weights(masks, inf_map)
    return float(loss_completeness_inf_t(_t(cam_map), masks, w))


def loss_influence_reg_t(agg: torch.Tensor) -> torch.Tensor:
    """Mean squared value plus mean absolute forward differences along x and y."""
    out = (agg**2).mean()
    if agg.shape[-1] > 1:
        out = out + (agg[..., :, 1:] - agg[..., :, :-1]).abs().mean()
    if agg.shape[-2] > 1:
        out = out + (agg[..., 1:, :] - agg[..., :-1, :]).abs().mean()
    return out


def loss_influence_reg(inf) -> float:
    agg = inf.aggregated if hasattr(inf, "aggregated") else inf
    return float(loss_influence_reg_t(_t(agg)))


def total_loss(components: Mapping[str, float], stage: int) -> LossBreakdown:
    lam = stage_lambdas(stage)
    vals = [float(components.get(name, 0.0)) for name in COMPONENTS]
    for name, v in zip(COMPONENTS, vals):
        if not math.isfinite(v):
            raise NumericError(f"loss component {name} is not finite", component=name)
    total = math.fsum(l * v for l, v in zip(lam, vals))
    return LossBreakdown(*vals, total=total, stage_weights=lam)
