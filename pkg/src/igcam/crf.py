"""Dense pairwise CRF with Potts compatibility, solved by brute-force mean field.

Label 0 is background; label c >= 1 is foreground class c (CAM channel c - 1).
Pairwise kernels are evaluated explicitly over all pixel pairs, so images are
limited to 64x64.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, PreconditionError

MAX_PIXELS = 64 * 64
CLAMP = 1e-6

# class index -> RGB, background black
PALETTE = np.array(
    [
        [0, 0, 0],
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [255, 225, 25],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
    ],
    dtype=np.uint8,
)


@dataclass(frozen=True)
class CrfConfig:
    w_gauss: float = 3.0
    w_bilateral: float = 5.0
    theta_gamma: float = 3.0
    theta_alpha: float = 30.0
    theta_beta: float = 0.13
    iterations: int = 5
    influence_blend: float = 0.3
    min_component: int = 4
    max_hole: int = 4

    def __post_init__(self):
        if min(self.theta_gamma, self.theta_alpha, self.theta_beta) <= 0:
            raise ConfigurationError("kernel standard deviations must be > 0")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if not 0 <= self.influence_blend <= 1:
            raise ConfigurationError("influence_blend must lie in [0, 1]")


def _aggregated(stack_or_cam) -> np.ndarray:
    cam = stack_or_cam.aggregated if hasattr(stack_or_cam, "aggregated") else stack_or_cam
    return np.asarray(cam, dtype=np.float64)


def unaries_from_cam(stack_or_cam, inf_map, eta: float) -> np.ndarray:
    """(classes + 1, H, W) negative log scores; background scores 1 - max_c CAM_c."""
    cam = _aggregated(stack_or_cam)
    inf = np.broadcast_to(np.asarray(inf_map, dtype=np.float64), cam.shape[1:])
    blend = (1 - eta) * cam + eta * (cam * inf)
    bg = 1.0 - cam.max(axis=0)
    scores = np.concatenate([bg[None], blend])
    return -np.log(np.clip(scores, CLAMP, 1 - CLAMP))


def softmax_neg(energy: np.ndarray) -> np.ndarray:
    e = -energy - (-energy).max(axis=0, keepdims=True)
    p = np.exp(e)
    return p / p.sum(axis=0, keepdims=True)


def pairwise_kernel(image_hwc, cfg: CrfConfig) -> np.ndarray:
    """(N, N) combined Gaussian + bilateral affinities with a zero diagonal."""
    img = np.asarray(image_hwc, dtype=np.float64)
    h, w = img.shape[:2]
    if h * w > MAX_PIXELS:
        raise PreconditionError(f"brute-force CRF supports at most {MAX_PIXELS} pixels, got {h}x{w}")
    yy, xx = np.mgrid[0:h, 0:w]
    pos = np.stack([yy.ravel(), xx.ravel()], axis=1).astype(np.float64)
    col = img.reshape(h * w, -1)
    d_pos = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    d_col = ((col[:, None, :] - col[None, :, :]) ** 2).sum(-1)
    k = cfg.w_gauss * np.exp(-d_pos / (2 * cfg.theta_gamma**2))
    k += cfg.w_bilateral * np.exp(-d_pos / (2 * cfg.theta_alpha**2) - d_col / (2 * cfg.theta_beta**2))
    np.fill_diagonal(k, 0.0)
    return k


def _check_simplex(Q: np.ndarray):
    if np.any(Q < -1e-12) or np.any(np.abs(Q.sum(axis=0) - 1) > 1e-6):
        raise PreconditionError("Q is not a per-pixel probability simplex")


def meanfield_step(Q, unaries, image_hwc, cfg: CrfConfig, sequential: bool = False, kernel=None) -> np.ndarray:
    """One mean-field sweep.

    Parallel mode updates every pixel from the previous Q; sequential mode
    updates pixels in raster order, each seeing its predecessors' new values.
    """
    Q = np.asarray(Q, dtype=np.float64)
    _check_simplex(Q)
    L = Q.shape[0]
    shape = Q.shape[1:]
    K = pairwise_kernel(image_hwc, cfg) if kernel is None else kernel
    U = np.asarray(unaries, dtype=np.float64).reshape(L, -1)
    q = Q.reshape(L, -1).copy()
    if not sequential:
        # Potts: pixel i pays k_ij for every neighbour mass on labels other than l
        msg = (1.0 - q) @ K.T
        return softmax_neg(U + msg).reshape(Q.shape)
    for i in range(q.shape[1]):
        msg = K[i] @ (1.0 - q).T
        q[:, i] = softmax_neg((U[:, i] + msg)[:, None])[:, 0]
    return q.reshape(L, *shape)


def free_energy(Q, unaries, kernel) -> float:
    """Mean-field free energy: expected unary + expected Potts pairwise - entropy."""
    L = Q.shape[0]
    q = Q.reshape(L, -1)
    U = np.asarray(unaries).reshape(L, -1)
    unary = float((q * U).sum())
    same = q.T @ q  # (N, N) probability that i and j agree
    pair = float((np.triu(kernel, 1) * (1.0 - same)).sum())
    ent = float((q * np.log(np.clip(q, 1e-300, None))).sum())
    return unary + pair + ent


def argmax_labels(Q) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lower class index on ties
    return np.argmax(Q, axis=0).astype(np.int64)


def clean_mask(mask: np.ndarray, min_component: int = 4, max_hole: int = 4) -> np.ndarray:
    """Drop foreground components below ``min_component`` px and fill enclosed holes below ``max_hole``."""
    out = np.asarray(mask, dtype=np.int64).copy()
    for lab in np.unique(out):
        if lab == 0:
            continue
        comps, n = ndimage.label(out == lab)
        if n:
            sizes = ndimage.sum(np.ones_like(comps), comps, index=np.arange(1, n + 1))
            for idx, size in enumerate(sizes, start=1):
                if size < min_component:
                    out[comps == idx] = 0
    holes, n = ndimage.label(out == 0)
    border = set(np.unique(np.concatenate([holes[0], holes[-1], holes[:, 0], holes[:, -1]]))) - {0}
    for idx in range(1, n + 1):
        region = holes == idx
        if idx in border or region.sum() >= max_hole:
            continue
        ring = ndimage.binary_dilation(region) & ~region
        labels, counts = np.unique(out[ring], return_counts=True)
        keep = labels != 0
        if keep.any():
            labels, counts = labels[keep], counts[keep]
            out[region] = labels[np.argmax(counts)]
    return out


def run_crf(stack_or_cam, image_hwc, inf_map, cfg: CrfConfig = CrfConfig(), return_q: bool = False):
    cam = _aggregated(stack_or_cam)
    U = unaries_from_cam(cam, inf_map, cfg.influence_blend)
    K = pairwise_kernel(image_hwc, cfg)
    Q = softmax_neg(U)
    for _ in range(cfg.iterations):
        Q = meanfield_step(Q, U, image_hwc, cfg, kernel=K)
    mask = clean_mask(argmax_labels(Q), cfg.min_component, cfg.max_hole)
    return (mask, Q) if return_q else mask


# ---------------------------------------------------------------- thresholding


def influence_threshold(inf_map, base: float = 0.4, slope: float = 0.2) -> np.ndarray:
    """Foreground threshold per pixel, lowered where influence is high."""
    return np.clip(base - slope * np.asarray(inf_map, dtype=np.float64), base - slope, base)


def rescale_to_threshold(cam, tau) -> np.ndarray:
    """Monotone piecewise-linear map of [0, 1] onto itself sending ``tau`` to 0.5."""
    cam = np.asarray(cam, dtype=np.float64)
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float64), cam.shape[-2:])
    low = 0.5 * cam / tau
    high = 0.5 + 0.5 * (cam - tau) / (1 - tau)
    return np.where(cam <= tau, low, high)


def threshold_labels(cam) -> np.ndarray:
    """Label map with background score 1 - max CAM; foreground wins only when max CAM > 0.5."""
    cam = np.asarray(cam, dtype=np.float64)
    scores = np.concatenate([(1.0 - cam.max(axis=0))[None], cam])
    return argmax_labels(scores)


# ---------------------------------------------------------------- export


def colorize(mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.int64)
    return PALETTE[mask % len(PALETTE)]


def save_mask(mask, path):
    """Write a palette-coloured mask as binary PPM or PNG, chosen by suffix."""
    path = Path(path)
    rgb = colorize(mask)
    if path.suffix.lower() == ".png":
        from PIL import Image

        Image.fromarray(rgb, mode="RGB").save(path)
        return
    h, w = rgb.shape[:2]
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())
