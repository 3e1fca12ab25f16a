"""Influence estimation: inverse-HVP solvers, scores and spatial influence maps.

The score of a training sample on a test sample is the negative inner product
of the test gradient with the damped inverse Hessian applied to the training
gradient. Three inverse routes are available: a dense solve on the exact
Hessian, damped conjugate gradient, and the LiSSA stochastic recursion.

Spatial maps attribute influence to image regions. For a window around a
coarse grid node, the training gradient is that of the image's BCE loss
recomputed with the finest feature map zeroed outside the window before global
average pooling (the pool still divides by the full map area, so a window's
logits stay near zero and its gradient tracks the features it contains).
Because only inner products ``g_window · s_test`` are needed, the map is
evaluated with one forward-mode JVP per test vector over all windows at once.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch.func import jvp

from . import diffmodel
from .diffmodel import DTYPE, ParamVector, as_model, bce_with_logits
from .errors import ConfigurationError, DivergenceError, NumericError, PreconditionError, SizeError
from .imaging import area_downsample, upsample, upsample_t

log = logging.getLogger(__name__)

METHODS = ("exact", "cg", "lissa")


@dataclass(frozen=True)
class InfluenceConfig:
    damping: float = 0.01
    cg_max_iter: int = 100
    cg_tol: float = 1e-6
    lissa_depth: int = 100
    lissa_scale: float = 10.0
    lissa_repeats: int = 4
    lissa_batch_size: int = 16
    coarse_stride: int = 4
    window_radius: int = 2
    eps: float = 0.01
    hessian_cap: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.damping < 0:
            raise ConfigurationError("damping must be >= 0")
        if self.lissa_scale <= 0:
            raise ConfigurationError("lissa_scale must be > 0")
        if self.coarse_stride < 1:
            raise ConfigurationError("coarse_stride must be >= 1")
        if self.eps <= 0:
            raise ConfigurationError("eps must be > 0")
        if self.window_radius < 0:
            raise ConfigurationError("window_radius must be >= 0")


@dataclass
class SolveResult:
    """An inverse-HVP estimate plus solver diagnostics."""

    x: ParamVector
    residual: float = 0.0
    iterations: int = 0
    converged: bool = True
    std: float = 0.0


@dataclass
class InfluenceMap:
    values: np.ndarray
    scale: float
    source_id: str = ""
    epoch_stamp: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise PreconditionError("influence map must be two-dimensional")
        if not np.all(np.isfinite(self.values)):
            raise NumericError(f"non-finite influence map for {self.source_id!r}")
        if self.values.min() < 0:
            raise PreconditionError("influence maps are nonnegative")

    def normalized(self) -> "InfluenceMap":
        return InfluenceMap(normalize_map(self.values), self.scale, self.source_id, self.epoch_stamp)


@dataclass
class MultiScaleInfluence:
    maps: list[InfluenceMap]
    gamma: np.ndarray
    aggregated: np.ndarray

    def recompute(self) -> np.ndarray:
        size = self.aggregated.shape
        return sum(g * upsample(m.values, size) for g, m in zip(self.gamma, self.maps))

    def at_scale(self, scale: float, shape: tuple[int, int]) -> np.ndarray:
        """The map for one scale, area-downsampled from the aggregate if absent."""
        for m in self.maps:
            if abs(m.scale - scale) < 1e-12 and m.values.shape == tuple(shape):
                return m.values
        return normalize_map(area_downsample(self.aggregated, shape))


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Min-max to [0, 1]; a constant map becomes all zeros."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return values.copy()
    lo, span = values.min(), values.max() - values.min()
    return (values - lo) / span if span > 0 else np.zeros_like(values)


# ---------------------------------------------------------------- Hessians


def exact_hessian(model, params: ParamVector, dataset: Sequence, cap: int = 2000) -> np.ndarray:
    model = as_model(model)
    diffmodel._check_layout(model, params)
    if len(dataset) == 0:
        raise PreconditionError("Hessian needs a nonempty dataset")
    d = params.dim
    if d > cap:
        raise SizeError(f"d = {d} exceeds the dense Hessian cap {cap}; use cg or lissa")
    theta = params.tensor().requires_grad_(True)
    loss = model.batch_loss(theta, model.collate(list(dataset)))
    (g,) = torch.autograd.grad(loss, theta, create_graph=True)
    H = np.empty((d, d))
    eye = torch.eye(d, dtype=DTYPE)
    for j in range(d):
        (col,) = torch.autograd.grad(g @ eye[j], theta, retain_graph=True, allow_unused=True)
        H[:, j] = 0.0 if col is None else col.numpy()
    return H


class _Operator:
    """Damped empirical-risk Hessian operator over a fixed dataset."""

    def __init__(self, model, params: ParamVector, dataset: Sequence, damping: float):
        if len(dataset) == 0:
            raise PreconditionError("inverse HVP needs a nonempty dataset")
        self.model = model
        self.theta = params.tensor()
        self.batch = model.collate(list(dataset))
        self.damping = damping
        self.calls = 0

    def __call__(self, v: torch.Tensor) -> torch.Tensor:
        self.calls += 1
        return diffmodel.hvp_t(self.model, self.theta, self.batch, v) + self.damping * v


def _cg(op, b: torch.Tensor, x0: Optional[torch.Tensor], tol: float, max_iter: int):
    bnorm = float(torch.linalg.norm(b))
    if bnorm == 0.0:
        return torch.zeros_like(b), 0.0, 0, True
    x = torch.zeros_like(b) if x0 is None else x0.clone()
    r = b - op(x) if x0 is not None else b.clone()
    p = r.clone()
    rs = float(r @ r)
    best_x, best_res = x.clone(), np.sqrt(rs) / bnorm
    it = 0
    while best_res > tol and it < max_iter:
        ap = op(p)
        curv = float(p @ ap)
        if not np.isfinite(curv):
            raise NumericError(f"non-finite curvature in CG at iteration {it}", iteration=it)
        if curv <= 0:
            log.debug("CG met non-positive curvature at iteration %d; returning best iterate", it)
            break
        step = rs / curv
        x = x + step * p
        r = r - step * ap
        rs_new = float(r @ r)
        if not np.isfinite(rs_new):
            raise NumericError(f"non-finite residual in CG at iteration {it}", iteration=it)
        it += 1
        res = np.sqrt(rs_new) / bnorm
        if res < best_res:
            best_x, best_res = x.clone(), res
        p = r + (rs_new / rs) * p
        rs = rs_new
    return best_x, best_res, it, best_res <= tol


def inverse_hvp_cg(model, params: ParamVector, dataset: Sequence, v: ParamVector,
                   cfg: InfluenceConfig = InfluenceConfig(), x0: Optional[ParamVector] = None) -> SolveResult:
    """Solve (H + λI) s = v by conjugate gradient, optionally warm-started at x0."""
    model = as_model(model)
    diffmodel._check_layout(model, params)
    op = _Operator(model, params, dataset, cfg.damping)
    x, res, it, ok = _cg(op, v.tensor(), None if x0 is None else x0.tensor(), cfg.cg_tol, cfg.cg_max_iter)
    if not ok:
        log.debug("CG stopped after %d iterations with relative residual %.3g", it, res)
    return SolveResult(params.like(x.numpy()), float(res), it, bool(ok))


def inverse_hvp_exact(model, params: ParamVector, dataset: Sequence, v: ParamVector,
                      cfg: InfluenceConfig = InfluenceConfig()) -> SolveResult:
    H = exact_hessian(model, params, dataset, cap=cfg.hessian_cap)
    A = H + cfg.damping * np.eye(H.shape[0])
    s = np.linalg.solve(A, v.values)
    vn = np.linalg.norm(v.values)
    res = np.linalg.norm(A @ s - v.values) / vn if vn > 0 else 0.0
    return SolveResult(params.like(s), float(res), 0, True)


def inverse_hvp_lissa(model, params: ParamVector, dataset: Sequence, v: ParamVector,
                      cfg: InfluenceConfig = InfluenceConfig()) -> SolveResult:
    """Stochastic Neumann-series estimate of (H + λI)^{-1} v.

    Each repeat runs s_{t+1} = v + (I - (H_t + λI)/scale) s_t with H_t the
    Hessian of a random mini-batch, and the estimate is s_depth / scale.
    ``std`` is the norm of the per-coordinate standard deviation across repeats.
    """
    model = as_model(model)
    diffmodel._check_layout(model, params)
    dataset = list(dataset)
    if not dataset:
        raise PreconditionError("inverse HVP needs a nonempty dataset")
    vt = v.tensor()
    vnorm = float(torch.linalg.norm(vt))
    if vnorm == 0.0:
        return SolveResult(params.zeros_like(), 0.0, 0, True, 0.0)
    theta = params.tensor()
    rng = np.random.default_rng(cfg.seed)
    bs = min(cfg.lissa_batch_size, len(dataset))
    estimates = []
    for rep in range(cfg.lissa_repeats):
        s = vt.clone()
        for t in range(cfg.lissa_depth):
            idx = rng.choice(len(dataset), size=bs, replace=False)
            batch = model.collate([dataset[i] for i in sorted(idx)])
            hs = diffmodel.hvp_t(model, theta, batch, s) + cfg.damping * s
            s = vt + s - hs / cfg.lissa_scale
            norm = float(torch.linalg.norm(s))
            if not np.isfinite(norm) or norm > 1e6 * vnorm:
                raise DivergenceError(
                    f"LiSSA diverged at depth {t} of repeat {rep}; increase lissa_scale "
                    f"(currently {cfg.lissa_scale}) above the Hessian spectral norm",
                    iteration=t,
                )
        estimates.append((s / cfg.lissa_scale).numpy())
    est = np.stack(estimates)
    mean = est.mean(axis=0)
    std = float(np.linalg.norm(est.std(axis=0, ddof=1))) if len(est) > 1 else 0.0
    return SolveResult(params.like(mean), float("nan"), cfg.lissa_depth * cfg.lissa_repeats, True, std)


def inverse_hvp(model, params, dataset, v, cfg: InfluenceConfig = InfluenceConfig(), method: str = "cg",
                x0: Optional[ParamVector] = None) -> SolveResult:
    if method == "exact":
        return inverse_hvp_exact(model, params, dataset, v, cfg)
    if method == "cg":
        return inverse_hvp_cg(model, params, dataset, v, cfg, x0=x0)
    if method == "lissa":
        return inverse_hvp_lissa(model, params, dataset, v, cfg)
    raise ConfigurationError(f"unknown inverse method {method!r}; expected one of {METHODS}")


# ---------------------------------------------------------------- scores


def influence_score(model, params, dataset, z_train, z_test, cfg: InfluenceConfig = InfluenceConfig(),
                    method: str = "cg") -> float:
    """Upweighting influence of z_train on the loss at z_test (negative inner product form)."""
    g_test = diffmodel.grad(model, params, z_test)
    g_train = diffmodel.grad(model, params, z_train)
    s = inverse_hvp(model, params, dataset, g_test, cfg, method).x
    return float(-(s.values @ g_train.values))


def influence_scores(model, params, dataset, train_samples, z_test, cfg: InfluenceConfig = InfluenceConfig(),
                     method: str = "cg") -> np.ndarray:
    """Scores of many training samples against one test sample, sharing one inverse solve."""
    g_test = diffmodel.grad(model, params, z_test)
    s = inverse_hvp(model, params, dataset, g_test, cfg, method).x
    G = diffmodel.per_sample_grads(model, params, train_samples)
    return -(G @ s.values)


# ---------------------------------------------------------------- spatial maps


def grid_nodes(n: int, stride: int) -> np.ndarray:
    """Node positions spanning [0, n-1] edge to edge, at most ``stride`` apart, mirror-symmetric."""
    if n == 1:
        return np.zeros(1)
    m = int(np.ceil((n - 1) / stride)) + 1
    return np.linspace(0.0, n - 1, m)


def window_masks(shape: tuple[int, int], cfg: InfluenceConfig, centers=None) -> tuple[np.ndarray, list]:
    """Binary (num_windows, H, W) masks around each grid node, row-major node order."""
    h, w = shape
    if centers is None:
        ys, xs = grid_nodes(h, cfg.coarse_stride), grid_nodes(w, cfg.coarse_stride)
        centers = [(cy, cx) for cy in ys for cx in xs]
    rows, cols = np.arange(h)[:, None], np.arange(w)[None, :]
    r = cfg.window_radius + 1e-9
    masks = []
    for cy, cx in centers:
        m = (np.abs(rows - cy) <= r) & (np.abs(cols - cx) <= r)
        if not m.any():
            raise PreconditionError(f"window centred at {(cy, cx)} lies outside the {h}x{w} feature map")
        masks.append(m)
    return np.stack(masks).astype(np.float64), list(centers)


def test_inverse_vectors(model, params, dataset, test_set, cfg: InfluenceConfig = InfluenceConfig(),
                         method: str = "cg", warm: Optional[dict] = None) -> tuple[np.ndarray, list[SolveResult]]:
    """Rows are (H + λI)^{-1} ∇L(z_test) for each test sample.

    ``warm`` maps test ids to previous CG solutions and is updated in place.
    """
    if len(test_set) == 0:
        raise PreconditionError("influence maps need a nonempty test set")
    rows, results = [], []
    for z in test_set:
        g = diffmodel.grad(model, params, z)
        x0 = None
        if warm is not None and method == "cg" and z.id in warm and warm[z.id].dim == g.dim:
            x0 = warm[z.id]
        res = inverse_hvp(model, params, dataset, g, cfg, method, x0=x0)
        if warm is not None:
            warm[z.id] = res.x
        rows.append(res.x.values)
        results.append(res)
    return np.stack(rows), results


def window_influences(model, params: ParamVector, images: Sequence, inverse_rows: np.ndarray,
                      masks: np.ndarray) -> np.ndarray:
    """(num_images, num_windows) mean over test rows of |restricted-gradient influence|."""
    model = as_model(model)
    x, y = model.collate(list(images))
    mt = torch.as_tensor(masks)
    area = float(masks.shape[1] * masks.shape[2])

    def window_losses(theta):
        finest = model.pyramid(theta, x)[0]  # B, C, H, W
        pooled = torch.einsum("bchw,khw->bkc", finest, mt) / area
        logits = model.logits_from_pooled(theta, pooled)  # B, K, classes
        return bce_with_logits(logits, y[:, None, :])

    theta = params.tensor()
    total = torch.zeros(len(images), masks.shape[0], dtype=DTYPE)
    for row in inverse_rows:
        _, tangent = jvp(window_losses, (theta,), (torch.as_tensor(row),))
        # influence = -g_window · s_test; only its magnitude is kept
        total += tangent.abs()
    return (total / len(inverse_rows)).numpy()


def _fill_from_nodes(node_values: np.ndarray, shape: tuple[int, int], centers: list) -> np.ndarray:
    h, w = shape
    ys = np.unique([c[0] for c in centers])
    xs = np.unique([c[1] for c in centers])
    if len(ys) * len(xs) != len(centers):
        raise PreconditionError("bilinear fill needs a rectangular node grid")
    grid = node_values.reshape(len(ys), len(xs))
    # separable linear interpolation == bilinear on the node lattice
    cols = np.stack([np.interp(np.arange(w), xs, row) for row in grid]) if len(xs) > 1 else np.repeat(grid, w, axis=1)
    if len(ys) > 1:
        return np.stack([np.interp(np.arange(h), ys, cols[:, j]) for j in range(w)], axis=1)
    return np.repeat(cols, h, axis=0)


def maps_from_inverse(model, params, images, inverse_rows, cfg: InfluenceConfig = InfluenceConfig(),
                      epoch_stamp: int = 0) -> list[InfluenceMap]:
    model = as_model(model)
    shape = model.spec.scale_shapes[0]
    masks, centers = window_masks(shape, cfg)
    vals = window_influences(model, params, images, inverse_rows, masks)
    out = []
    for img, v in zip(images, vals):
        dense = _fill_from_nodes(v, shape, centers)
        out.append(InfluenceMap(normalize_map(np.maximum(dense, 0.0)), model.spec.scale_factors[0], img.id, epoch_stamp))
    return out


def spatial_influence_map(model, params, dataset, image, test_set, cfg: InfluenceConfig = InfluenceConfig(),
                          method: str = "cg", epoch_stamp: int = 0) -> InfluenceMap:
    """Normalised influence map of ``image`` at the finest feature scale."""
    if all(z.id != image.id for z in dataset):
        raise PreconditionError(f"image {image.id!r} is not part of the training dataset")
    rows, _ = test_inverse_vectors(model, params, dataset, test_set, cfg, method)
    return maps_from_inverse(model, params, [image], rows, cfg, epoch_stamp)[0]


# ---------------------------------------------------------------- multi-scale


def check_gamma(gamma) -> np.ndarray:
    g = np.asarray(gamma, dtype=np.float64)
    if np.any(g < 0):
        raise PreconditionError("scale weights must be nonnegative")
    total = g.sum()
    if abs(total - 1.0) > 1e-6:
        raise PreconditionError(f"scale weights sum to {total}, expected 1")
    return g / total


def aggregate_multiscale(maps: Sequence[InfluenceMap], gamma, spec=None,
                         out_size: Optional[tuple[int, int]] = None) -> MultiScaleInfluence:
    maps = list(maps)
    g = check_gamma(gamma)
    if len(g) != len(maps):
        raise ConfigurationError("one scale weight per map is required")
    if spec is not None:
        for m in maps:
            idx = [i for i, s in enumerate(spec.scale_factors) if abs(s - m.scale) < 1e-12]
            if not idx or spec.scale_shapes[idx[0]] != m.values.shape:
                raise ConfigurationError(f"map at scale {m.scale} does not belong to the model spec")
        out_size = out_size or tuple(spec.input_size[:2])
    if out_size is None:
        m0 = maps[0]
        out_size = (round(m0.values.shape[0] / m0.scale), round(m0.values.shape[1] / m0.scale))
    agg = aggregate_t([torch.as_tensor(m.values) for m in maps], torch.as_tensor(g), out_size).numpy()
    return MultiScaleInfluence(maps, g, agg)


def aggregate_t(maps: Sequence[torch.Tensor], gamma: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    out = torch.zeros(size, dtype=DTYPE)
    for g, m in zip(gamma, maps):
        out = out + g * upsample_t(m, size)
    return out


def pyramid_maps(finest: InfluenceMap, spec, scales: Optional[Sequence[int]] = None) -> list[InfluenceMap]:
    """Per-scale maps by area-averaging the finest map, each renormalised to max 1."""
    scales = range(len(spec.scale_factors)) if scales is None else scales
    out = []
    for i in scales:
        shape = spec.scale_shapes[i]
        vals = finest.values if i == 0 else normalize_map(area_downsample(finest.values, shape))
        out.append(InfluenceMap(vals, spec.scale_factors[i], finest.source_id, finest.epoch_stamp))
    return out


def sample_weight(map_: InfluenceMap, eps: float = 0.01) -> float:
    return float(np.mean(map_.values) + eps)


# ---------------------------------------------------------------- refresh state


@dataclass
class InfluenceCache:
    """Per-image maps plus warm-start vectors for the incremental inverse solves."""

    maps: dict = field(default_factory=dict)
    warm: dict = field(default_factory=dict)
    refresh_iterations: list = field(default_factory=list)
    last_results: list = field(default_factory=list)

    def refresh(self, model, params, train_set, test_set, cfg: InfluenceConfig, method: str = "cg",
                iteration: int = 0, chunk: int = 32) -> dict:
        rows, results = test_inverse_vectors(model, params, train_set, test_set, cfg, method, warm=self.warm)
        self.last_results = results
        maps = {}
        for start in range(0, len(train_set), chunk):
            part = train_set[start : start + chunk]
            for m in maps_from_inverse(model, params, part, rows, cfg, epoch_stamp=iteration):
                maps[m.source_id] = m
        self.maps = maps
        self.refresh_iterations.append(iteration)
        return maps


def refresh_influence_state(state, cadence: int, force: bool = False) -> bool:
    """Recompute every training map when the stage-local iteration hits the cadence.

    ``state`` must expose ``model``, ``params``, ``train_set``, ``test_set``,
    ``influence_cfg``, ``influence_method``, ``influence`` (an InfluenceCache),
    ``stage_iteration`` and ``iteration``. Returns True if a refresh ran.
    """
    if cadence < 1:
        raise ConfigurationError("cadence must be >= 1")
    if not force and state.stage_iteration % cadence != 0:
        return False
    state.influence.refresh(state.model, state.params, state.train_set, state.test_set,
                            state.influence_cfg, state.influence_method, iteration=state.iteration)
    return True
