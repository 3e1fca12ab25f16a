"""Three-stage progressive training with periodic influence refreshes."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .. import cam as camlib
from .. import losses
from ..diffmodel import DTYPE, ConvClassifier, ParamVector, bce_with_logits
from ..errors import NumericError, PreconditionError
from ..imaging import area_downsample_t, minmax_normalize_t
from ..influence import (
    InfluenceCache,
    InfluenceConfig,
    aggregate_t,
    pyramid_maps,
    refresh_influence_state,
    sample_weight,
)
from ..proposals import generate_proposals
from ..storage import save_checkpoint
from .config import TrainConfig, stage_schedules
from .data import Dataset

log = logging.getLogger(__name__)


@dataclass
class ImageRecord:
    """Per-training-image state that persists across iterations."""

    sample: object
    masks: np.ndarray  # (K, H, W) full-resolution proposal masks
    alpha: torch.Tensor  # learnable proposal logits
    scale_maps: Optional[list] = None  # per-scale influence maps (numpy), None before the first refresh
    weight: float = 1.0


@dataclass
class TrainerState:
    model: ConvClassifier
    theta: torch.Tensor
    gamma: torch.Tensor  # scale-weight logits
    attention: torch.Tensor  # [alpha, proj_0 (C), proj_1 (C), ...]
    records: dict
    train_set: list
    test_set: list
    influence_cfg: InfluenceConfig
    influence_method: str
    optimizer: torch.optim.Optimizer
    influence: InfluenceCache = field(default_factory=InfluenceCache)
    iteration: int = 0
    stage: int = 1
    stage_iteration: int = 0
    refresh_log: list = field(default_factory=list)
    loss_log: list = field(default_factory=list)
    epoch_log: list = field(default_factory=list)

    @property
    def params(self) -> ParamVector:
        return ParamVector(self.theta.detach().numpy().copy(), self.model.layout)

    def gamma_weights(self) -> np.ndarray:
        return torch.softmax(self.gamma.detach(), 0).numpy()


@dataclass
class TrainResult:
    state: TrainerState
    checkpoint: bytes
    config: TrainConfig


def active_scales(cfg: TrainConfig, model: ConvClassifier) -> list[int]:
    return list(range(len(model.spec.scale_factors))) if cfg.multiscale else [0]


def _shift(arr: np.ndarray, dy: int, dx: int, mode: str) -> np.ndarray:
    """Translate the last two axes by (dy, dx), filling by edge replication or zeros."""
    if dy == 0 and dx == 0:
        return arr
    h, w = arr.shape[-2:]
    if mode == "edge":
        pad = [(0, 0)] * (arr.ndim - 2) + [(2, 2), (2, 2)]
        return np.pad(arr, pad, mode="edge")[..., 2 - dy : 2 - dy + h, 2 - dx : 2 - dx + w]
    out = np.zeros_like(arr)
    out[..., max(dy, 0) : h + min(dy, 0), max(dx, 0) : w + min(dx, 0)] = \
        arr[..., max(-dy, 0) : h - max(dy, 0), max(-dx, 0) : w - max(dx, 0)]
    return out


def _augment_params(rng: np.random.Generator, enabled: bool):
    if not enabled:
        return False, 0, 0
    flip = bool(rng.integers(2))
    dy, dx = (int(v) for v in rng.integers(-2, 3, size=2))
    return flip, dy, dx


def _apply(arr: np.ndarray, flip: bool, dy: int, dx: int, mode: str) -> np.ndarray:
    if flip:
        arr = arr[..., ::-1]
    return np.ascontiguousarray(_shift(arr, dy, dx, mode))


def init_state(cfg: TrainConfig, data: Dataset, model: Optional[ConvClassifier] = None) -> TrainerState:
    h = data.train[0].pixels.shape[0]
    k = data.train[0].image_labels.size
    model = model or ConvClassifier(cfg.model_spec(h, k))
    theta = torch.nn.Parameter(model.init_params().tensor())
    n_scales = len(model.spec.scale_factors)
    gamma = torch.nn.Parameter(torch.zeros(n_scales, dtype=DTYPE))
    att0 = camlib.AttentionState.init(n_scales, model.spec.channels_per_scale, seed=cfg.seed + 1, alpha=cfg.attention_alpha)
    attention = torch.nn.Parameter(torch.as_tensor(att0.flat()))
    records = {}
    for s in data.train:
        pset = generate_proposals(s, cfg.grid_sizes, cfg.quant_levels)
        records[s.id] = ImageRecord(s, pset.masks(), torch.nn.Parameter(torch.zeros(len(pset), dtype=DTYPE)))
    groups = [{"params": [theta], "weight_decay": cfg.weight_decay},
              {"params": [gamma, attention] + [r.alpha for r in records.values()], "weight_decay": 0.0}]
    opt = torch.optim.AdamW(groups, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2))
    return TrainerState(
        model=model, theta=theta, gamma=gamma, attention=attention, records=records,
        train_set=list(data.train), test_set=list(data.val[: cfg.num_test]),
        influence_cfg=cfg.influence_config(), influence_method=cfg.influence_method, optimizer=opt,
    )


def _install_maps(state: TrainerState, cfg: TrainConfig):
    for sid, m in state.influence.maps.items():
        rec = state.records[sid]
        rec.scale_maps = [p.values for p in pyramid_maps(m, state.model.spec)]
        rec.weight = 1.0 if cfg.unit_sample_weights else sample_weight(m, cfg.eps)


def _aggregated_t(rec: ImageRecord, gamma_w: torch.Tensor, scales: list[int], size) -> torch.Tensor:
    maps = [torch.as_tensor(rec.scale_maps[s]) for s in scales]
    w = gamma_w[scales] / gamma_w[scales].sum()
    return aggregate_t(maps, w, size)


def _influence_per_scale(agg: torch.Tensor, shapes) -> list[torch.Tensor]:
    return [minmax_normalize_t(area_downsample_t(agg, tuple(shape))) for shape in shapes]


def compute_losses(state: TrainerState, cfg: TrainConfig, batch_ids: list, lambdas, aug_rng) -> dict:
    """Loss components (torch scalars) for one mini-batch."""
    model = state.model
    spec = model.spec
    size = tuple(spec.input_size[:2])
    shapes = spec.scale_shapes
    scales = active_scales(cfg, model)
    use_inf = cfg.influence
    need_cams = any(l > 0 for l in lambdas[1:])
    recs = [state.records[i] for i in batch_ids]
    gamma_w = torch.softmax(state.gamma, 0)

    imgs, aggs, maskss = [], [], []
    for rec in recs:
        flip, dy, dx = _augment_params(aug_rng, cfg.augment)
        img = _apply(rec.sample.pixels.transpose(2, 0, 1), flip, dy, dx, "edge")
        imgs.append(img)
        if need_cams or (use_inf and lambdas[4] > 0):
            if use_inf and rec.scale_maps is not None:
                agg = _aggregated_t(rec, gamma_w.detach(), scales, size).numpy()
            else:
                agg = np.ones(size)
            aggs.append(_apply(agg, flip, dy, dx, "edge"))
            maskss.append(_apply(rec.masks, flip, dy, dx, "zero"))
    x = torch.as_tensor(np.stack(imgs))
    y = torch.as_tensor(np.stack([r.sample.image_labels for r in recs]), dtype=DTYPE)
    w = torch.as_tensor([r.weight if use_inf else 1.0 for r in recs], dtype=DTYPE)

    feats = model.pyramid(state.theta, x)
    logits = model.logits_from_pooled(state.theta, feats[0].mean(dim=(2, 3)))
    per_sample = bce_with_logits(logits, y)
    comps = {"l_ig": losses.loss_ig_t(per_sample, w)}
    zero = torch.zeros((), dtype=DTYPE)
    comps.update(l_consistency=zero, l_boundary=zero, l_completeness=zero, l_reg=zero)
    if not need_cams:
        return comps

    n_s = len(spec.scale_factors)
    att_alpha = state.attention[0]
    projs = list(state.attention[1:].reshape(n_s, -1))
    heads = [model.head(state.theta, s) for s in range(n_s)]
    combine_w = (gamma_w.detach()[scales] / gamma_w.detach()[scales].sum()).tolist() if use_inf else None
    cons, bnd, comp, reg = [], [], [], []
    for b, rec in enumerate(recs):
        agg = torch.as_tensor(aggs[b])
        infs = _influence_per_scale(agg, shapes) if use_inf and rec.scale_maps is not None else [torch.ones(s, dtype=DTYPE) for s in shapes]
        fb = [f[b] for f in feats]
        if use_inf:
            fb, gates = camlib.attend_features_t(fb, infs, att_alpha, projs)
            gate_w = [float(g.detach().mean()) for g in gates]
        else:
            gate_w = [1.0] * n_s
        if cfg.instance_guidance:
            masks = torch.as_tensor(maskss[b])
            beta = (masks * agg).sum(dim=(1, 2)) / masks.sum(dim=(1, 2)).clamp(min=1.0) if use_inf else torch.ones(len(masks), dtype=DTYPE)
            d = camlib.proposal_cam_stack_t(fb, infs, heads, masks, rec.alpha, beta, size, scales, combine_w)
        else:
            d = camlib.pixel_cam_stack_t(fb, infs, heads, size, scales, combine_w)
        present = [c for c in range(spec.num_classes) if rec.sample.image_labels[c] == 1]
        img_hwc = imgs[b].transpose(1, 2, 0)
        if len(d["scales"]) > 1 and lambdas[1] > 0:
            norm = [c[present] for c in d["norm"]]
            cons.append(losses.loss_consistency_inf_t(norm, [gate_w[s] for s in d["scales"]]))
        if lambdas[2] > 0:
            bnd.append(sum(losses.loss_boundary_inf_t(d["aggregated"][c], img_hwc, agg) for c in present) / len(present))
        if lambdas[3] > 0 and cfg.instance_guidance:
            masks_np = maskss[b]
            keep = masks_np.sum(axis=(1, 2)) > 0
            wp = losses.proposal_influence_weights(masks_np[keep], aggs[b])
            comp.append(sum(losses.loss_completeness_inf_t(d["aggregated"][c], masks_np[keep], wp) for c in present) / len(present))
        if lambdas[4] > 0 and use_inf and rec.scale_maps is not None:
            reg.append(losses.loss_influence_reg_t(_aggregated_t(rec, gamma_w, scales, size)))
    mean = lambda xs: sum(xs) / len(xs) if xs else zero
    comps.update(l_consistency=mean(cons), l_boundary=mean(bnd), l_completeness=mean(comp), l_reg=mean(reg))
    return comps


def _val_loss(state: TrainerState, val: list) -> float:
    with torch.no_grad():
        x, y = state.model.collate(val)
        return float(state.model.sample_losses(state.theta, (x, y)).mean())


def train(cfg: TrainConfig, data: Dataset, log_fn: Optional[Callable[[dict], None]] = None,
          max_iterations: Optional[int] = None, checkpoint_path=None) -> TrainResult:
    """Run the three stages and return the final state and checkpoint bytes.

    ``log_fn`` receives one record per iteration (loss breakdown) and one per
    influence refresh. ``max_iterations`` truncates the run (for diagnostics).
    """
    if not data.train:
        raise PreconditionError("training split is empty")
    state = init_state(cfg, data)
    rng = np.random.default_rng(cfg.seed)
    aug_rng = np.random.default_rng(cfg.seed + 7919)
    ids = [s.id for s in data.train]
    n = len(ids)
    per_epoch = math.ceil(n / cfg.batch_size)
    stop = False
    for sched in stage_schedules(cfg):
        state.stage, state.stage_iteration = sched.stage, 0
        best, bad = math.inf, 0
        for epoch in range(sched.epochs):
            order = rng.permutation(n)
            for bi in range(per_epoch):
                if max_iterations is not None and state.iteration >= max_iterations:
                    stop = True
                    break
                if cfg.influence and refresh_influence_state(state, sched.influence_cadence):
                    _install_maps(state, cfg)
                    rec = {"event": "refresh", "stage": sched.stage, "stage_iter": state.stage_iteration,
                           "iter": state.iteration,
                           "cg_residual": max((r.residual for r in state.influence.last_results), default=0.0)}
                    state.refresh_log.append(rec)
                    if log_fn:
                        log_fn(rec)
                batch = [ids[i] for i in order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]]
                state.optimizer.zero_grad(set_to_none=True)
                comps = compute_losses(state, cfg, batch, sched.lambdas, aug_rng)
                for name, v in comps.items():
                    if not torch.isfinite(v):
                        raise NumericError(f"{name} is not finite at iteration {state.iteration}",
                                           iteration=state.iteration, component=name)
                total = sum(l * comps[name] for l, name in zip(sched.lambdas, losses.COMPONENTS))
                total.backward()
                state.optimizer.step()
                breakdown = losses.total_loss({k: float(v.detach()) for k, v in comps.items()}, sched.stage)
                rec = breakdown.log_record(state.iteration, sched.stage)
                state.loss_log.append(rec)
                if log_fn:
                    log_fn(rec)
                state.iteration += 1
                state.stage_iteration += 1
            if stop:
                break
            vl = _val_loss(state, data.val)
            state.epoch_log.append({"stage": sched.stage, "epoch": epoch, "val_loss": vl, "iter": state.iteration})
            if vl < best - 1e-12:
                best, bad = vl, 0
            else:
                bad += 1
                if cfg.early_stopping_patience and bad >= cfg.early_stopping_patience:
                    log.info("early stop in stage %d after epoch %d", sched.stage, epoch)
                    break
        if stop:
            break
    blob = checkpoint_bytes(state, cfg)
    if checkpoint_path is not None:
        with open(checkpoint_path, "wb") as fh:
            fh.write(blob)
    return TrainResult(state, blob, cfg)


def checkpoint_bytes(state: TrainerState, cfg: TrainConfig) -> bytes:
    extras = {"gamma": state.gamma.detach().numpy(), "attention": state.attention.detach().numpy()}
    return save_checkpoint(None, state.model.spec, state.params, extras, meta={"config": cfg.to_dict()})


def json_lines(records) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)
