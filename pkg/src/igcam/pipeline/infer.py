"""End-to-end segmentation of single images from a trained checkpoint."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .. import cam as camlib
from .. import crf as crflib
from ..diffmodel import DTYPE, ConvClassifier, LabeledImage
from ..imaging import area_downsample
from ..influence import (
    aggregate_multiscale,
    maps_from_inverse,
    normalize_map,
    pyramid_maps,
    test_inverse_vectors,
)
from ..proposals import ProposalSet, generate_proposals
from ..storage import load_checkpoint, save_grid
from .config import TrainConfig
from .evaluate import evaluate
from .train import active_scales


@dataclass
class Segmentation:
    mask: np.ndarray
    present: list
    logits: np.ndarray
    artifacts: dict = field(default_factory=dict)


class Segmenter:
    """Holds a trained model plus the influence context needed to segment new images.

    Influence maps for an unseen image use its predicted classes as labels, the
    training split for the Hessian and the validation split as test samples;
    the inverse-Hessian test vectors are solved once and shared by all images.
    """

    def __init__(self, checkpoint, train_set=None, test_set=None, cfg: Optional[TrainConfig] = None):
        spec, params, extras, meta = load_checkpoint(checkpoint)
        self.cfg = cfg or TrainConfig.from_dict(meta.get("config", {}))
        self.model = ConvClassifier(spec)
        self.model.check_params(params)
        self.params = params
        n_s = len(spec.scale_factors)
        self.gamma = torch.softmax(torch.as_tensor(extras["gamma"]), 0).numpy()
        self.attention = camlib.AttentionState.from_flat(extras["attention"], n_s)
        self.train_set = list(train_set or [])
        self.test_set = list(test_set or [])[: self.cfg.num_test]
        self._rows = None

    def inverse_rows(self) -> np.ndarray:
        if self._rows is None:
            if not self.train_set or not self.test_set:
                raise ValueError("influence maps need the training and validation splits")
            self._rows, _ = test_inverse_vectors(self.model, self.params, self.train_set, self.test_set,
                                                 self.cfg.influence_config(), self.cfg.influence_method)
        return self._rows

    def segment(self, image: LabeledImage, proposals: Optional[ProposalSet] = None,
                use_crf: Optional[bool] = None) -> Segmentation:
        cfg = self.cfg
        spec = self.model.spec
        use_crf = cfg.crf if use_crf is None else use_crf
        size = tuple(spec.input_size[:2])
        x, _ = self.model.collate([image])
        theta = self.params.tensor()
        with torch.no_grad():
            feats = [f[0] for f in self.model.pyramid(theta, x)]
            logits = self.model.logits_from_pooled(theta, feats[0].mean(dim=(1, 2))).numpy()
        present = [int(c) for c in np.nonzero(logits > 0)[0]]
        if not present:
            return Segmentation(np.zeros(size, dtype=np.int64), [], logits, {"reason": "no predicted class"})

        scales = active_scales(cfg, self.model)
        art = {}
        if cfg.influence:
            pseudo = LabeledImage(image.pixels, np.isin(np.arange(spec.num_classes), present).astype(int), None, image.id)
            finest = maps_from_inverse(self.model, self.params, [pseudo], self.inverse_rows(), cfg.influence_config())[0]
            per_scale = pyramid_maps(finest, spec)
            g = self.gamma[scales] / self.gamma[scales].sum()
            msi = aggregate_multiscale([per_scale[s] for s in scales], g, spec)
            agg = msi.aggregated
            # same per-scale derivation as training: area-average the aggregate
            infs = [normalize_map(area_downsample(agg, shape)) for shape in spec.scale_shapes]
            art["influence"] = finest
            art["influence_aggregated"] = agg
            combine_w = g.tolist()
        else:
            agg = np.ones(size)
            infs = [np.ones(s) for s in spec.scale_shapes]
            combine_w = None

        with torch.no_grad():
            ft = feats
            inf_t = [torch.as_tensor(i) for i in infs]
            if cfg.influence:
                ft, _ = camlib.attend_features_t(
                    ft, inf_t, torch.tensor(self.attention.alpha, dtype=DTYPE),
                    [torch.as_tensor(p) for p in self.attention.projections])
            heads = [self.model.head(theta, s) for s in range(len(feats))]
            if cfg.instance_guidance:
                pset = proposals or generate_proposals(image, cfg.grid_sizes, cfg.quant_levels)
                masks = pset.masks()
                beta = (masks * agg).sum(axis=(1, 2)) / masks.sum(axis=(1, 2)) if cfg.influence else np.ones(len(pset))
                d = camlib.proposal_cam_stack_t(ft, inf_t, heads, masks, torch.as_tensor(pset.alpha), beta, size,
                                                scales, combine_w)
            else:
                d = camlib.pixel_cam_stack_t(ft, inf_t, heads, size, scales, combine_w)
        stack = camlib.to_stack(d)
        cam = stack.aggregated.copy()
        absent = [c for c in range(spec.num_classes) if c not in present]
        cam[absent] = 0.0
        inf_norm = normalize_map(agg) if cfg.influence else np.zeros(size)
        tau = crflib.influence_threshold(inf_norm, cfg.threshold_base, cfg.threshold_slope) if cfg.influence \
            else np.full(size, cfg.threshold_base)
        scaled = crflib.rescale_to_threshold(cam, tau)
        if use_crf:
            mask = crflib.run_crf(scaled, image.pixels, inf_norm, cfg.crf_config())
        else:
            mask = crflib.threshold_labels(scaled)
        art.update(cam_stack=stack, cam=cam, threshold=tau)
        return Segmentation(mask, present, logits, art)


def infer(checkpoint, image: LabeledImage, train_set=None, test_set=None, cfg: Optional[TrainConfig] = None,
          dump_dir=None) -> Segmentation:
    seg = Segmenter(checkpoint, train_set, test_set, cfg).segment(image)
    if dump_dir is not None:
        dump_artifacts(seg, image.id, dump_dir)
    return seg


def evaluate_checkpoint(checkpoint, data, cfg: Optional[TrainConfig] = None):
    """Segment every eval image of ``data`` and score the masks."""
    seg = Segmenter(checkpoint, data.train, data.val, cfg)
    masks = [seg.segment(im).mask for im in data.eval]
    return evaluate(masks, [im.gt_mask for im in data.eval], seg.model.spec.num_classes)


def dump_artifacts(seg: Segmentation, image_id: str, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    art = seg.artifacts
    if "influence" in art:
        m = art["influence"]
        save_grid(out / f"{image_id}.influence.grid", m.values, m.scale, image_id, m.epoch_stamp)
        save_grid(out / f"{image_id}.influence_agg.grid", art["influence_aggregated"], 1.0, image_id)
    if "cam" in art:
        for c, layer in enumerate(art["cam"]):
            save_grid(out / f"{image_id}.cam{c + 1}.grid", layer, 1.0, image_id)
    crflib.save_mask(seg.mask, out / f"{image_id}.mask.ppm")
