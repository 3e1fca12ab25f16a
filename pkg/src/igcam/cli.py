"""Command-line entry point: ``igcam <subcommand> ...``.

Metrics are printed to stdout as JSON lines; files use the formats defined in
:mod:`igcam.storage` and :mod:`igcam.proposals`.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import crf as crflib
from .diffmodel import ConvClassifier
from .errors import ConfigurationError, IgcamError
from .influence import maps_from_inverse, test_inverse_vectors
from .pipeline.ablate import ROWS, ablate
from .pipeline.config import TrainConfig
from .pipeline.data import SyntheticDatasetSpec, gen_dataset, load_dataset, save_dataset
from .pipeline.infer import Segmenter, dump_artifacts, evaluate_checkpoint
from .pipeline.train import json_lines, train
from .proposals import load_proposals
from .storage import load_checkpoint, parse_config, read_config, save_grid, write_config

log = logging.getLogger("igcam")


def _emit(record: dict):
    print(json.dumps(record, sort_keys=True), flush=True)


def _parse_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip().replace("-", "_"), value.strip()


def _config(args, meta_config: Optional[dict] = None) -> TrainConfig:
    """Defaults, then checkpoint metadata, then ``--config``, then ``--set``, then ``--seed``."""
    cfg = TrainConfig.from_dict(meta_config) if meta_config else TrainConfig()
    if getattr(args, "config", None):
        cfg = read_config(args.config, cfg)
    overrides = getattr(args, "set", None) or []
    if overrides:
        cfg = parse_config("".join(f"{k} = {v}\n" for k, v in overrides), cfg, "--set")
    if args.seed is not None:
        cfg = cfg.with_(seed=args.seed)
    return cfg


def _find_image(data, image_id: str):
    for split in (data.train, data.val, data.eval):
        for im in split:
            if im.id == image_id:
                return im
    raise ConfigurationError(f"no image with id {image_id!r} in the dataset")


def _checkpoint_config(args) -> TrainConfig:
    _, _, _, meta = load_checkpoint(args.checkpoint)
    return _config(args, meta.get("config"))


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args):
    spec = SyntheticDatasetSpec(
        num_images=args.num_images, num_val=args.num_val, num_eval=args.num_eval,
        label_noise_rate=args.label_noise, rng_seed=args.seed if args.seed is not None else 0,
    )
    data = gen_dataset(spec)
    save_dataset(data, args.out)
    _emit({"event": "gen-data", "out": str(args.out), "train": len(data.train), "val": len(data.val),
           "eval": len(data.eval), "seed": spec.rng_seed})


def cmd_train(args):
    cfg = _config(args)
    data = load_dataset(args.data)
    log_fh = open(args.log, "w") if args.log else None

    def log_fn(rec):
        if log_fh:
            log_fh.write(json_lines([rec]))

    try:
        result = train(cfg, data, log_fn=log_fn, checkpoint_path=args.out)
    finally:
        if log_fh:
            log_fh.close()
    if args.save_config:
        write_config(cfg, args.save_config)
    last = result.state.loss_log[-1] if result.state.loss_log else {}
    _emit({"event": "train", "out": str(args.out), "iterations": result.state.iteration,
           "final_loss": last.get("total"), "seed": cfg.seed})


def cmd_influence(args):
    cfg = _checkpoint_config(args)
    data = load_dataset(args.data)
    image = _find_image(data, args.image)
    spec, params, _, _ = load_checkpoint(args.checkpoint)
    model = ConvClassifier(spec)
    icfg = cfg.influence_config()
    rows, results = test_inverse_vectors(model, params, data.train, data.val[: cfg.num_test], icfg, args.method)
    m = maps_from_inverse(model, params, [image], rows, icfg)[0]
    save_grid(args.out, m.values, m.scale, image.id, m.epoch_stamp)
    _emit({"event": "influence", "image": image.id, "method": args.method, "out": str(args.out),
           "max_residual": max((r.residual for r in results), default=0.0)})


def _proposals(args, image):
    if not getattr(args, "proposals", None):
        return None
    return load_proposals(args.proposals, image.pixels.shape[:2])


def cmd_cam(args):
    cfg = _checkpoint_config(args)
    data = load_dataset(args.data)
    image = _find_image(data, args.image)
    seg = Segmenter(args.checkpoint, data.train, data.val, cfg).segment(image, _proposals(args, image))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    cam = seg.artifacts.get("cam")
    if cam is not None:
        for c, layer in enumerate(cam):
            path = out / f"{image.id}.cam{c + 1}.grid"
            save_grid(path, layer, 1.0, image.id)
            files.append(str(path))
    _emit({"event": "cam", "image": image.id, "present": [c + 1 for c in seg.present], "files": files})


def cmd_segment(args):
    cfg = _checkpoint_config(args)
    if args.no_crf:
        cfg = cfg.with_(crf=False)
    data = load_dataset(args.data)
    image = _find_image(data, args.image)
    seg = Segmenter(args.checkpoint, data.train, data.val, cfg).segment(image, _proposals(args, image))
    crflib.save_mask(seg.mask, args.out)
    if args.dump:
        dump_artifacts(seg, image.id, args.dump)
    _emit({"event": "segment", "image": image.id, "out": str(args.out), "present": [c + 1 for c in seg.present],
           "foreground_pixels": int((seg.mask > 0).sum())})


def cmd_eval(args):
    cfg = _checkpoint_config(args)
    if args.no_crf:
        cfg = cfg.with_(crf=False)
    data = load_dataset(args.data)
    report = evaluate_checkpoint(args.checkpoint, data, cfg)
    _emit({"event": "eval", **report.to_dict()})


def cmd_ablate(args):
    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    spec = SyntheticDatasetSpec(num_images=args.num_images, label_noise_rate=args.label_noise)
    table = ablate(cfg, spec, seeds, progress=lambda m: log.info(m))
    for r in table.rows:
        _emit({"event": "ablate", "row": r, "miou": table.miou[r], "mean": table.mean(r)})
    if args.out:
        Path(args.out).write_text(json.dumps(table.to_dict(), indent=2, sort_keys=True) + "\n")
    print(table.format(), file=sys.stderr)


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="igcam", description="Influence-guided CAM segmentation on synthetic shapes.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--seed", type=int, default=None, help="overrides the configured seed")
        sp.set_defaults(func=fn)
        return sp

    def with_config(sp):
        sp.add_argument("--config", type=Path, help="flat key=value configuration file")
        sp.add_argument("--set", type=_parse_override, action="append", metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")

    sp = add("gen-data", cmd_gen_data, "generate the synthetic shapes dataset")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--num-images", type=int, default=SyntheticDatasetSpec.num_images)
    sp.add_argument("--num-val", type=int, default=SyntheticDatasetSpec.num_val)
    sp.add_argument("--num-eval", type=int, default=SyntheticDatasetSpec.num_eval)
    sp.add_argument("--label-noise", type=float, default=SyntheticDatasetSpec.label_noise_rate)

    sp = add("train", cmd_train, "run the three training stages")
    with_config(sp)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--out", type=Path, required=True, help="checkpoint path")
    sp.add_argument("--log", type=Path, help="JSON-lines training log")
    sp.add_argument("--save-config", type=Path, help="write the effective configuration here")

    for name, fn, help_ in (("influence", cmd_influence, "spatial influence map of one image"),
                            ("cam", cmd_cam, "class activation maps of one image"),
                            ("segment", cmd_segment, "segment one image"),
                            ("eval", cmd_eval, "mIoU of a checkpoint on the eval split")):
        sp = add(name, fn, help_)
        with_config(sp)
        sp.add_argument("--checkpoint", type=Path, required=True)
        sp.add_argument("--data", type=Path, required=True)
        if name != "eval":
            sp.add_argument("--image", required=True, help="image id")
        if name == "influence":
            sp.add_argument("--method", choices=("exact", "cg", "lissa"), default="cg")
            sp.add_argument("--out", type=Path, required=True, help="grid file")
        if name in ("cam", "segment"):
            sp.add_argument("--proposals", type=Path, help="x0 y0 x1 y1 per line; replaces the generator")
        if name == "cam":
            sp.add_argument("--out-dir", type=Path, required=True)
        if name == "segment":
            sp.add_argument("--out", type=Path, required=True, help="mask image (.png or .ppm)")
            sp.add_argument("--dump", type=Path, help="directory for intermediate grids")
        if name in ("segment", "eval"):
            sp.add_argument("--no-crf", action="store_true")

    sp = add("ablate", cmd_ablate, f"cumulative ablation ({', '.join(ROWS)})")
    with_config(sp)
    sp.add_argument("--seeds", help="comma-separated seeds (default: the configured seed)")
    sp.add_argument("--num-images", type=int, default=SyntheticDatasetSpec.num_images)
    sp.add_argument("--label-noise", type=float, default=SyntheticDatasetSpec.label_noise_rate)
    sp.add_argument("--out", type=Path, help="JSON table")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except IgcamError as exc:
        print(f"igcam: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
