import json

import numpy as np
import pytest
import torch

from igcam import crf as crflib
from igcam.cli import main
from igcam.diffmodel import ConvClassifier, LabeledImage
from igcam.errors import PreconditionError
from igcam.pipeline.ablate import ROWS, _training_key, ablate, row_configs
from igcam.pipeline.config import TrainConfig
from igcam.pipeline.data import CLASS_COLORS, SyntheticDatasetSpec, disk_mask, gen_dataset, save_dataset
from igcam.pipeline.infer import Segmenter, evaluate_checkpoint
from igcam.pipeline.train import compute_losses, init_state, train
from igcam.storage import load_checkpoint, load_grid, save_checkpoint

from conftest import TINY_DATA, TINY_TRAIN


class TestTraining:
    def test_log_has_stage_lambdas(self, tiny_run):
        seen = {rec["stage"]: tuple(rec["lambdas"]) for rec in tiny_run.state.loss_log}
        assert seen == {1: (1, 0, 0, 0, 0), 2: (1, 0.5, 0.3, 0, 0), 3: (1, 0.5, 0.3, 0.2, 0.1)}

    def test_total_is_weighted_sum(self, tiny_run):
        for rec in tiny_run.state.loss_log:
            parts = (rec["l_ig"], rec["l_cons"], rec["l_bnd"], rec["l_comp"], rec["l_reg"])
            assert rec["total"] == pytest.approx(sum(l * p for l, p in zip(rec["lambdas"], parts)), rel=1e-12)

    def test_refresh_every_iteration_with_cadence_one(self, tiny_run):
        assert [r["iter"] for r in tiny_run.state.refresh_log] == list(range(tiny_run.state.iteration))

    def test_refresh_cadence(self, tiny_data):
        cfg = TrainConfig(**{**TINY_TRAIN, "batch_size": 1, "epochs_stage1": 1, "epochs_stage2": 1,
                             "epochs_stage3": 1, "cadence_stage1": 3, "cadence_stage2": 4, "cadence_stage3": 5,
                             "instance_guidance": False, "multiscale": False})
        st = train(cfg, tiny_data).state
        by_stage = {s: [r["stage_iter"] for r in st.refresh_log if r["stage"] == s] for s in (1, 2, 3)}
        assert by_stage == {1: [0, 3, 6], 2: [0, 4], 3: [0, 5]}

    def test_baseline_loss_strictly_decreases(self):
        # w = 1, stage 1 only, full batch, no augmentation, Adam at the reference step size 1e-4
        data = gen_dataset(SyntheticDatasetSpec(rng_seed=0))
        cfg = TrainConfig(seed=0, influence=False, multiscale=False, instance_guidance=False, crf=False,
                          augment=False, epochs_stage1=50, epochs_stage2=0, epochs_stage3=0, learning_rate=1e-4)
        losses = [rec["l_ig"] for rec in train(cfg, data).state.loss_log]
        assert len(losses) == 50
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_unit_weights_ignore_influence(self, tiny_data):
        st = init_state(TrainConfig(**TINY_TRAIN, unit_sample_weights=True), tiny_data)
        from igcam.pipeline.train import _install_maps
        from igcam.influence import refresh_influence_state

        refresh_influence_state(st, 1, force=True)
        _install_maps(st, TrainConfig(unit_sample_weights=True))
        assert all(r.weight == 1.0 for r in st.records.values())

    def test_losses_finite_and_differentiable(self, tiny_data):
        cfg = TrainConfig(**TINY_TRAIN)
        st = init_state(cfg, tiny_data)
        from igcam.influence import refresh_influence_state
        from igcam.pipeline.train import _install_maps

        refresh_influence_state(st, 1, force=True)
        _install_maps(st, cfg)
        comps = compute_losses(st, cfg, [s.id for s in tiny_data.train[:3]], (1, 0.5, 0.3, 0.2, 0.1),
                               np.random.default_rng(0))
        total = sum(comps.values())
        total.backward()
        assert torch.isfinite(total)
        assert torch.isfinite(st.theta.grad).all() and st.theta.grad.abs().sum() > 0

    def test_deterministic(self, tiny_data, tiny_run):
        assert train(TrainConfig(**TINY_TRAIN), tiny_data).checkpoint == tiny_run.checkpoint

    def test_checkpoint_carries_config(self, tiny_run):
        _, _, extras, meta = load_checkpoint(tiny_run.checkpoint)
        assert TrainConfig.from_dict(meta["config"]) == TrainConfig(**TINY_TRAIN)
        assert set(extras) == {"gamma", "attention"}

    def test_empty_training_split(self, tiny_data):
        from igcam.pipeline.data import Dataset

        with pytest.raises(PreconditionError):
            train(TrainConfig(), Dataset([], tiny_data.val, tiny_data.eval))


class TestInference:
    def test_no_predicted_class_gives_background(self, tiny_data):
        spec = TrainConfig().model_spec()
        params = ConvClassifier(spec).init_params()
        params = type(params)(np.zeros_like(params.values), params.layout)  # every logit is exactly 0
        blob = save_checkpoint(None, spec, params, {"gamma": np.zeros(4), "attention": np.zeros(1 + 4 * 8)},
                               {"config": TrainConfig().to_dict()})
        seg = Segmenter(blob, tiny_data.train, tiny_data.val).segment(tiny_data.eval[0])
        assert seg.present == [] and not seg.mask.any()

    def test_crf_off_equals_thresholded_cam(self, tiny_run, tiny_data):
        cfg = TrainConfig(**TINY_TRAIN)
        seg = Segmenter(tiny_run.checkpoint, tiny_data.train, tiny_data.val, cfg)
        for im in tiny_data.eval:
            out = seg.segment(im, use_crf=False)
            if not out.present:
                continue
            expected = crflib.threshold_labels(crflib.rescale_to_threshold(out.artifacts["cam"],
                                                                            out.artifacts["threshold"]))
            np.testing.assert_array_equal(out.mask, expected)

    def test_absent_classes_never_labelled(self, tiny_run, tiny_data):
        seg = Segmenter(tiny_run.checkpoint, tiny_data.train, tiny_data.val)
        for im in tiny_data.eval:
            out = seg.segment(im)
            labels = set(np.unique(out.mask)) - {0}
            assert labels <= {c + 1 for c in out.present}

    def test_evaluate_checkpoint_matches_manual(self, tiny_run, tiny_data):
        from igcam.pipeline.evaluate import evaluate

        rep = evaluate_checkpoint(tiny_run.checkpoint, tiny_data)
        seg = Segmenter(tiny_run.checkpoint, tiny_data.train, tiny_data.val)
        manual = evaluate([seg.segment(im).mask for im in tiny_data.eval], [im.gt_mask for im in tiny_data.eval])
        assert rep.mean_iou == manual.mean_iou

    @pytest.mark.slow
    def test_disk_on_black(self, default_run):
        data, result = default_run
        n = 32
        gt = disk_mask(n, 10, 10, 12)
        pixels = np.zeros((n, n, 3))
        pixels[gt] = CLASS_COLORS[1]
        image = LabeledImage(pixels, np.array([0, 1, 0]), gt.astype(np.int64) * 2, "disk-on-black")
        mask = Segmenter(result.checkpoint, data.train, data.val).segment(image).mask
        inter = np.logical_and(mask == 2, gt).sum()
        union = np.logical_or(mask == 2, gt).sum()
        assert inter / union >= 0.5


class TestAblation:
    def test_rows_are_cumulative(self):
        cfgs = row_configs(TrainConfig())
        flags = [(c.instance_guidance, c.multiscale, c.influence, c.crf) for c in cfgs.values()]
        assert list(cfgs) == list(ROWS)
        assert flags == [(False,) * 4, (True, False, False, False), (True, True, False, False),
                         (True, True, True, False), (True,) * 4]

    def test_crf_rows_share_training(self):
        cfgs = row_configs(TrainConfig())
        assert _training_key(cfgs["+Inf"]) == _training_key(cfgs["+CRF"])
        assert len({_training_key(c) for c in cfgs.values()}) == 4

    def test_baseline_row_reproducible(self):
        cfg = TrainConfig(**TINY_TRAIN)
        spec = SyntheticDatasetSpec(**TINY_DATA)
        a = ablate(cfg, spec, seeds=(0,), rows=("baseline",))
        b = ablate(cfg, spec, seeds=(0,), rows=("baseline",))
        assert a.miou == b.miou
        assert set(a.monotone()) == set()

    def test_table_helpers(self):
        from igcam.pipeline.ablate import AblationTable

        t = AblationTable(("a", "b"), (0, 1), {"a": [0.5, 0.6], "b": [0.5, 0.7]})
        assert t.wins("b", "a") == [False, True]
        assert t.wins("b", "a", strict=False) == [True, True]
        assert t.monotone() == {"a -> b": True}
        assert t.format().splitlines()[2].split()[-1] == "0.6000"


class TestCli:
    def test_end_to_end(self, tmp_path, capsys):
        data = tmp_path / "d.npz"
        ck = tmp_path / "c.bin"
        cfg = tmp_path / "run.cfg"
        cfg.write_text("".join(f"{k} = {', '.join(map(str, v)) if isinstance(v, tuple) else v}\n"
                               for k, v in TINY_TRAIN.items()))

        def run(*argv):
            assert main([*map(str, argv)]) == 0
            return [json.loads(line) for line in capsys.readouterr().out.splitlines() if line.startswith("{")]

        run("gen-data", "--out", data, "--num-images", 8, "--num-val", 4, "--num-eval", 4, "--seed", 0)
        (rec,) = run("train", "--data", data, "--out", ck, "--config", cfg, "--seed", 0,
                     "--log", tmp_path / "log.jsonl", "--set", "epochs_stage1=1")
        assert rec["iterations"] == 3
        assert len((tmp_path / "log.jsonl").read_text().splitlines()) >= 3

        image = "eval-0000"
        run("influence", "--checkpoint", ck, "--data", data, "--image", image, "--method", "lissa",
            "--out", tmp_path / "m.grid", "--seed", 1)
        values, info = load_grid(tmp_path / "m.grid")
        assert info["source_id"] == image and values.min() >= 0 and values.max() <= 1

        (tmp_path / "props.txt").write_text("0 0 15 15\n16 16 31 31\n0 16 15 31\n16 0 31 15\n")
        (rec,) = run("cam", "--checkpoint", ck, "--data", data, "--image", image, "--out-dir", tmp_path / "cams",
                     "--proposals", tmp_path / "props.txt", "--seed", 0)
        assert len(rec["files"]) == (3 if rec["present"] else 0)

        (rec,) = run("segment", "--checkpoint", ck, "--data", data, "--image", image, "--out", tmp_path / "m.png",
                     "--dump", tmp_path / "dump", "--seed", 0)
        assert (tmp_path / "m.png").exists()

        (rec,) = run("eval", "--checkpoint", ck, "--data", data, "--seed", 0)
        assert 0 <= rec["mean_iou"] <= 1 and len(rec["confusion"]) == 4

    def test_ablate_command(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("epochs_stage1 = 1\nepochs_stage2 = 1\nepochs_stage3 = 1\nbatch_size = 8\n"
                       "grid_sizes = 16, 32\ncadence_stage1 = 1\n")
        assert main(["ablate", "--config", str(cfg), "--seeds", "0", "--num-images", "8",
                     "--out", str(tmp_path / "t.json")]) == 0
        rows = [json.loads(line)["row"] for line in capsys.readouterr().out.splitlines()]
        assert rows == list(ROWS)
        assert json.loads((tmp_path / "t.json").read_text())["seeds"] == [0]

    def test_errors_exit_nonzero(self, tmp_path, capsys):
        save_dataset(gen_dataset(SyntheticDatasetSpec(**TINY_DATA)), tmp_path / "d.npz")
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("no_such_key = 1\n")
        assert main(["train", "--data", str(tmp_path / "d.npz"), "--out", str(tmp_path / "c.bin"),
                     "--config", str(cfg)]) == 2
        assert "unknown key" in capsys.readouterr().err
