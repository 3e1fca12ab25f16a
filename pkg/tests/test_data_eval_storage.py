import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from igcam.diffmodel import ConvClassifier, ModelSpec
from igcam.errors import ConfigurationError, PreconditionError
from igcam.pipeline.config import TrainConfig, stage_schedules
from igcam.pipeline.data import SyntheticDatasetSpec, gen_dataset, load_dataset, save_dataset, square_mask
from igcam.pipeline.evaluate import evaluate
from igcam.storage import load_checkpoint, load_grid, read_config, save_checkpoint, save_grid, write_config

SMALL = SyntheticDatasetSpec(num_images=6, num_val=3, num_eval=4, rng_seed=5)


class TestDataset:
    def test_byte_identical(self, tmp_path):
        save_dataset(gen_dataset(SMALL), tmp_path / "a.npz")
        save_dataset(gen_dataset(SMALL), tmp_path / "b.npz")
        assert (tmp_path / "a.npz").read_bytes() == (tmp_path / "b.npz").read_bytes()

    def test_no_label_noise(self):
        ds = gen_dataset(SyntheticDatasetSpec(num_images=10, num_val=2, num_eval=10, label_noise_rate=0.0))
        # eval images keep their masks, so labels can be checked against the rendering
        for s in ds.eval:
            present = {int(c) for c in np.unique(s.gt_mask) if c > 0}
            assert present == {c + 1 for c in np.nonzero(s.image_labels)[0]}

    def test_noise_only_on_train(self):
        spec = SyntheticDatasetSpec(num_images=10, num_val=4, num_eval=4, label_noise_rate=0.5, rng_seed=1)
        clean = gen_dataset(SyntheticDatasetSpec(**{**spec.to_dict(), "label_noise_rate": 0.0}))
        noisy = gen_dataset(spec)
        flipped = sum(not np.array_equal(a.image_labels, b.image_labels) for a, b in zip(clean.train, noisy.train))
        assert flipped == 5
        assert all(np.array_equal(a.image_labels, b.image_labels) for a, b in zip(clean.val, noisy.val))

    def test_masks_only_on_eval(self):
        ds = gen_dataset(SMALL)
        assert all(s.gt_mask is None for s in ds.train + ds.val)
        assert all(s.gt_mask is not None for s in ds.eval)

    def test_square_area(self):
        assert square_mask(32, 3, 4, 10).sum() == 100

    def test_round_trip(self, tmp_path):
        ds = gen_dataset(SMALL)
        save_dataset(ds, tmp_path / "d.npz")
        back = load_dataset(tmp_path / "d.npz")
        assert [s.id for s in back.train] == [s.id for s in ds.train]
        assert all(np.array_equal(a.pixels, b.pixels) for a, b in zip(ds.eval, back.eval))
        assert all(np.array_equal(a.gt_mask, b.gt_mask) for a, b in zip(ds.eval, back.eval))

    @pytest.mark.parametrize("kw", [{"min_side": 4}, {"max_side": 40}, {"label_noise_rate": 1.5}, {"num_images": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            SyntheticDatasetSpec(**kw)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000))
    def test_shapes_have_min_size(self, seed):
        ds = gen_dataset(SyntheticDatasetSpec(num_images=1, num_val=1, num_eval=3, rng_seed=seed))
        for s in ds.eval:
            assert s.pixels.min() >= 0 and s.pixels.max() <= 1
            for c in np.unique(s.gt_mask):
                if c > 0:
                    assert (s.gt_mask == c).sum() >= 16


def brute_force_miou(preds, gts, n):
    ious = []
    for c in range(n):
        tp = fp = fn = 0
        for p, g in zip(preds, gts):
            for a, b in zip(np.ravel(p), np.ravel(g)):
                tp += a == c and b == c
                fp += a == c and b != c
                fn += a != c and b == c
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
    return float(np.mean(ious))


class TestEvaluate:
    def test_perfect(self):
        gt = [np.array([[0, 1], [2, 3]])]
        rep = evaluate(gt, gt)
        assert rep.mean_iou == 1.0 and all(v == 1.0 for v in rep.per_class_iou.values())

    def test_all_background(self):
        gt = [np.array([[0, 1], [2, 3]])]
        rep = evaluate([np.zeros((2, 2), int)], gt)
        assert rep.per_class_iou[1] == rep.per_class_iou[2] == rep.per_class_iou[3] == 0.0
        assert rep.foreground_miou == 0.0

    def test_hand_2x2(self):
        gt = [np.array([[1, 1], [0, 0]])]
        pred = [np.array([[1, 0], [1, 0]])]
        rep = evaluate(pred, gt, num_classes=1)
        assert rep.per_class_iou[1] == pytest.approx(1 / 3)
        np.testing.assert_array_equal(rep.confusion, [[1, 1], [1, 1]])

    def test_shape_mismatch(self):
        with pytest.raises(PreconditionError):
            evaluate([np.zeros((2, 2), int)], [np.zeros((3, 2), int)])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_matches_bruteforce(self, seed):
        rng = np.random.default_rng(seed)
        preds = [rng.integers(0, 4, (5, 4)) for _ in range(3)]
        gts = [rng.integers(0, 4, (5, 4)) for _ in range(3)]
        rep = evaluate(preds, gts)
        assert rep.mean_iou == brute_force_miou(preds, gts, 4)
        conf = rep.confusion
        for c in range(4):
            tp = conf[c, c]
            union = conf[c].sum() + conf[:, c].sum() - tp
            assert abs(rep.per_class_iou[c] - tp / union) <= 1e-12


class TestCheckpoint:
    def test_round_trip_is_byte_identical(self, tmp_path):
        spec = ModelSpec(channels_per_scale=4, rng_seed=2)
        params = ConvClassifier(spec).init_params()
        extras = {"gamma": np.array([0.1, 0.2, 0.3, 0.4]), "attention": np.arange(5.0)}
        blob = save_checkpoint(tmp_path / "c.bin", spec, params, extras, meta={"note": "x"})
        spec2, params2, extras2, meta2 = load_checkpoint(tmp_path / "c.bin")
        assert spec2 == spec and meta2 == {"note": "x"}
        assert params2.layout == params.layout and np.array_equal(params2.values, params.values)
        assert save_checkpoint(None, spec2, params2, extras2, meta2) == blob

    def test_magic(self, tmp_path):
        blob = save_checkpoint(None, ModelSpec(), ConvClassifier(ModelSpec()).init_params())
        assert blob.startswith(b"IGCAM01\n")
        with pytest.raises(ConfigurationError):
            load_checkpoint(b"NOTIT\n" + blob[8:])

    def test_truncated(self):
        blob = save_checkpoint(None, ModelSpec(), ConvClassifier(ModelSpec()).init_params())
        with pytest.raises(ConfigurationError):
            load_checkpoint(blob[:-8])


class TestGrid:
    def test_round_trip(self, tmp_path):
        values = np.random.default_rng(0).uniform(0, 1, (3, 5))
        save_grid(tmp_path / "g.grid", values, 0.5, "img-1", 42)
        back, info = load_grid(tmp_path / "g.grid")
        np.testing.assert_array_equal(back, values.astype(np.float32))
        assert info == {"scale": 0.5, "source_id": "img-1", "epoch_stamp": 42}

    def test_header(self):
        blob = save_grid(None, np.zeros((2, 3)), 1.0, "a", 0)
        assert blob.startswith(b"IGGRID width=3 height=2 scale=1.0 source_id=a epoch_stamp=0\n")
        assert len(blob.split(b"\n", 1)[1]) == 2 * 3 * 4

    def test_bad_id(self):
        with pytest.raises(ConfigurationError):
            save_grid(None, np.zeros((2, 2)), source_id="has space")


class TestConfigFile:
    def test_round_trip(self, tmp_path):
        cfg = TrainConfig(seed=3, learning_rate=0.002, grid_sizes=(4, 8), crf=False, influence_method="lissa")
        write_config(cfg, tmp_path / "c.cfg")
        assert read_config(tmp_path / "c.cfg", TrainConfig()) == cfg

    def test_partial_with_comments(self, tmp_path):
        (tmp_path / "c.cfg").write_text("# run settings\nlearning-rate = 0.5\n\nepochs_stage2=3  # short\n")
        cfg = read_config(tmp_path / "c.cfg", TrainConfig())
        assert cfg.learning_rate == 0.5 and cfg.epochs_stage2 == 3 and cfg.seed == 0

    @pytest.mark.parametrize("text", ["nonsense\n", "unknown_key = 1\n", "crf = maybe\n"])
    def test_errors(self, tmp_path, text):
        (tmp_path / "c.cfg").write_text(text)
        with pytest.raises(ConfigurationError):
            read_config(tmp_path / "c.cfg", TrainConfig())


class TestSchedules:
    def test_lambdas_and_cadences(self):
        scheds = stage_schedules(TrainConfig())
        assert [s.lambdas for s in scheds] == [(1, 0, 0, 0, 0), (1, 0.5, 0.3, 0, 0), (1, 0.5, 0.3, 0.2, 0.1)]
        assert [s.influence_cadence for s in scheds] == [100, 50, 25]

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(influence_method="newton")
