import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from igcam import cam as camlib
from igcam import losses
from igcam.diffmodel import ConvClassifier, ModelSpec, bce_with_logits
from igcam.errors import ConfigurationError, NumericError, PreconditionError
from igcam.imaging import luminance
from igcam.proposals import box_mask

from oracles import fd_gradient, sobel_bruteforce

LN2 = math.log(2.0)


class TestLossIg:
    def test_unit_weights_are_mean_bce(self):
        logits, labels = np.array([[0.3, -1.0], [2.0, 0.5]]), np.array([[1, 0], [0, 1]])
        bce = bce_with_logits(torch.as_tensor(logits), torch.as_tensor(labels, dtype=torch.float64))
        assert losses.loss_ig(logits, labels, [1.0, 1.0]) == pytest.approx(float(bce.mean()), abs=1e-15)

    def test_zero_weight_annihilates(self):
        logits = torch.tensor([[5.0], [0.2]], dtype=torch.float64, requires_grad=True)
        labels = torch.tensor([[0.0], [1.0]], dtype=torch.float64)
        value = losses.loss_ig_t(bce_with_logits(logits, labels), [0.0, 1.0])
        value.backward()
        assert logits.grad[0, 0] == 0.0
        other = losses.loss_ig([[-3.0], [0.2]], [[0.0], [1.0]], [0.0, 1.0])
        assert float(value.detach()) == pytest.approx(other, abs=1e-15)

    def test_hand_values(self):
        assert losses.loss_ig([[0.0], [0.0]], [[1], [0]], [0.41, 0.01]) == pytest.approx(0.21 * LN2, abs=1e-12)

    def test_empty(self):
        with pytest.raises(PreconditionError):
            losses.loss_ig_t(torch.zeros(0, dtype=torch.float64), [])

    def test_negative_weight(self):
        with pytest.raises(PreconditionError):
            losses.loss_ig([[0.0]], [[1]], [-0.1])


class TestConsistency:
    def test_identical_scales(self):
        m = torch.rand(2, 4, 4, dtype=torch.float64)
        assert float(losses.loss_consistency_inf_t([m, m.clone()], [0.3, 0.9])) == 0.0

    def test_zero_weights(self):
        a, b = torch.rand(1, 4, 4, dtype=torch.float64), torch.rand(1, 2, 2, dtype=torch.float64)
        assert float(losses.loss_consistency_inf_t([a, b], [0.0, 0.0])) == 0.0

    def test_one_term(self):
        # residual mean((b - 0)^2) with b^2 averaging 0.2
        base = torch.full((1, 2, 2), math.sqrt(0.2), dtype=torch.float64)
        other = torch.zeros(1, 1, 1, dtype=torch.float64)
        assert float(losses.loss_consistency_inf_t([base, other], [1.0, 0.5])) == pytest.approx(0.1, abs=1e-12)


class TestBoundary:
    def test_constant_inputs(self):
        img = np.full((5, 5, 3), 0.4)
        assert losses.loss_boundary_inf(np.full((5, 5), 0.7), img, np.ones((5, 5))) <= 1e-12

    def test_cam_equals_luminance(self):
        img = np.random.default_rng(0).uniform(0, 1, (6, 6, 3))
        assert losses.loss_boundary_inf(luminance(img), img, np.random.default_rng(1).uniform(0, 1, (6, 6))) <= 1e-12

    def test_step_edge_against_bruteforce(self):
        img = np.zeros((3, 3, 3))
        img[:, 2] = 1.0
        inf = np.full((3, 3), 0.5)
        cam = np.zeros((3, 3))
        lum = luminance(img)
        gx, gy = sobel_bruteforce(lum)
        weight = 1 / (1 + np.exp(-inf * np.sqrt(gx**2 + gy**2)))
        expected = np.mean(weight * (np.abs(0 - gx) + np.abs(0 - gy)))
        got = losses.loss_boundary_inf(cam, img, inf)
        assert got > 0 and got == pytest.approx(expected, abs=1e-12)

    def test_weight_at_least_half(self):
        img = np.random.default_rng(2).uniform(0, 1, (6, 6, 3))
        assert losses.boundary_weight(img, np.random.default_rng(3).uniform(0, 1, (6, 6))).min() >= 0.5


class TestCompleteness:
    def masks(self):
        return np.stack([box_mask((0, 0, 1, 1), (4, 4)), box_mask((2, 2, 3, 3), (4, 4))]).astype(float)

    def test_full_activation(self):
        assert losses.loss_completeness_inf_t(torch.ones(4, 4, dtype=torch.float64), self.masks(), [0.3, 0.9]) == 0.0

    def test_zero_cam(self):
        assert float(losses.loss_completeness_inf_t(torch.zeros(4, 4, dtype=torch.float64), self.masks(),
                                                    [1.0, 1.0])) == 1.0

    def test_hand_values(self):
        cam = np.zeros((4, 4))
        cam[0:2, 0:2] = 1.0
        cam[2:4, 2:4] = [[1.0, 0.0], [0.0, 1.0]]
        got = float(losses.loss_completeness_inf_t(torch.as_tensor(cam), self.masks(), [1.0, 0.8]))
        assert got == pytest.approx(0.1, abs=1e-12)

    def test_uses_influence_weights(self):
        inf = np.zeros((4, 4))
        inf[2:, 2:] = 0.5
        np.testing.assert_allclose(losses.proposal_influence_weights(self.masks(), inf), [0.0, 0.5])

    def test_empty(self):
        with pytest.raises(PreconditionError):
            losses.loss_completeness_inf_t(torch.zeros(4, 4, dtype=torch.float64), np.zeros((0, 4, 4)), [])


class TestReg:
    def test_zero(self):
        assert losses.loss_influence_reg(np.zeros((3, 3))) == 0.0

    def test_constant(self):
        assert losses.loss_influence_reg(np.full((3, 4), 0.6)) == pytest.approx(0.36, abs=1e-15)

    def test_hand_1x2(self):
        assert losses.loss_influence_reg(np.array([[0.0, 1.0]])) == pytest.approx(1.5, abs=1e-15)


class TestTotal:
    def test_stage1(self):
        b = losses.total_loss({"l_ig": 0.7, "l_consistency": 5.0, "l_reg": 3.0}, 1)
        assert b.total == 0.7

    def test_stage3_all_ones(self):
        b = losses.total_loss(dict.fromkeys(losses.COMPONENTS, 1.0), 3)
        assert b.total == pytest.approx(2.1, abs=1e-12)

    def test_stage2_ignores_late_terms(self):
        base = losses.total_loss({"l_ig": 1.0, "l_consistency": 1.0, "l_boundary": 1.0}, 2).total
        more = losses.total_loss({"l_ig": 1.0, "l_consistency": 1.0, "l_boundary": 1.0, "l_completeness": 9.0,
                                  "l_reg": 4.0}, 2).total
        assert base == more == pytest.approx(1.8)

    def test_unknown_stage(self):
        with pytest.raises(ConfigurationError):
            losses.total_loss({}, 4)

    def test_non_finite(self):
        with pytest.raises(NumericError) as info:
            losses.total_loss({"l_boundary": float("nan")}, 2)
        assert info.value.component == "l_boundary"

    def test_log_record(self):
        rec = losses.total_loss(dict.fromkeys(losses.COMPONENTS, 1.0), 2).log_record(7, 2)
        assert set(rec) >= {"iter", "stage", "l_ig", "l_cons", "l_bnd", "l_comp", "l_reg", "total"}
        assert rec["lambdas"] == [1.0, 0.5, 0.3, 0.0, 0.0]

    @given(st.lists(st.floats(0, 10), min_size=5, max_size=5), st.sampled_from([1, 2, 3]))
    def test_affine_combination(self, vals, stage):
        b = losses.total_loss(dict(zip(losses.COMPONENTS, vals)), stage)
        lam = losses.stage_lambdas(stage)
        assert b.total == pytest.approx(sum(l * v for l, v in zip(lam, vals)), abs=1e-9)
        assert min(b.l_ig, b.l_consistency, b.l_boundary, b.l_completeness, b.l_reg) >= 0


# ---------------------------------------------------------------- gradient checks through the model


class LossHarness:
    """Each loss as a function of the flat parameters of a tiny two-scale model."""

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.spec = ModelSpec(input_size=(8, 8, 3), scale_factors=(1 / 2, 1 / 4), channels_per_scale=3,
                              num_classes=2, rng_seed=seed)
        self.model = ConvClassifier(self.spec)
        assert self.model.dim <= 200
        self.theta0 = self.model.init_params().values * 2.0
        self.images = rng.uniform(0, 1, (2, 3, 8, 8))
        self.labels = np.array([[1.0, 0.0], [1.0, 1.0]])
        self.weights = np.array([0.3, 0.8])
        self.infs = [rng.uniform(0.2, 1, (4, 4)), rng.uniform(0.2, 1, (2, 2))]
        self.agg = rng.uniform(0.2, 1, (8, 8))
        boxes = [(0, 0, 3, 3), (4, 0, 7, 3), (0, 4, 7, 7), (2, 2, 5, 5), (0, 0, 7, 7)]
        self.masks = np.stack([box_mask(b, (8, 8)) for b in boxes]).astype(float)
        self.alpha = torch.as_tensor(rng.normal(size=len(boxes)))
        self.beta = losses.proposal_influence_weights(self.masks, self.agg)

    def stack(self, theta):
        feats = [f[0] for f in self.model.pyramid(theta, torch.as_tensor(self.images[:1]))]
        heads = [self.model.head(theta, s) for s in range(2)]
        infs = [torch.as_tensor(i) for i in self.infs]
        return camlib.proposal_cam_stack_t(feats, infs, heads, self.masks, self.alpha, self.beta, (8, 8))

    def value(self, name, theta):
        if name == "ig":
            logits = self.model.logits(theta, torch.as_tensor(self.images))
            return losses.loss_ig_t(bce_with_logits(logits, torch.as_tensor(self.labels)), self.weights)
        d = self.stack(theta)
        if name == "consistency":
            return losses.loss_consistency_inf_t(d["norm"], [1.0, 0.6])
        img = self.images[0].transpose(1, 2, 0)
        if name == "boundary":
            return losses.loss_boundary_inf_t(d["aggregated"][0], img, self.agg)
        if name == "completeness":
            return losses.loss_completeness_inf_t(d["aggregated"][0], self.masks, self.beta)
        raise KeyError(name)


@pytest.mark.parametrize("name", ["ig", "consistency", "boundary", "completeness"])
def test_loss_gradient_matches_finite_differences(name):
    h = LossHarness()
    theta = torch.as_tensor(h.theta0).requires_grad_(True)
    (g,) = torch.autograd.grad(h.value(name, theta), theta)
    fd = fd_gradient(lambda v: float(h.value(name, torch.as_tensor(v))), h.theta0, step=1e-6)
    assert np.linalg.norm(g.numpy()) > 0
    assert np.linalg.norm(g.numpy() - fd) <= 1e-3 * np.linalg.norm(g.numpy())


def test_reg_gradient_in_scale_weights():
    rng = np.random.default_rng(4)
    maps = [torch.as_tensor(rng.uniform(0, 1, s)) for s in ((8, 8), (4, 4), (2, 2))]
    from igcam.influence import aggregate_t

    def reg(logits):
        return losses.loss_influence_reg_t(aggregate_t(maps, torch.softmax(logits, 0), (8, 8)))

    x0 = rng.normal(size=3)
    logits = torch.as_tensor(x0).requires_grad_(True)
    (g,) = torch.autograd.grad(reg(logits), logits)
    fd = fd_gradient(lambda v: float(reg(torch.as_tensor(v))), x0, step=1e-6)
    assert np.linalg.norm(g.numpy() - fd) <= 1e-3 * np.linalg.norm(g.numpy())
