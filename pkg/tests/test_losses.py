import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from mealnet.geometry import GeometryError
from mealnet.losses import (
    LossBreakdown,
    LossConfig,
    loss_bbox,
    loss_cls,
    loss_depth,
    loss_mask,
    loss_total,
    loss_volume,
    rpn_losses,
)

f64 = torch.float64


def scalar_loss_depth(preds, gt):
    """Scalar-loop oracle: explicit block means, then mean absolute error per scale."""
    full = gt.shape[-1]
    out = []
    for p in preds:
        s = p.shape[-1]
        k = full // s
        total = 0.0
        for r in range(s):
            for c in range(s):
                block = 0.0
                for i in range(k):
                    for j in range(k):
                        block += float(gt[0, 0, r * k + i, c * k + j])
                total += abs(float(p[0, 0, r, c]) - block / (k * k))
        out.append(total / (s * s))
    return out


@torch.no_grad()
def central_diff(fn, x, eps=1e-6):
    grad = torch.zeros_like(x)
    flat = x.detach().clone().reshape(-1)
    for i in range(flat.numel()):
        up, down = flat.clone(), flat.clone()
        up[i] += eps
        down[i] -= eps
        grad.view(-1)[i] = (fn(up.reshape(x.shape)) - fn(down.reshape(x.shape))) / (2 * eps)
    return grad


class TestConfig:
    def test_defaults(self):
        assert LossConfig().alpha == 0.01

    @pytest.mark.parametrize("kw", [dict(alpha=-0.1), dict(epsilon_vol=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            LossConfig(**kw)


class TestVolume:
    def test_exact_prediction(self):
        assert float(loss_volume(0.1, 0.1)) == 0.0

    def test_ten_percent_liter_example(self):
        assert float(loss_volume(0.110, 0.100)) == pytest.approx(0.1001, abs=1e-12)

    def test_epsilon_guard(self):
        assert float(loss_volume(1e-6, 0.0, LossConfig(epsilon_vol=1e-6))) == pytest.approx(1.0 + 1e-8)

    def test_subgradient_at_target(self):
        v = torch.tensor([0.05], dtype=f64, requires_grad=True)
        loss_volume(v, torch.tensor([0.05], dtype=f64)).sum().backward()
        bound = 1 / 0.05 + 0.01
        assert -bound <= float(v.grad) <= bound

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        v_star = torch.tensor(rng.uniform(0.01, 0.2, 8), dtype=f64)
        v_hat = (v_star * torch.tensor(rng.choice([0.7, 1.3], 8), dtype=f64)).requires_grad_()
        loss_volume(v_hat, v_star).sum().backward()
        fd = central_diff(lambda v: loss_volume(v, v_star).sum(), v_hat)
        np.testing.assert_allclose(v_hat.grad.numpy(), fd.numpy(), rtol=1e-4)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 1), st.floats(1e-3, 1))
    def test_non_negative(self, v_hat, v_star):
        assert float(loss_volume(v_hat, v_star)) >= 0


class TestDepth:
    def test_exact(self):
        gt = torch.rand(2, 1, 16, 16, dtype=f64)
        preds = [F.avg_pool2d(gt, 16 // s) for s in (2, 4, 8, 16)]
        assert loss_depth(preds, gt).tolist() == [0.0] * 4

    def test_constant_offset(self):
        gt = torch.rand(1, 1, 16, 16, dtype=f64) * 0.5
        preds = [F.avg_pool2d(gt, 16 // s) + 0.005 for s in (2, 4, 8, 16)]
        np.testing.assert_allclose(loss_depth(preds, gt).numpy(), 0.005, rtol=1e-9)

    def test_scalar_oracle(self):
        rng = np.random.default_rng(1)
        gt = torch.tensor(rng.uniform(0, 1, (1, 1, 16, 16)))
        preds = [torch.tensor(rng.uniform(0, 1, (1, 1, s, s))) for s in (2, 4, 8, 16)]
        np.testing.assert_allclose(loss_depth(preds, gt).numpy(), scalar_loss_depth(preds, gt), atol=1e-9)

    def test_scale_mismatch(self):
        with pytest.raises(GeometryError):
            loss_depth([torch.zeros(1, 1, 5, 5)], torch.zeros(1, 1, 16, 16))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        gt = torch.tensor(rng.uniform(0, 1, (1, 1, 8, 8)))
        preds = [torch.tensor(rng.uniform(0, 1, (1, 1, s, s)), requires_grad=True) for s in (1, 2, 4, 8)]
        loss_depth(preds, gt).sum().backward()
        for i, p in enumerate(preds):
            def fn(x, i=i):
                return loss_depth(preds[:i] + [x] + preds[i + 1:], gt).sum()

            np.testing.assert_allclose(p.grad.numpy(), central_diff(fn, p).numpy(), rtol=1e-4)


class TestDetectionTerms:
    @pytest.mark.parametrize("c", [2, 7, 81])
    def test_uniform_logits(self, c):
        out = loss_cls(torch.zeros(3, c, dtype=f64), torch.tensor([0, 1, c - 1]))
        np.testing.assert_allclose(out.numpy(), math.log(c), rtol=1e-12)

    def test_perfect_boxes(self):
        d = torch.randn(5, 4)
        assert float(loss_bbox(d, d.clone(), torch.ones(5, dtype=torch.bool)).sum()) == 0.0

    def test_box_loss_gated_by_positivity(self):
        out = loss_bbox(torch.randn(4, 4), torch.randn(4, 4), torch.tensor([True, False, True, False]))
        assert out[1] == 0 and out[3] == 0 and out[0] > 0

    def test_smooth_l1_value(self):
        # 0.05 is inside the quadratic zone of beta = 1/9, 1.0 is in the linear zone
        out = loss_bbox(torch.tensor([[0.05, 1.0, 0.0, 0.0]], dtype=f64), torch.zeros(1, 4, dtype=f64),
                        torch.tensor([True]), beta=1 / 9)
        assert float(out) == pytest.approx(0.5 * 0.05**2 * 9 + (1.0 - 0.5 / 9), rel=1e-12)

    def test_mask_saturation(self):
        target = (torch.rand(2, 28, 28) > 0.5).float()
        logits = torch.zeros(2, 3, 28, 28)
        logits[:, 1] = (target * 2 - 1) * 60
        assert float(loss_mask(logits, target, torch.tensor([1, 1])).max()) < 1e-20

    def test_mask_uses_target_channel(self):
        target = torch.ones(1, 4, 4)
        logits = torch.full((1, 3, 4, 4), -10.0)
        logits[0, 2] = 10.0
        assert float(loss_mask(logits, target, torch.tensor([2]))) < 1e-4
        assert float(loss_mask(logits, target, torch.tensor([1]))) > 9

    def test_rpn_ignores_unsampled(self):
        obj = torch.tensor([5.0, -5.0, 100.0], dtype=f64)
        labels = torch.tensor([1, 0, -1])
        cls, box = rpn_losses(obj, torch.zeros(3, 4, dtype=f64), labels, torch.zeros(3, 4, dtype=f64))
        assert float(cls) == pytest.approx(math.log1p(math.exp(-5.0)), rel=1e-12)
        assert float(box) == 0.0


class TestTotal:
    def test_all_zero(self):
        z = torch.zeros(0)
        out = loss_total(torch.zeros(4), torch.zeros(3), torch.zeros(3), z, z)
        assert float(out.total) == 0.0 and float(out.objective) == 0.0

    def test_no_positives(self):
        depth = torch.tensor([0.1, 0.2, 0.3, 0.4], dtype=f64)
        cls = torch.tensor([0.5, 0.25], dtype=f64)
        out = loss_total(depth, cls, torch.zeros(2, dtype=f64), torch.zeros(0, dtype=f64), torch.zeros(0, dtype=f64))
        assert float(out.total) == pytest.approx(1.0 + 0.75, abs=1e-15)

    def test_hand_summation(self):
        rng = np.random.default_rng(3)
        depth = rng.uniform(0, 1, 4)
        cls, bbox = rng.uniform(0, 1, 10), rng.uniform(0, 1, 10)
        mask, vol = rng.uniform(0, 1, 3), rng.uniform(0, 1, 3)
        out = loss_total(*(torch.tensor(a) for a in (depth, cls, bbox, mask, vol)))
        want = sum(depth) + sum(cls) + sum(bbox) + sum(mask) + sum(vol)
        assert float(out.total) == pytest.approx(want, abs=1e-12)
        norm = sum(depth) + (sum(cls) + sum(bbox)) / 10 + (sum(mask) + sum(vol)) / 3
        assert float(out.normalized) == pytest.approx(norm, abs=1e-12)

    def test_gating_by_positive_flags(self):
        pos = torch.tensor([True, False, True])
        vals = torch.tensor([1.0, 10.0, 2.0], dtype=f64)
        out = loss_total(torch.zeros(4, dtype=f64), vals, vals, vals, vals, positive=pos)
        assert float(out.bbox) == 3.0 and float(out.mask) == 3.0 and float(out.vol) == 3.0
        assert float(out.cls) == 13.0

    def test_permutation_invariant(self):
        rng = np.random.default_rng(4)
        parts = [torch.tensor(rng.uniform(0, 1, 12)) for _ in range(4)]
        pos = torch.tensor(rng.random(12) < 0.4)
        depth = torch.tensor(rng.uniform(0, 1, 4))
        perm = torch.tensor(rng.permutation(12))
        a = loss_total(depth, *parts, positive=pos)
        b = loss_total(depth, *(p[perm] for p in parts), positive=pos[perm])
        assert float(a.total) == pytest.approx(float(b.total), abs=1e-12)
        assert float(a.normalized) == pytest.approx(float(b.normalized), abs=1e-12)

    def test_objective_adds_proposal_terms(self):
        out = loss_total(torch.ones(4), torch.ones(2), torch.zeros(2), torch.ones(1), torch.ones(1),
                         rpn_cls=torch.tensor(0.5), rpn_bbox=torch.tensor(0.25))
        assert float(out.objective) == pytest.approx(4 + 1 + 2 + 0.75)

    def test_mean_and_dict(self):
        a = loss_total(torch.ones(4), torch.ones(2), torch.zeros(2), torch.ones(1), torch.ones(1))
        b = loss_total(torch.zeros(4), torch.zeros(2), torch.zeros(2), torch.zeros(1), torch.zeros(1))
        m = LossBreakdown.mean([a, b])
        assert float(m.total) == pytest.approx(4.0) and float(m.normalized) == pytest.approx(3.5)
        d = m.as_dict()
        assert set(d) >= {"depth_0", "depth_3", "cls", "total", "objective"} and d["depth_0"] == 0.5
