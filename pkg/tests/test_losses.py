import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cycletts import NumericalError
from cycletts.losses import (LossReport, LossWeights, adv_cycle_loss, cls_loss,
                             ortho_loss, recon_loss, total_loss)

TOL = 1e-6


def t(x):
    return torch.tensor(x, dtype=torch.float64)


class TestReconLoss:
    def test_identical_is_zero(self):
        x = t([[1.0, 2.0], [3.0, 4.0]])
        assert float(recon_loss(x, x)) == 0.0

    def test_zeros_vs_ones_full_mask(self):
        target = torch.zeros(1, 3, 4, dtype=torch.float64)
        output = torch.ones(1, 3, 4, dtype=torch.float64)
        mask = torch.ones(1, 3, dtype=torch.bool)
        assert float(recon_loss(target, output, mask)) == pytest.approx(1.0, abs=TOL)

    def test_hand_computed_mean(self):
        target = t([[1.0, 2.0], [3.0, 4.0]])
        output = t([[1.0, 1.0], [1.0, 1.0]])
        assert float(recon_loss(target, output)) == pytest.approx(1.5, abs=TOL)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            recon_loss(torch.zeros(2, 3), torch.zeros(3, 2))

    def test_mask_restricts_the_average(self):
        target = torch.zeros(1, 2, 2, dtype=torch.float64)
        output = t([[[1.0, 1.0], [5.0, 5.0]]])
        mask = torch.tensor([[True, False]])
        assert float(recon_loss(target, output, mask)) == pytest.approx(1.0, abs=TOL)

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_symmetry_and_triangle(self, seed):
        gen = np.random.default_rng(seed)
        a, b, c = (t(gen.normal(size=(3, 4))) for _ in range(3))
        ab = float(recon_loss(a, b))
        assert ab == pytest.approx(float(recon_loss(b, a)), abs=TOL)
        assert ab <= float(recon_loss(a, c)) + float(recon_loss(c, b)) + TOL
        assert ab >= 0.0


class TestClsLoss:
    def test_confident_correct_is_zero(self):
        probs = t([[1.0, 0.0, 0.0]])
        assert float(cls_loss(probs, torch.tensor([0]))) == pytest.approx(0.0, abs=TOL)

    def test_uniform_four_classes(self):
        probs = t([[0.25, 0.25, 0.25, 0.25]])
        expected = math.log(4.0)
        for label in range(4):
            got = float(cls_loss(probs, torch.tensor([label])))
            assert got == pytest.approx(expected, abs=TOL)

    def test_even_two_class_split(self):
        probs = t([[0.5, 0.5]])
        assert float(cls_loss(probs, torch.tensor([0]))) == pytest.approx(
            math.log(2.0), abs=TOL)

    def test_zero_probability_is_clamped(self):
        probs = t([[0.0, 1.0]])
        value = float(cls_loss(probs, torch.tensor([0])))
        assert math.isfinite(value)
        assert value == pytest.approx(-math.log(1e-12), rel=1e-9)

    @given(st.floats(0.01, 0.98), st.floats(0.005, 0.019))
    @settings(max_examples=30, deadline=None)
    def test_strictly_decreasing_toward_truth(self, p, step):
        before = float(cls_loss(t([[p, 1 - p]]), torch.tensor([0])))
        after = float(cls_loss(t([[p + step, 1 - p - step]]), torch.tensor([0])))
        assert after < before


class TestAdvCycleLoss:
    def test_weighted_combination(self):
        got = adv_cycle_loss(t(1.0), t(2.0), t(3.0), LossWeights())
        assert float(got) == pytest.approx(3.03, abs=TOL)

    def test_all_zero(self):
        got = adv_cycle_loss(t(0.0), t(0.0), t(0.0), LossWeights())
        assert float(got) == pytest.approx(0.0, abs=TOL)

    def test_absent_components_contribute_nothing(self):
        got = adv_cycle_loss(t(1.7), None, None, LossWeights())
        assert float(got) == pytest.approx(1.7, abs=TOL)
        got = adv_cycle_loss(None, None, None, LossWeights())
        assert float(got) == pytest.approx(0.0, abs=TOL)


class TestOrthoLoss:
    def test_orthogonal_vectors(self):
        assert float(ortho_loss(t([[1.0, 0.0]]), t([[0.0, 1.0]]))) == pytest.approx(
            0.0, abs=TOL)

    def test_identical_unit_vectors(self):
        assert float(ortho_loss(t([[1.0, 0.0]]), t([[1.0, 0.0]]))) == pytest.approx(
            1.0, abs=TOL)

    def test_scaled_overlap(self):
        assert float(ortho_loss(t([[2.0, 0.0]]), t([[1.0, 1.0]]))) == pytest.approx(
            2.0, abs=TOL)

    def test_batch_mean(self):
        e1 = t([[1.0, 0.0], [2.0, 0.0]])
        e2 = t([[0.0, 1.0], [1.0, 1.0]])
        assert float(ortho_loss(e1, e2)) == pytest.approx(1.0, abs=TOL)

    def test_batch_size_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ortho_loss(torch.zeros(2, 3), torch.zeros(3, 3))

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_rotation_invariance(self, seed):
        gen = np.random.default_rng(seed)
        e1 = t(gen.normal(size=(5, 6)))
        e2 = t(gen.normal(size=(5, 6)))
        q, _ = np.linalg.qr(gen.normal(size=(6, 6)))
        rot = t(q)
        base = float(ortho_loss(e1, e2))
        rotated = float(ortho_loss(e1 @ rot, e2 @ rot))
        assert rotated == pytest.approx(base, rel=1e-9, abs=TOL)

    def test_include_self_adds_squared_norms(self):
        e1, e2 = t([[2.0, 0.0]]), t([[0.0, 1.0]])
        assert float(ortho_loss(e1, e2, include_self=True)) == pytest.approx(
            0.0 + 4.0 + 1.0, abs=TOL)


class TestTotalLoss:
    def test_weighted_sum(self):
        got = total_loss(t(1.0), t(2.0), t(5.0), LossWeights())
        assert float(got) == pytest.approx(3.1, abs=TOL)

    def test_all_zero(self):
        assert float(total_loss(t(0.0), t(0.0), t(0.0), LossWeights())) == 0.0

    def test_gamma_zero_ignores_ortho(self):
        w = LossWeights(gamma=0.0)
        a = float(total_loss(t(1.0), t(2.0), t(100.0), w))
        b = float(total_loss(t(1.0), t(2.0), t(-100.0 + 200.0), w))
        assert a == pytest.approx(b, abs=TOL)

    def test_non_finite_part_identified(self):
        with pytest.raises(NumericalError, match="adv_cycle"):
            total_loss(t(1.0), t(float("nan")), t(0.0), LossWeights())
        with pytest.raises(NumericalError, match="recon"):
            total_loss(t(float("inf")), t(0.0), t(0.0), LossWeights())

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_linearity_recomposition(self, seed):
        gen = np.random.default_rng(seed)
        recon, adv, ortho, stop = gen.uniform(0, 5, size=4)
        w = LossWeights(alpha=gen.uniform(0, 2), beta=gen.uniform(0, 2),
                        gamma=gen.uniform(0, 2), stop_weight=gen.uniform(0, 2))
        got = float(total_loss(t(recon), t(adv), t(ortho), w, stop=t(stop)))
        expected = w.alpha * recon + w.beta * adv + w.gamma * ortho + w.stop_weight * stop
        assert got == pytest.approx(expected, abs=TOL)


class TestLossReport:
    def test_total_recomputable_from_parts(self):
        w = LossWeights()
        report = LossReport(recon=1.25, cls_paired=0.5, cls_unpaired=0.25,
                            cls_synthesized=2.0, ortho=0.75, stop=0.1)
        report.adv_cycle = (report.cls_paired + report.cls_unpaired
                            + w.delta * report.cls_synthesized)
        report.total = report.recomputed_total(w)
        expected = (w.alpha * report.recon + w.beta * report.adv_cycle
                    + w.gamma * report.ortho + w.stop_weight * report.stop)
        assert report.total == pytest.approx(expected, abs=TOL)

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(alpha=-0.1)
