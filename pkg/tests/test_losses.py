from __future__ import annotations

import math

import pytest
import torch
from torch.autograd import gradcheck

from core.detector_model import NetworkOutput
from core.losses import (
    LossReport,
    adversarial_loss,
    detection_total,
    detector_objective,
    focal_heatmap_loss,
    gce_loss,
    l1_masked,
    multi_task_loss,
)
from schemas.config import LossWeights

LN2 = math.log(2.0)


def _random_instance(seed: int = 0, size: int = 8):
    generator = torch.Generator().manual_seed(seed)

    def rand(*shape):
        return torch.rand(*shape, generator=generator, dtype=torch.float64)

    y_map = rand(1, 1, size, size) * 0.9
    y_map[0, 0, 2, 3] = 1.0
    y_map[0, 0, 6, 5] = 1.0
    pos_mask = torch.zeros(1, 1, size, size, dtype=torch.float64)
    pos_mask[0, 0, 2, 3] = pos_mask[0, 0, 6, 5] = 1.0
    r_map = rand(1, 1, size, size) * 0.9
    r_map[0, 0, 4, 4] = 1.0
    targets = {
        "y_map": y_map,
        "s_map": rand(1, 2, size, size) * 10.0,
        "o_map": rand(1, 2, size, size),
        "r_map": r_map,
        "pos_mask": pos_mask,
    }
    predictions = (
        (rand(1, 1, size, size) * 0.9 + 0.05).requires_grad_(True),
        (rand(1, 2, size, size) * 10.0 + 0.5).requires_grad_(True),
        rand(1, 2, size, size).requires_grad_(True),
        (rand(1, 1, size, size) * 0.9 + 0.05).requires_grad_(True),
    )
    return targets, predictions


def _smooth_evaluator(landmark_map: torch.Tensor, relation_map: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(4.0 * (landmark_map * relation_map).mean(dim=(1, 2, 3)) - 0.5)


def test_focal_positive_cell_at_half():
    pred = torch.full((1, 1, 1, 1), 0.5)
    gt = torch.ones(1, 1, 1, 1)
    assert float(focal_heatmap_loss(pred, gt)) == pytest.approx(0.25 * LN2, abs=1e-5)


def test_focal_negative_term_depends_on_form():
    pred = torch.full((1, 1, 1, 1), 0.5)
    gt = torch.zeros(1, 1, 1, 1)

    assert float(focal_heatmap_loss(pred, gt)) == pytest.approx(0.25 * LN2, abs=1e-5)
    assert float(focal_heatmap_loss(pred, gt, form="literal")) == 0.0
    with pytest.raises(ValueError):
        focal_heatmap_loss(pred, gt, form="other")


def test_focal_is_normalised_by_positives():
    pred = torch.full((1, 1, 1, 2), 0.5)
    gt = torch.ones(1, 1, 1, 2)
    assert float(focal_heatmap_loss(pred, gt)) == pytest.approx(0.25 * LN2, abs=1e-5)


def test_focal_survives_saturated_predictions():
    pred = torch.tensor([[[[0.0, 1.0]]]])
    gt = torch.tensor([[[[1.0, 0.0]]]])
    assert torch.isfinite(focal_heatmap_loss(pred, gt))


def test_l1_masked_hand_example_and_empty_mask():
    pred = torch.tensor([[[[1.0, 5.0]], [[2.0, 7.0]]]])
    gt = torch.tensor([[[[3.0, 0.0]], [[1.0, 0.0]]]])
    mask = torch.tensor([[[[1.0, 0.0]]]])

    assert float(l1_masked(pred, gt, mask)) == pytest.approx(1.5)
    assert float(l1_masked(pred, gt, torch.zeros_like(mask))) == 0.0


def test_gce_and_adversarial_constants():
    half = torch.full((3,), 0.5)
    weights = LossWeights()

    assert float(gce_loss(half, half, half, half, weights)) == pytest.approx(2 * LN2, abs=1e-4)
    assert float(adversarial_loss(half, half, half, weights)) == pytest.approx(2.1 * LN2, abs=1e-4)


def test_detection_total_weights_adversarial_term():
    weights = LossWeights(alpha_e=0.5)
    l_mul = torch.tensor(2.0)

    assert float(detection_total(l_mul, None, weights)) == 2.0
    assert float(detection_total(l_mul, torch.tensor(4.0), weights)) == 4.0


def test_relation_disabled_zeroes_relation_term():
    targets, predictions = _random_instance()
    output = NetworkOutput(*(p.detach() for p in predictions))
    weights = LossWeights()

    report = multi_task_loss(output, targets, weights, relation_enabled=False)

    assert float(report.l_rh) == 0.0
    expected = report.l_lh + weights.alpha_s * report.l_ls + weights.alpha_o * report.l_lo
    assert float(report.l_mul) == pytest.approx(float(expected))


def test_objective_without_evaluator_has_no_adversarial_term():
    targets, predictions = _random_instance()
    report = detector_objective(NetworkOutput(*(p.detach() for p in predictions)), targets, LossWeights())

    assert report.l_ga is None
    assert float(report.l_det) == float(report.l_mul)
    assert report.as_record()["l_gce"] is None
    with pytest.raises(KeyError):
        report.term("l_ga")


def test_non_finite_terms_are_named():
    report = LossReport(l_lh=torch.tensor(1.0), l_ls=torch.tensor(float("nan")))
    assert report.non_finite() == "l_ls"
    assert LossReport(l_lh=torch.tensor(1.0)).non_finite() is None


def test_focal_and_l1_gradients():
    targets, (y_hat, s_hat, o_hat, _) = _random_instance(1)

    assert gradcheck(lambda p: focal_heatmap_loss(p, targets["y_map"]), (y_hat,), eps=1e-3, atol=1e-5, rtol=1e-3)
    assert gradcheck(
        lambda p: l1_masked(p, targets["s_map"], targets["pos_mask"]), (s_hat,), eps=1e-3, atol=1e-5, rtol=1e-3
    )
    assert gradcheck(
        lambda p: l1_masked(p, targets["o_map"], targets["pos_mask"]), (o_hat,), eps=1e-3, atol=1e-5, rtol=1e-3
    )


def test_evaluator_objective_gradients():
    generator = torch.Generator().manual_seed(2)
    scores = [
        (torch.rand(8, generator=generator, dtype=torch.float64) * 0.8 + 0.1).requires_grad_(True) for _ in range(4)
    ]
    weights = LossWeights()

    assert gradcheck(lambda *s: gce_loss(*s, weights), tuple(scores), eps=1e-3, atol=1e-5, rtol=1e-3)
    assert gradcheck(lambda *s: adversarial_loss(*s, weights), tuple(scores[1:]), eps=1e-3, atol=1e-5, rtol=1e-3)


def test_hybrid_objective_gradients():
    targets, predictions = _random_instance(3)
    weights = LossWeights()

    def total(y_hat, s_hat, o_hat, r_hat):
        output = NetworkOutput(y_hat=y_hat, s_hat=s_hat, o_hat=o_hat, r_hat=r_hat)
        return detector_objective(output, targets, weights, evaluator=_smooth_evaluator).l_det

    assert gradcheck(total, predictions, eps=1e-3, atol=1e-5, rtol=1e-3)
