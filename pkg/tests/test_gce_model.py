from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from common.errors import ValidationError
from core.gce_model import (
    HeatmapPair,
    PairGroup,
    evaluate,
    evaluator_loss,
    gce_gradients,
    group_scores,
    init_gce_params,
)
from schemas.config import GCEConfig, LossWeights

FD_STEP = 1e-6


def _maps(batch: int = 2, size: int = 32, seed: int = 0, dtype=torch.float32):
    generator = torch.Generator().manual_seed(seed)
    return [torch.rand(batch, 1, size, size, generator=generator, dtype=dtype) for _ in range(4)]


def test_scores_lie_in_unit_interval():
    model = init_gce_params(GCEConfig(), 0)
    y, r, _, _ = _maps()

    scores = evaluate(HeatmapPair(y, r), model)

    assert scores.shape == (2,)
    assert bool(((scores > 0) & (scores < 1)).all())


def test_min_grid_is_enforced():
    model = init_gce_params(GCEConfig(), 0)
    assert GCEConfig().min_grid == 32
    y, r, _, _ = _maps(size=16)
    with pytest.raises(ValidationError):
        evaluate(HeatmapPair(y, r), model)


def test_pair_shapes_must_agree():
    with pytest.raises(ValidationError):
        HeatmapPair(torch.zeros(1, 1, 32, 32), torch.zeros(1, 1, 32, 16))


def test_channel_order_matters():
    model = init_gce_params(GCEConfig(), 0)
    y, r, _, _ = _maps(batch=1)
    with torch.no_grad():
        assert float(model(y, r)) != float(model(r, y))


def test_group_detaches_predictions():
    y, r, y_hat, r_hat = _maps()
    y_hat.requires_grad_(True)
    r_hat.requires_grad_(True)

    group = PairGroup.build(y, r, y_hat, r_hat)

    assert group.real.provenance == ("ground_truth", "ground_truth")
    assert group.pred_both.provenance == ("predicted", "predicted")
    assert not group.pred_landmark.landmark_map.requires_grad
    assert not group.pred_relation.relation_map.requires_grad
    assert group.pred_relation.landmark_map is y


def test_chance_level_evaluator_loss():
    model = init_gce_params(GCEConfig(), 0)
    with torch.no_grad():
        model.score.weight.zero_()
        model.score.bias.zero_()
    group = PairGroup.build(*_maps())

    scores = group_scores(group, model)

    assert all(torch.allclose(s, torch.full_like(s, 0.5)) for s in scores)
    assert float(evaluator_loss(group, model, LossWeights())) == pytest.approx(2 * math.log(2), abs=1e-4)


def test_init_is_seeded():
    first = init_gce_params(GCEConfig(), 3).state_dict()
    second = init_gce_params(GCEConfig(), 3).state_dict()
    assert all(torch.equal(first[name], second[name]) for name in first)


def _assert_entries_match_finite_differences(model, group, weights, grads, entries):
    params = dict(model.named_parameters())
    for name, index in entries:
        param = params[name]
        with torch.no_grad():
            original = float(param[index])
            param[index] = original + FD_STEP
            plus = float(evaluator_loss(group, model, weights))
            param[index] = original - FD_STEP
            minus = float(evaluator_loss(group, model, weights))
            param[index] = original
        numeric = (plus - minus) / (2 * FD_STEP)
        analytic = float(grads[name][index])
        assert abs(analytic - numeric) <= 1e-3 * max(abs(analytic), abs(numeric)) + 1e-7, (name, index)


def test_gce_gradients_match_finite_differences():
    model = init_gce_params(GCEConfig(), 0).double()
    group = PairGroup.build(*_maps(dtype=torch.float64, seed=4))
    weights = LossWeights()

    grads = gce_gradients(group, model, weights)
    assert set(grads) == {name for name, _ in model.named_parameters()}

    names = ("features.0.weight", "features.6.weight", "score.weight", "score.bias")
    entries = [(name, np.unravel_index(int(grads[name].abs().argmax()), tuple(grads[name].shape))) for name in names]
    _assert_entries_match_finite_differences(model, group, weights, grads, entries)


def test_gce_gradients_match_finite_differences_at_random_entries():
    model = init_gce_params(GCEConfig(), 2).double()
    group = PairGroup.build(*_maps(dtype=torch.float64, seed=9))
    weights = LossWeights()
    grads = gce_gradients(group, model, weights)

    named = [(name, param) for name, param in model.named_parameters()]
    offsets = np.concatenate([[0], np.cumsum([param.numel() for _, param in named])])
    entries = []
    for flat in np.random.default_rng(5).choice(int(offsets[-1]), size=20, replace=False):
        slot = int(np.searchsorted(offsets, flat, side="right")) - 1
        name, param = named[slot]
        entries.append((name, np.unravel_index(int(flat - offsets[slot]), tuple(param.shape))))

    _assert_entries_match_finite_differences(model, group, weights, grads, entries)
