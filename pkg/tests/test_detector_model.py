from __future__ import annotations

import math

import numpy as np
import pytest
import torch

from common.errors import ValidationError
from core.detector_model import count_parameters, gradients, image_to_tensor, init_params
from core.gce_model import init_gce_params
from core.heatmap_codec import GridSpec, collate_targets, encode_targets
from core.losses import LossSpec, detector_objective
from core.relation_geometry import LandmarkSet
from schemas.config import DetectorConfig, GCEConfig, LossWeights

FD_STEP = 1e-6


def _targets(size: int, points, box: float = 8.0):
    landmarks = LandmarkSet.from_points(points, [(box, box)] * len(points))
    batch = collate_targets([encode_targets(landmarks, GridSpec.square(size))])
    return {name: value.double() for name, value in batch.items()}


def _image(size: int, seed: int = 0) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.rand(1, 3, size, size, generator=generator, dtype=torch.float64)


def assert_matches_finite_differences(model, loss_fn, grads, names):
    params = dict(model.named_parameters())
    entries = [(name, np.unravel_index(int(grads[name].abs().argmax()), tuple(params[name].shape))) for name in names]
    assert_entries_match_finite_differences(model, loss_fn, grads, entries)


def random_parameter_entries(model, count: int, seed: int):
    """``count`` distinct (name, index) pairs drawn uniformly over every scalar parameter."""
    named = list(model.named_parameters())
    sizes = np.array([param.numel() for _, param in named])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    picks = np.random.default_rng(seed).choice(int(offsets[-1]), size=count, replace=False)
    entries = []
    for flat in picks:
        slot = int(np.searchsorted(offsets, flat, side="right")) - 1
        name, param = named[slot]
        entries.append((name, np.unravel_index(int(flat - offsets[slot]), tuple(param.shape))))
    return entries


def assert_entries_match_finite_differences(model, loss_fn, grads, entries):
    params = dict(model.named_parameters())
    for name, index in entries:
        param = params[name]
        with torch.no_grad():
            original = float(param[index])
            param[index] = original + FD_STEP
            plus = loss_fn()
            param[index] = original - FD_STEP
            minus = loss_fn()
            param[index] = original
        numeric = (plus - minus) / (2 * FD_STEP)
        analytic = float(grads[name][index])
        assert abs(analytic - numeric) <= 1e-3 * max(abs(analytic), abs(numeric)) + 1e-7, (name, index)


def test_default_parameter_count():
    assert count_parameters(init_params(DetectorConfig(), 0)) == 319398


def test_output_shapes():
    model = init_params(DetectorConfig(), 0)
    output = model(torch.rand(2, 3, 64, 48))

    assert output.y_hat.shape == (2, 1, 16, 12)
    assert output.s_hat.shape == (2, 2, 16, 12)
    assert output.o_hat.shape == (2, 2, 16, 12)
    assert output.r_hat.shape == (2, 1, 16, 12)
    assert float(output.y_hat.min()) > 0.0 and float(output.y_hat.max()) < 1.0


def test_heatmap_heads_start_at_prior():
    model = init_params(DetectorConfig(), 0)
    with torch.no_grad():
        output = model(torch.rand(1, 3, 64, 64))

    assert abs(float(output.y_hat.mean()) - 0.1) < 0.02
    assert abs(float(output.r_hat.mean()) - 0.1) < 0.02
    assert model.heatmap_head.out.bias.item() == pytest.approx(-math.log(9.0))


def test_init_is_seeded():
    first = init_params(DetectorConfig(), 7).state_dict()
    second = init_params(DetectorConfig(), 7).state_dict()
    other = init_params(DetectorConfig(), 8).state_dict()

    assert all(torch.equal(first[name], second[name]) for name in first)
    assert not torch.equal(first["stem.0.weight"], other["stem.0.weight"])


def test_init_does_not_touch_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    init_params(DetectorConfig(), 5)
    assert torch.equal(torch.rand(3), expected)


def test_rejects_bad_input_shapes():
    model = init_params(DetectorConfig(), 0)
    with pytest.raises(ValidationError):
        model(torch.rand(1, 3, 30, 32))
    with pytest.raises(ValidationError):
        model(torch.rand(1, 1, 32, 32))


def test_image_to_tensor_layout():
    image = np.zeros((8, 4, 3), dtype=np.float32)
    image[1, 2, 0] = 0.5

    tensor = image_to_tensor(image)

    assert tensor.shape == (1, 3, 8, 4)
    assert float(tensor[0, 0, 1, 2]) == 0.5
    with pytest.raises(ValidationError):
        image_to_tensor(np.zeros((8, 8)))


@pytest.mark.parametrize(
    "spec, names",
    [
        (LossSpec.landmark_heatmap, ["stem.0.weight", "blocks.0.conv1.weight", "heatmap_head.out.weight"]),
        (LossSpec.size, ["down.2.weight", "size_head.conv.weight", "size_head.out.bias"]),
        (LossSpec.offset, ["offset_head.out.weight", "blocks.1.conv2.bias"]),
        (LossSpec.relation_heatmap, ["relation_head.conv.weight", "relation_head.out.bias"]),
        (LossSpec.multi_task, ["stem.0.bias", "heatmap_head.out.bias", "size_head.out.weight"]),
    ],
)
def test_gradients_match_finite_differences(spec, names):
    model = init_params(DetectorConfig(), 0).double()
    image = _image(32)
    targets = _targets(32, [(6.0, 7.0), (14.0, 12.0), (25.0, 20.0)])
    weights = LossWeights()

    def loss_fn() -> float:
        with torch.no_grad():
            return float(detector_objective(model(image), targets, weights).term(spec))

    grads = gradients(image, targets, model, spec, weights)
    assert set(grads) == {name for name, _ in model.named_parameters()}
    assert_matches_finite_differences(model, loss_fn, grads, names)


@pytest.mark.parametrize("spec, seed", [(LossSpec.multi_task, 0), (LossSpec.landmark_heatmap, 1)])
def test_random_parameter_gradients_match_finite_differences(spec, seed):
    model = init_params(DetectorConfig(), 3).double()
    image = _image(32, seed=seed)
    targets = _targets(32, [(5.0, 9.0), (13.0, 15.0), (22.0, 18.0), (27.0, 26.0)])
    weights = LossWeights()

    def loss_fn() -> float:
        with torch.no_grad():
            return float(detector_objective(model(image), targets, weights).term(spec))

    grads = gradients(image, targets, model, spec, weights)
    assert_entries_match_finite_differences(model, loss_fn, grads, random_parameter_entries(model, 20, seed))


@pytest.mark.parametrize("spec", [LossSpec.adversarial, LossSpec.detection])
def test_adversarial_gradients_match_finite_differences(spec):
    model = init_params(DetectorConfig(), 0).double()
    evaluator = init_gce_params(GCEConfig(), 1).double()
    image = _image(128, seed=2)
    targets = _targets(128, [(30.0, 40.0), (60.0, 52.0), (90.0, 70.0)])
    weights = LossWeights()

    def loss_fn() -> float:
        with torch.no_grad():
            return float(detector_objective(model(image), targets, weights, evaluator=evaluator).term(spec))

    grads = gradients(image, targets, model, spec, weights, evaluator=evaluator)
    assert_matches_finite_differences(model, loss_fn, grads, ["heatmap_head.out.bias", "relation_head.out.weight"])


def test_adversarial_gradients_need_an_evaluator():
    model = init_params(DetectorConfig(), 0)
    targets = {name: value.float() for name, value in _targets(32, [(6.0, 7.0)]).items()}
    with pytest.raises(ValidationError):
        gradients(torch.rand(1, 3, 32, 32), targets, model, LossSpec.adversarial)


def test_relation_terms_do_not_reach_size_head():
    model = init_params(DetectorConfig(), 0).double()
    grads = gradients(_image(32), _targets(32, [(6.0, 7.0), (20.0, 20.0)]), model, LossSpec.relation_heatmap)

    assert not grads["size_head.out.weight"].any()
    assert grads["relation_head.out.bias"].abs().sum() > 0
