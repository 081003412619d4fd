"""Desk-scale multi-task landmark detector.

A small strided encoder reduces the image by 4, two residual blocks refine the
features, and four parallel heads (3x3 conv, ReLU, 1x1 conv) predict the
landmark heatmap, box size, sub-cell offset and relation heatmap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional

import numpy as np
import torch
from torch import nn

from common.errors import ValidationError
from core.losses import Evaluator, LossSpec, detector_objective
from core.params import ParamStore, to_param_store
from schemas.config import DetectorConfig, LossWeights, config_hash


@dataclass
class NetworkOutput:
    y_hat: torch.Tensor  # (B, 1, h, w), sigmoid
    s_hat: torch.Tensor  # (B, 2, h, w)
    o_hat: torch.Tensor  # (B, 2, h, w)
    r_hat: torch.Tensor  # (B, 1, h, w), sigmoid
    features: Optional[torch.Tensor] = None  # (B, C, h, w)

    def detach(self) -> "NetworkOutput":
        return NetworkOutput(
            y_hat=self.y_hat.detach(),
            s_hat=self.s_hat.detach(),
            o_hat=self.o_hat.detach(),
            r_hat=self.r_hat.detach(),
            features=None if self.features is None else self.features.detach(),
        )


def _conv3x3(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)


class ResidualBlock(nn.Module):
    def __init__(self, width: int) -> None:
        super().__init__()
        self.conv1 = _conv3x3(width, width)
        self.conv2 = _conv3x3(width, width)
        self.relu = nn.ReLU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.relu(x + self.conv2(self.relu(self.conv1(x))))


class PredictionHead(nn.Module):
    def __init__(self, in_ch: int, width: int, out_ch: int) -> None:
        super().__init__()
        self.conv = _conv3x3(in_ch, width)
        self.relu = nn.ReLU()
        self.out = nn.Conv2d(width, out_ch, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(self.relu(self.conv(x)))


class LandmarkDetector(nn.Module):
    def __init__(self, config: DetectorConfig) -> None:
        super().__init__()
        self.config = config
        first, second = config.stage_widths

        self.stem = nn.Sequential(_conv3x3(3, config.stem_width), nn.ReLU())
        self.down = nn.Sequential(
            _conv3x3(config.stem_width, first, stride=2),
            nn.ReLU(),
            _conv3x3(first, second, stride=2),
            nn.ReLU(),
        )
        self.blocks = nn.Sequential(*[ResidualBlock(second) for _ in range(config.residual_blocks)])

        self.heatmap_head = PredictionHead(second, config.head_width, 1)
        self.size_head = PredictionHead(second, config.head_width, 2)
        self.offset_head = PredictionHead(second, config.head_width, 2)
        self.relation_head = PredictionHead(second, config.head_width, 1)

    @property
    def downsample(self) -> int:
        return self.config.downsample

    def reset_parameters(self) -> None:
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
                nn.init.zeros_(module.bias)

        prior = self.config.heatmap_prior
        bias = -math.log((1.0 - prior) / prior)
        for head in (self.heatmap_head, self.size_head, self.offset_head, self.relation_head):
            nn.init.normal_(head.out.weight, std=1e-3)
            nn.init.zeros_(head.out.bias)
        nn.init.constant_(self.heatmap_head.out.bias, bias)
        nn.init.constant_(self.relation_head.out.bias, bias)

    def forward(self, image: torch.Tensor) -> NetworkOutput:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValidationError(
                "Detector expects a (B, 3, H, W) image batch.", details={"shape": list(image.shape)}
            )
        height, width = image.shape[-2:]
        if height % self.downsample or width % self.downsample:
            raise ValidationError(
                "Image size must be divisible by the downsample rate.",
                details={"height": int(height), "width": int(width), "downsample": self.downsample},
            )

        features = self.blocks(self.down(self.stem(image)))
        return NetworkOutput(
            y_hat=torch.sigmoid(self.heatmap_head(features)),
            s_hat=self.size_head(features),
            o_hat=self.offset_head(features),
            r_hat=torch.sigmoid(self.relation_head(features)),
            features=features,
        )


def init_params(config: DetectorConfig, seed: int) -> LandmarkDetector:
    """Build a detector with seeded fan-in initialisation and prior-biased heatmap heads."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = LandmarkDetector(config)
        model.reset_parameters()
    return model


def forward(image: torch.Tensor, params: LandmarkDetector) -> NetworkOutput:
    return params(image)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) array in [0, 1] -> (1, 3, H, W) float tensor."""
    array = np.asarray(image, dtype=np.float32)
    if array.ndim != 3 or array.shape[2] != 3:
        raise ValidationError("Image must be an (H, W, 3) array.", details={"shape": list(array.shape)})
    return torch.from_numpy(np.ascontiguousarray(array.transpose(2, 0, 1))).unsqueeze(0)


def count_parameters(model: nn.Module) -> int:
    return int(sum(p.numel() for p in model.parameters()))


def detector_store(model: LandmarkDetector) -> ParamStore:
    return to_param_store(
        model,
        kind="detector",
        config_json=model.config.model_dump_json(),
        config_hash=config_hash(model.config),
    )


def gradients(
    image: torch.Tensor,
    targets: Mapping[str, torch.Tensor],
    params: LandmarkDetector,
    loss_spec: LossSpec | str,
    weights: Optional[LossWeights] = None,
    *,
    evaluator: Optional[Evaluator] = None,
) -> Dict[str, torch.Tensor]:
    """Exact gradients of one loss term with respect to every detector parameter."""
    spec = LossSpec(loss_spec)
    if spec is LossSpec.adversarial and evaluator is None:
        raise ValidationError("The adversarial term needs an evaluator.")

    output = params(image)
    report = detector_objective(output, targets, weights or LossWeights(), evaluator=evaluator)
    value = report.term(spec)

    named = list(params.named_parameters())
    grads = torch.autograd.grad(value, [p for _, p in named], allow_unused=True)
    return {
        name: torch.zeros_like(param) if grad is None else grad
        for (name, param), grad in zip(named, grads)
    }
