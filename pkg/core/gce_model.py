"""Grouped consistency evaluator.

Scores how well a landmark heatmap and a relation heatmap agree. It is trained
to prefer the ground-truth pair over any pair containing a prediction, and its
score feeds the detector's adversarial term. It plays no part in inference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Literal, Tuple

import torch
from torch import nn

from common.errors import ValidationError
from core.losses import gce_loss
from core.params import ParamStore, to_param_store
from schemas.config import GCEConfig, LossWeights, config_hash

Provenance = Literal["ground_truth", "predicted"]


@dataclass(frozen=True)
class HeatmapPair:
    landmark_map: torch.Tensor  # (B, 1, h, w)
    relation_map: torch.Tensor  # (B, 1, h, w)
    provenance: Tuple[Provenance, Provenance] = ("ground_truth", "ground_truth")

    def __post_init__(self) -> None:
        if self.landmark_map.shape != self.relation_map.shape:
            raise ValidationError(
                "Landmark and relation maps must share a shape.",
                details={
                    "landmark": list(self.landmark_map.shape),
                    "relation": list(self.relation_map.shape),
                },
            )

    def stacked(self) -> torch.Tensor:
        # landmark channel first, relation second
        return torch.cat([self.landmark_map, self.relation_map], dim=1)


@dataclass(frozen=True)
class PairGroup:
    """The four (landmark; relation) combinations of ground truth and prediction."""

    real: HeatmapPair
    pred_landmark: HeatmapPair
    pred_relation: HeatmapPair
    pred_both: HeatmapPair

    @classmethod
    def build(
        cls,
        y: torch.Tensor,
        r: torch.Tensor,
        y_hat: torch.Tensor,
        r_hat: torch.Tensor,
    ) -> "PairGroup":
        # detector outputs are constants from the evaluator's point of view
        y_hat, r_hat = y_hat.detach(), r_hat.detach()
        return cls(
            real=HeatmapPair(y, r, ("ground_truth", "ground_truth")),
            pred_landmark=HeatmapPair(y_hat, r, ("predicted", "ground_truth")),
            pred_relation=HeatmapPair(y, r_hat, ("ground_truth", "predicted")),
            pred_both=HeatmapPair(y_hat, r_hat, ("predicted", "predicted")),
        )


class GroupedConsistencyEvaluator(nn.Module):
    def __init__(self, config: GCEConfig) -> None:
        super().__init__()
        self.config = config

        layers = []
        in_ch = 2
        for width in config.widths:
            layers.extend(
                [
                    nn.Conv2d(in_ch, width, kernel_size=3, stride=2, padding=1),
                    nn.InstanceNorm2d(width),
                    nn.LeakyReLU(config.negative_slope),
                ]
            )
            in_ch = width
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.score = nn.Linear(in_ch, 1)

    def _check_grid(self, stacked: torch.Tensor) -> None:
        height, width = stacked.shape[-2:]
        if min(height, width) < self.config.min_grid:
            raise ValidationError(
                "Heatmaps are too small for the evaluator.",
                details={"height": int(height), "width": int(width), "min_grid": self.config.min_grid},
            )

    def logits(self, landmark_map: torch.Tensor, relation_map: torch.Tensor) -> torch.Tensor:
        stacked = HeatmapPair(landmark_map, relation_map).stacked()
        self._check_grid(stacked)
        pooled = self.pool(self.features(stacked)).flatten(1)
        return self.score(pooled).squeeze(1)

    def forward(self, landmark_map: torch.Tensor, relation_map: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(landmark_map, relation_map))


def init_gce_params(config: GCEConfig, seed: int) -> GroupedConsistencyEvaluator:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = GroupedConsistencyEvaluator(config)
        for module in model.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.kaiming_normal_(module.weight, a=config.negative_slope, nonlinearity="leaky_relu")
                nn.init.zeros_(module.bias)
    return model


def evaluate(pair: HeatmapPair, params: GroupedConsistencyEvaluator) -> torch.Tensor:
    """Consistency score in (0, 1) per sample of the pair."""
    return params(pair.landmark_map, pair.relation_map)


def group_scores(group: PairGroup, params: GroupedConsistencyEvaluator) -> Tuple[torch.Tensor, ...]:
    return tuple(
        evaluate(pair, params)
        for pair in (group.real, group.pred_landmark, group.pred_relation, group.pred_both)
    )


def evaluator_loss(group: PairGroup, params: GroupedConsistencyEvaluator, weights: LossWeights) -> torch.Tensor:
    return gce_loss(*group_scores(group, params), weights)


def gce_gradients(
    group: PairGroup,
    params: GroupedConsistencyEvaluator,
    weights: LossWeights,
) -> Dict[str, torch.Tensor]:
    """Exact gradients of the evaluator objective with respect to its parameters."""
    value = evaluator_loss(group, params, weights)
    named = list(params.named_parameters())
    grads = torch.autograd.grad(value, [p for _, p in named])
    return {name: grad for (name, _), grad in zip(named, grads)}


def gce_store(model: GroupedConsistencyEvaluator) -> ParamStore:
    return to_param_store(
        model,
        kind="gce",
        config_json=model.config.model_dump_json(),
        config_hash=config_hash(model.config),
    )
