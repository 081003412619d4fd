"""Training objectives for the detector and the consistency evaluator."""

from __future__ import annotations

from dataclasses import dataclass, fields
from enum import Enum
from typing import TYPE_CHECKING, Callable, Dict, Mapping, Optional

import torch

from schemas.config import LossWeights

if TYPE_CHECKING:
    from core.detector_model import NetworkOutput

EPS = 1e-7

# (landmark map, relation map) -> consistency score per sample
Evaluator = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


class LossSpec(str, Enum):
    landmark_heatmap = "l_lh"
    size = "l_ls"
    offset = "l_lo"
    relation_heatmap = "l_rh"
    multi_task = "l_mul"
    adversarial = "l_ga"
    detection = "l_det"


@dataclass
class LossReport:
    l_lh: Optional[torch.Tensor] = None
    l_ls: Optional[torch.Tensor] = None
    l_lo: Optional[torch.Tensor] = None
    l_rh: Optional[torch.Tensor] = None
    l_mul: Optional[torch.Tensor] = None
    l_ga: Optional[torch.Tensor] = None
    l_gce: Optional[torch.Tensor] = None
    l_det: Optional[torch.Tensor] = None

    def term(self, spec: LossSpec | str) -> torch.Tensor:
        name = LossSpec(spec).value
        value = getattr(self, name)
        if value is None:
            raise KeyError(f"Loss term '{name}' was not computed.")
        return value

    def as_record(self) -> Dict[str, Optional[float]]:
        return {
            field.name: None if getattr(self, field.name) is None else float(getattr(self, field.name))
            for field in fields(self)
        }

    def non_finite(self) -> Optional[str]:
        """Name of the first non-finite populated term, if any."""
        for field in fields(self):
            value = getattr(self, field.name)
            if value is not None and not torch.isfinite(value).all():
                return field.name
        return None


def _clamp(prob: torch.Tensor) -> torch.Tensor:
    return prob.clamp(EPS, 1.0 - EPS)


def focal_heatmap_loss(
    pred: torch.Tensor,
    gt: torch.Tensor,
    gamma: float = 2.0,
    form: str = "penalty_reduced",
) -> torch.Tensor:
    """Pixel-wise focal loss normalised by the number of positive cells.

    ``penalty_reduced`` adds the (1 - gt)^4-weighted negative term around the
    Gaussian bumps; ``literal`` keeps only the positive-cell term.
    """
    pred = _clamp(pred)
    pos = gt.eq(1.0).to(pred.dtype)

    total = (-torch.log(pred) * torch.pow(1.0 - pred, gamma) * pos).sum()
    if form == "penalty_reduced":
        neg_weight = torch.pow(1.0 - gt, 4) * (1.0 - pos)
        total = total + (-torch.log(1.0 - pred) * torch.pow(pred, gamma) * neg_weight).sum()
    elif form != "literal":
        raise ValueError(f"Unknown focal form '{form}'.")

    return total / pos.sum().clamp(min=1.0)


def l1_masked(pred: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean absolute error over masked cells and channels; zero for an empty mask."""
    mask = mask.expand_as(pred).to(pred.dtype)
    err = torch.where(mask > 0, torch.abs(pred - gt), torch.zeros_like(pred))
    return err.sum() / mask.sum().clamp(min=1.0)


def multi_task_loss(
    output: "NetworkOutput",
    targets: Mapping[str, torch.Tensor],
    weights: LossWeights,
    *,
    relation_enabled: bool = True,
) -> LossReport:
    l_lh = focal_heatmap_loss(output.y_hat, targets["y_map"], weights.gamma, weights.focal_form)
    l_ls = l1_masked(output.s_hat, targets["s_map"], targets["pos_mask"])
    l_lo = l1_masked(output.o_hat, targets["o_map"], targets["pos_mask"])
    if relation_enabled:
        l_rh = focal_heatmap_loss(output.r_hat, targets["r_map"], weights.gamma, weights.focal_form)
        alpha_r = weights.alpha_r
    else:
        l_rh = torch.zeros((), dtype=l_lh.dtype, device=l_lh.device)
        alpha_r = 0.0

    l_mul = l_lh + weights.alpha_s * l_ls + weights.alpha_o * l_lo + alpha_r * l_rh
    return LossReport(l_lh=l_lh, l_ls=l_ls, l_lo=l_lo, l_rh=l_rh, l_mul=l_mul)


def gce_loss(
    s_real: torch.Tensor,
    s_pred_landmark: torch.Tensor,
    s_pred_relation: torch.Tensor,
    s_pred_both: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """Evaluator objective over the (Y;R), (Ŷ;R), (Y;R̂), (Ŷ;R̂) scores."""
    negatives = (
        torch.log(1.0 - _clamp(s_pred_landmark))
        + torch.log(1.0 - _clamp(s_pred_relation))
        + torch.log(1.0 - _clamp(s_pred_both))
    )
    return (-torch.log(_clamp(s_real)) - weights.lambda_f * negatives).mean()


def adversarial_loss(
    s_pred_landmark: torch.Tensor,
    s_pred_relation: torch.Tensor,
    s_pred_both: torch.Tensor,
    weights: LossWeights,
) -> torch.Tensor:
    """Detector-side objective rewarding predictions the evaluator accepts."""
    return (
        -torch.log(_clamp(s_pred_landmark))
        - torch.log(_clamp(s_pred_relation))
        - weights.lambda_i * torch.log(_clamp(s_pred_both))
    ).mean()


def detection_total(
    l_mul: torch.Tensor, l_ga: Optional[torch.Tensor], weights: LossWeights
) -> torch.Tensor:
    if l_ga is None:
        return l_mul
    return l_mul + weights.alpha_e * l_ga


def detector_objective(
    output: "NetworkOutput",
    targets: Mapping[str, torch.Tensor],
    weights: LossWeights,
    *,
    relation_enabled: bool = True,
    evaluator: Optional[Evaluator] = None,
) -> LossReport:
    """Multi-task loss plus, when an evaluator is given, the adversarial term."""
    report = multi_task_loss(output, targets, weights, relation_enabled=relation_enabled)
    if evaluator is not None:
        y, r = targets["y_map"], targets["r_map"]
        report.l_ga = adversarial_loss(
            evaluator(output.y_hat, r),
            evaluator(y, output.r_hat),
            evaluator(output.y_hat, output.r_hat),
            weights,
        )
    report.l_det = detection_total(report.l_mul, report.l_ga, weights)
    return report
