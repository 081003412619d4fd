from __future__ import annotations

from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field

from schemas.metrics import MetricsSummary


class LossRecord(BaseModel):
    """One line of the loss log. Terms not computed at a step are null."""

    step: int = Field(..., ge=0)
    epoch: int = Field(..., ge=0)
    phase: Literal["i", "ii", "iii"]
    network: Literal["detector", "gce"]
    l_lh: Optional[float] = None
    l_ls: Optional[float] = None
    l_lo: Optional[float] = None
    l_rh: Optional[float] = None
    l_mul: Optional[float] = None
    l_ga: Optional[float] = None
    l_gce: Optional[float] = None
    l_det: Optional[float] = None


class EpochSummary(BaseModel):
    epoch: int
    phase: Literal["i", "ii", "iii"]
    detector_steps: int
    gce_steps: int
    means: Dict[str, float] = Field(default_factory=dict)


class TrainingSummary(BaseModel):
    detector_steps: int
    gce_steps: int
    checkpoints: Dict[str, str] = Field(default_factory=dict)
    loss_log: Optional[str] = None
    validation: Optional[MetricsSummary] = None
    epochs: List[EpochSummary] = Field(default_factory=list)
