from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from common.errors import ValidationError
from schemas.config import TrainConfig


class TrainingPhase(str, Enum):
    detection = "i"
    multi_task = "ii"
    adversarial = "iii"


_PHASES = (TrainingPhase.detection, TrainingPhase.multi_task, TrainingPhase.adversarial)


@dataclass(frozen=True)
class PhaseDescriptor:
    phase: TrainingPhase
    index: int
    epoch_in_phase: int
    relation_enabled: bool
    adversarial: bool


def train_step_schedule(epoch: int, cfg: TrainConfig) -> PhaseDescriptor:
    """Map a global epoch onto the three half-open training phases of length E."""
    span = cfg.epochs_per_step
    if epoch < 0 or epoch >= 3 * span:
        raise ValidationError(
            "Epoch lies outside the training schedule.",
            details={"epoch": epoch, "total_epochs": 3 * span},
        )

    index = epoch // span
    phase = _PHASES[index]
    return PhaseDescriptor(
        phase=phase,
        index=index,
        epoch_in_phase=epoch - index * span,
        relation_enabled=index >= 1 and cfg.weights.alpha_r > 0,
        adversarial=index == 2 and cfg.weights.alpha_e > 0,
    )
