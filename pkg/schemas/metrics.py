from __future__ import annotations

from typing import List, Optional

from pydantic import BaseModel, Field

Fraction = Optional[float]


class MetricsSummary(BaseModel):
    ap: Fraction = Field(None, ge=0.0, le=1.0)
    ap50: Fraction = Field(None, ge=0.0, le=1.0)
    recall: Fraction = Field(None, ge=0.0, le=1.0)
    num_images: int = Field(0, ge=0)
    num_gt: int = Field(0, ge=0)
    num_det: int = Field(0, ge=0)


class FoldMetrics(MetricsSummary):
    fold: int = Field(..., ge=0)


class MetricsReport(MetricsSummary):
    """Pooled metrics, optionally with a per-fold breakdown and inference speed."""

    per_fold: Optional[List[FoldMetrics]] = None
    speed_ms: Optional[float] = None

    def table(self) -> str:
        rows = [("all", self)]
        rows.extend((f"fold {fold.fold}", fold) for fold in self.per_fold or [])
        lines = [f"{'split':<10}{'Speed(ms)':>10}{'Recall':>10}{'AP':>10}{'AP50':>10}"]
        for name, metrics in rows:
            speed = self.speed_ms if metrics is self else None
            lines.append(
                f"{name:<10}{_cell(speed, 1):>10}{_cell(_pct(metrics.recall), 1):>10}"
                f"{_cell(_pct(metrics.ap), 1):>10}{_cell(_pct(metrics.ap50), 1):>10}"
            )
        return "\n".join(lines)


class AblationRow(BaseModel):
    name: str
    alpha_r: float
    alpha_e: float
    seeds: List[int]
    folds: List[int] = Field(default_factory=list)
    ap: Fraction = None
    ap50: Fraction = None
    recall: Fraction = None
    runs: List[MetricsSummary] = Field(default_factory=list)


class AblationReport(BaseModel):
    rows: List[AblationRow] = Field(default_factory=list)

    def table(self) -> str:
        lines = [f"{'config':<12}{'alpha_r':>9}{'alpha_e':>9}{'Recall':>9}{'AP':>9}{'AP50':>9}"]
        for row in self.rows:
            lines.append(
                f"{row.name:<12}{row.alpha_r:>9.3g}{row.alpha_e:>9.3g}{_cell(_pct(row.recall), 1):>9}"
                f"{_cell(_pct(row.ap), 1):>9}{_cell(_pct(row.ap50), 1):>9}"
            )
        return "\n".join(lines)


class GCEProbeReport(BaseModel):
    """Mean evaluator scores on ground-truth and fully predicted pairs."""

    num_images: int
    real_mean: float
    predicted_mean: float

    @property
    def ordered(self) -> bool:
        return self.real_mean > self.predicted_mean


def _pct(value: Fraction) -> Optional[float]:
    return None if value is None else 100.0 * value


def _cell(value: Optional[float], digits: int) -> str:
    return "-" if value is None else f"{value:.{digits}f}"
