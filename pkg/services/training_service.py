"""Three-phase training of the landmark detector.

Phase i trains the landmark branches alone, phase ii adds the relation
heatmap, and phase iii adds the adversarial term from the consistency
evaluator. In phase iii the evaluator is updated once for every
``gce_period`` detector updates, on the detached outputs of the latest
detector step. Each network is frozen while the other one is updated.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset

from common.errors import DatasetError, TrainingDivergedError, ValidationError
from core.augmentation import LabeledImage, augment
from core.detector_model import LandmarkDetector, NetworkOutput, detector_store, image_to_tensor, init_params
from core.evaluation import ImageEval, Metrics, ScoredBox, evaluate_images
from core.gce_model import GroupedConsistencyEvaluator, PairGroup, evaluator_loss, gce_store, init_gce_params
from core.heatmap_codec import GridSpec, TargetMaps, collate_targets, encode_targets
from core.losses import LossReport, detector_objective
from core.schedule import PhaseDescriptor, train_step_schedule
from repositories.checkpoint_repo import save_checkpoint
from repositories.dataset_repo import DatasetItem
from repositories.loss_log_repo import LossLogRepository
from schemas.config import AugConfig, TrainConfig
from schemas.metrics import AblationReport, AblationRow, GCEProbeReport, MetricsSummary
from schemas.training import EpochSummary, LossRecord, TrainingSummary
from services.inference_service import InferenceService

logger = logging.getLogger(__name__)

ALPHA_E_SWEEP = (1.0, 0.5, 0.1, 0.05, 0.01, 0.0)
LOGGED_TERMS = ("l_lh", "l_ls", "l_lo", "l_rh", "l_mul", "l_ga", "l_gce", "l_det")


def configure_runtime(num_threads: int) -> None:
    """Pin torch to ``num_threads`` and to deterministic kernels."""
    torch.set_num_threads(num_threads)
    torch.use_deterministic_algorithms(True, warn_only=True)


class AugmentedScenes(Dataset):
    """Augments every sample afresh per epoch from a (seed, epoch, index) stream."""

    def __init__(self, items: Sequence[DatasetItem], augmentation: AugConfig, grid: GridSpec, seed: int) -> None:
        self._items = list(items)
        self._augmentation = augmentation
        self._grid = grid
        self._seed = seed
        self._epoch = 0

    def set_epoch(self, epoch: int) -> None:
        self._epoch = epoch

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, TargetMaps]:
        item = self._items[index]
        rng = np.random.default_rng([self._seed, self._epoch, index])
        sample = augment(LabeledImage(item.image, item.landmarks), self._augmentation, rng)
        # relation targets come from the surviving landmarks
        targets = encode_targets(sample.landmarks, self._grid)
        return image_to_tensor(sample.image)[0], targets


def collate_scenes(batch: Sequence[Tuple[torch.Tensor, TargetMaps]]) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    images = torch.stack([image for image, _ in batch])
    return images, collate_targets([targets for _, targets in batch])


def training_grid(items: Sequence[DatasetItem], cfg: TrainConfig) -> GridSpec:
    d = cfg.detector.downsample
    if cfg.augmentation.crop:
        return GridSpec.square(cfg.augmentation.crop_size, d)
    shapes = {item.image.shape[:2] for item in items}
    if len(shapes) != 1:
        raise DatasetError(
            "Images of different sizes need crop augmentation to be batched.",
            details={"sizes": sorted(list(s) for s in shapes)[:5]},
        )
    height, width = shapes.pop()
    return GridSpec(input_w=width, input_h=height, downsample=d)


def _set_trainable(module: torch.nn.Module, flag: bool) -> None:
    for param in module.parameters():
        param.requires_grad_(flag)


class LandmarkTrainer:
    def __init__(
        self,
        cfg: TrainConfig,
        *,
        loss_log: Optional[LossLogRepository] = None,
        num_workers: int = 0,
    ) -> None:
        self.cfg = cfg
        self.detector: LandmarkDetector = init_params(cfg.detector, cfg.seed)
        self.gce: GroupedConsistencyEvaluator = init_gce_params(cfg.gce, cfg.seed + 1)
        self.step = 0
        self.detector_steps = 0
        self.gce_steps = 0
        self.records: List[LossRecord] = []

        self._loss_log = loss_log
        self._num_workers = num_workers
        self._phase: Optional[PhaseDescriptor] = None
        self._phase_detector_steps = 0
        self._detector_opt: Optional[torch.optim.Optimizer] = None
        self._gce_opt: Optional[torch.optim.Optimizer] = None

    @property
    def phase(self) -> Optional[PhaseDescriptor]:
        return self._phase

    def start_phase(self, phase: PhaseDescriptor) -> None:
        # optimizer state does not carry across phases
        lr = self.cfg.optimizer.lr
        self._phase = phase
        self._phase_detector_steps = 0
        self._detector_opt = torch.optim.Adam(self.detector.parameters(), lr=lr)
        self._gce_opt = torch.optim.Adam(self.gce.parameters(), lr=lr)
        logger.info(
            "Phase %s: relation=%s adversarial=%s",
            phase.phase.value,
            phase.relation_enabled,
            phase.adversarial,
        )

    def _require_phase(self) -> PhaseDescriptor:
        if self._phase is None:
            raise ValidationError("start_phase must be called before training steps.")
        return self._phase

    def _record(self, report: LossReport, epoch: int, network: str) -> None:
        phase = self._require_phase()
        bad = report.non_finite()
        if bad is not None:
            raise TrainingDivergedError(
                f"Non-finite {bad} at step {self.step}.",
                details={"step": self.step, "phase": phase.phase.value, "term": bad, "network": network},
            )
        self.records.append(
            LossRecord(step=self.step, epoch=epoch, phase=phase.phase.value, network=network, **report.as_record())
        )
        self.step += 1

    def detector_update(
        self, images: torch.Tensor, targets: Dict[str, torch.Tensor], epoch: int
    ) -> Tuple[LossReport, NetworkOutput]:
        """One optimizer step on the detector with the evaluator frozen."""
        phase = self._require_phase()
        _set_trainable(self.gce, False)
        _set_trainable(self.detector, True)
        self.detector.train()

        output = self.detector(images)
        report = detector_objective(
            output,
            targets,
            self.cfg.weights,
            relation_enabled=phase.relation_enabled,
            evaluator=self.gce if phase.adversarial else None,
        )
        self._detector_opt.zero_grad(set_to_none=True)
        report.l_det.backward()
        self._record(report, epoch, "detector")
        self._detector_opt.step()

        self.detector_steps += 1
        self._phase_detector_steps += 1
        return report, output.detach()

    def gce_update(self, targets: Dict[str, torch.Tensor], output: NetworkOutput, epoch: int) -> LossReport:
        """One optimizer step on the evaluator with the detector frozen."""
        _set_trainable(self.detector, False)
        _set_trainable(self.gce, True)

        group = PairGroup.build(targets["y_map"], targets["r_map"], output.y_hat, output.r_hat)
        report = LossReport(l_gce=evaluator_loss(group, self.gce, self.cfg.weights))
        self._gce_opt.zero_grad(set_to_none=True)
        report.l_gce.backward()
        self._record(report, epoch, "gce")
        self._gce_opt.step()

        self.gce_steps += 1
        _set_trainable(self.detector, True)
        return report

    def train_epoch(self, batches: Iterable[Tuple[torch.Tensor, Dict[str, torch.Tensor]]], epoch: int) -> EpochSummary:
        phase = train_step_schedule(epoch, self.cfg)
        if self._phase is None or phase.index != self._phase.index:
            self.start_phase(phase)
        else:
            self._phase = phase

        first_record = len(self.records)
        detector_before, gce_before = self.detector_steps, self.gce_steps
        for images, targets in batches:
            _, output = self.detector_update(images, targets, epoch)
            if phase.adversarial and self._phase_detector_steps % self.cfg.gce_period == 0:
                self.gce_update(targets, output, epoch)

        epoch_records = self.records[first_record:]
        if self._loss_log is not None:
            self._loss_log.append(epoch_records)

        means: Dict[str, float] = {}
        for term in LOGGED_TERMS:
            values = [getattr(r, term) for r in epoch_records if getattr(r, term) is not None]
            if values:
                means[term] = float(np.mean(values))
        logger.info(
            "epoch %d phase %s: %s",
            epoch,
            phase.phase.value,
            " ".join(f"{name}={value:.4f}" for name, value in means.items()),
        )
        return EpochSummary(
            epoch=epoch,
            phase=phase.phase.value,
            detector_steps=self.detector_steps - detector_before,
            gce_steps=self.gce_steps - gce_before,
            means=means,
        )

    def loader(self, dataset: AugmentedScenes, epoch: int) -> DataLoader:
        dataset.set_epoch(epoch)
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(dataset)).tolist()
        return DataLoader(
            dataset,
            batch_size=self.cfg.optimizer.batch_size,
            sampler=order,
            num_workers=self._num_workers,
            collate_fn=collate_scenes,
        )

    def fit(self, items: Sequence[DatasetItem], *, checkpoints_dir: Optional[Path] = None) -> TrainingSummary:
        if not items:
            raise DatasetError("Training needs at least one image.")

        dataset = AugmentedScenes(items, self.cfg.augmentation, training_grid(items, self.cfg), self.cfg.seed)
        if self._loss_log is not None:
            self._loss_log.reset()

        epochs: List[EpochSummary] = []
        checkpoints: Dict[str, str] = {}
        for epoch in range(self.cfg.total_epochs):
            epochs.append(self.train_epoch(self.loader(dataset, epoch), epoch))
            phase = self._require_phase()
            if checkpoints_dir is not None and phase.epoch_in_phase == self.cfg.epochs_per_step - 1:
                checkpoints.update(self.save(Path(checkpoints_dir) / f"phase_{phase.phase.value}", phase.phase.value))

        return TrainingSummary(
            detector_steps=self.detector_steps,
            gce_steps=self.gce_steps,
            checkpoints=checkpoints,
            loss_log=None if self._loss_log is None else str(self._loss_log.path),
            epochs=epochs,
        )

    def save(self, directory: Path, label: str) -> Dict[str, str]:
        detector_dir = save_checkpoint(directory / "detector", detector_store(self.detector))
        gce_dir = save_checkpoint(directory / "gce", gce_store(self.gce))
        return {f"{label}/detector": str(detector_dir), f"{label}/gce": str(gce_dir)}


# --------------------------------------------------------------------- #
# Validation helpers                                                    #
# --------------------------------------------------------------------- #


def ground_truth_boxes(item: DatasetItem) -> Tuple[Tuple[float, float, float, float], ...]:
    landmarks = item.landmarks
    if landmarks.boxes is None:
        return ()
    return tuple(
        (cx - w / 2.0, cy - h / 2.0, w, h)
        for (cx, cy), (w, h) in zip(landmarks.points.tolist(), landmarks.boxes.tolist())
    )


def evaluate_detector(detector: LandmarkDetector, items: Sequence[DatasetItem], *, top_k: int = 20) -> Metrics:
    was_training = detector.training
    service = InferenceService(detector)
    images = []
    try:
        for item in items:
            detections = service.detect(item.image, conf=0.0, top_k=top_k).detections
            images.append(
                ImageEval(
                    image_id=item.image_id,
                    detections=tuple(ScoredBox(bbox=d.bbox, score=d.score) for d in detections),
                    ground_truth=ground_truth_boxes(item),
                )
            )
    finally:
        detector.train(was_training)
    return evaluate_images(images)


def metrics_summary(metrics: Metrics) -> MetricsSummary:
    return MetricsSummary(
        ap=metrics.ap,
        ap50=metrics.ap50,
        recall=metrics.recall,
        num_images=metrics.num_images,
        num_gt=metrics.num_gt,
        num_det=metrics.num_det,
    )


def probe_gce(
    detector: LandmarkDetector,
    gce: GroupedConsistencyEvaluator,
    items: Sequence[DatasetItem],
) -> GCEProbeReport:
    """Mean evaluator score on ground-truth pairs versus fully predicted pairs."""
    if not items:
        raise DatasetError("The probe needs at least one image.")

    real_scores: List[float] = []
    predicted_scores: List[float] = []
    was_training = detector.training, gce.training
    detector.eval()
    gce.eval()
    try:
        with torch.no_grad():
            for item in items:
                height, width = item.image.shape[:2]
                targets = encode_targets(item.landmarks, GridSpec(width, height, detector.downsample))
                output = detector(image_to_tensor(item.image))
                y = torch.from_numpy(targets.y_map)[None]
                r = torch.from_numpy(targets.r_map)[None]
                real_scores.append(float(gce(y, r)[0]))
                predicted_scores.append(float(gce(output.y_hat, output.r_hat)[0]))
    finally:
        detector.train(was_training[0])
        gce.train(was_training[1])
    return GCEProbeReport(
        num_images=len(items),
        real_mean=float(np.mean(real_scores)),
        predicted_mean=float(np.mean(predicted_scores)),
    )


# --------------------------------------------------------------------- #
# Runs                                                                  #
# --------------------------------------------------------------------- #


def with_weights(cfg: TrainConfig, *, alpha_r: float, alpha_e: float, seed: Optional[int] = None) -> TrainConfig:
    weights = cfg.weights.model_copy(update={"alpha_r": alpha_r, "alpha_e": alpha_e})
    update: Dict[str, object] = {"weights": weights}
    if seed is not None:
        update["seed"] = seed
    return cfg.model_copy(update=update)


def run_training(
    items: Sequence[DatasetItem],
    cfg: TrainConfig,
    out_dir: Path,
    *,
    val_items: Optional[Sequence[DatasetItem]] = None,
    num_workers: int = 0,
) -> TrainingSummary:
    """Train, checkpoint after every phase, log losses, and optionally validate."""
    out_dir = Path(out_dir)
    trainer = LandmarkTrainer(cfg, loss_log=LossLogRepository(out_dir / "loss_log.jsonl"), num_workers=num_workers)
    summary = trainer.fit(items, checkpoints_dir=out_dir / "checkpoints")

    if val_items:
        validation = metrics_summary(evaluate_detector(trainer.detector, val_items, top_k=cfg.top_k))
        summary = summary.model_copy(update={"validation": validation})
        logger.info("Validation AP=%s AP50=%s recall=%s", validation.ap, validation.ap50, validation.recall)

    (out_dir / "training_summary.json").write_text(
        json.dumps(summary.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8"
    )
    return summary


def ablation_settings(cfg: TrainConfig, *, alpha_e_sweep: bool = False) -> List[Tuple[str, float, float]]:
    alpha_r, alpha_e = cfg.weights.alpha_r, cfg.weights.alpha_e
    if alpha_e_sweep:
        return [(f"alpha_e={value:g}", alpha_r, value) for value in ALPHA_E_SWEEP]
    return [
        ("baseline", 0.0, 0.0),
        ("pixel", alpha_r, 0.0),
        ("global", 0.0, alpha_e),
        ("full", alpha_r, alpha_e),
    ]


def _mean(values: Sequence[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


@dataclass(frozen=True)
class FoldSplit:
    """Training and validation items for one held-out fold (``fold`` None for a plain split)."""

    fold: Optional[int]
    train_items: Sequence[DatasetItem]
    val_items: Sequence[DatasetItem]


def run_kfold_ablation(
    splits: Sequence[FoldSplit],
    cfg: TrainConfig,
    seeds: Sequence[int],
    out_dir: Path,
    *,
    alpha_e_sweep: bool = False,
    num_workers: int = 0,
) -> AblationReport:
    """Train every regularisation setting for every (fold, seed) pair and average the validation metrics."""
    if not splits or any(not split.val_items for split in splits):
        raise DatasetError("The ablation needs validation images for every fold.")

    rows: List[AblationRow] = []
    for name, alpha_r, alpha_e in ablation_settings(cfg, alpha_e_sweep=alpha_e_sweep):
        runs: List[MetricsSummary] = []
        for split in splits:
            split_dir = Path(out_dir) if split.fold is None else Path(out_dir) / f"fold_{split.fold}"
            for seed in seeds:
                run_cfg = with_weights(cfg, alpha_r=alpha_r, alpha_e=alpha_e, seed=seed)
                summary = run_training(
                    split.train_items,
                    run_cfg,
                    split_dir / name / f"seed_{seed}",
                    val_items=split.val_items,
                    num_workers=num_workers,
                )
                runs.append(summary.validation)
        rows.append(
            AblationRow(
                name=name,
                alpha_r=alpha_r,
                alpha_e=alpha_e,
                seeds=list(seeds),
                folds=[split.fold for split in splits if split.fold is not None],
                ap=_mean([r.ap for r in runs]),
                ap50=_mean([r.ap50 for r in runs]),
                recall=_mean([r.recall for r in runs]),
                runs=runs,
            )
        )
        logger.info("Ablation %s: AP50=%s over %d runs", name, rows[-1].ap50, len(runs))
    return AblationReport(rows=rows)

