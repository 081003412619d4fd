from __future__ import annotations

import json

import numpy as np
import pytest
import torch

from common.errors import DatasetError, TrainingDivergedError, ValidationError
from core.heatmap_codec import GridSpec
from core.schedule import train_step_schedule
from repositories.loss_log_repo import LossLogRepository
from schemas.config import AugConfig, LossWeights, OptimizerConfig, TrainConfig
from services.inference_service import load_detector, load_gce
from services.training_service import (
    AugmentedScenes,
    FoldSplit,
    LandmarkTrainer,
    ablation_settings,
    collate_scenes,
    configure_runtime,
    evaluate_detector,
    probe_gce,
    run_kfold_ablation,
    run_training,
    with_weights,
)


@pytest.fixture(autouse=True)
def single_thread():
    configure_runtime(1)


def _batch(items, cfg: TrainConfig, epoch: int = 0):
    dataset = AugmentedScenes(items, cfg.augmentation, GridSpec.square(128), cfg.seed)
    dataset.set_epoch(epoch)
    return collate_scenes([dataset[i] for i in range(2)])


def _snapshot(module: torch.nn.Module):
    return {name: value.detach().clone() for name, value in module.state_dict().items()}


def _unchanged(module: torch.nn.Module, snapshot) -> bool:
    return all(torch.equal(value, snapshot[name]) for name, value in module.state_dict().items())


def test_phase_records_follow_schedule(tiny_items):
    cfg = TrainConfig(
        epochs_per_step=2,
        optimizer=OptimizerConfig(batch_size=1),
        augmentation=AugConfig(crop_size=128),
    )
    trainer = LandmarkTrainer(cfg)

    summary = trainer.fit(tiny_items)

    detector = [r for r in trainer.records if r.network == "detector"]
    gce = [r for r in trainer.records if r.network == "gce"]
    assert summary.detector_steps == len(detector) == 3 * 2 * 4
    assert summary.gce_steps == len(gce) == 8 // 3
    assert all(r.l_rh == 0.0 and r.l_ga is None for r in detector if r.phase == "i")
    assert all(r.l_rh > 0.0 and r.l_ga is None for r in detector if r.phase == "ii")
    assert all(r.l_ga is not None for r in detector if r.phase == "iii")
    assert all(r.phase == "iii" for r in gce)
    assert [r.step for r in trainer.records] == list(range(len(trainer.records)))


def test_evaluator_runs_after_every_third_detector_step(tiny_items):
    cfg = TrainConfig(
        epochs_per_step=2,
        optimizer=OptimizerConfig(batch_size=1),
        augmentation=AugConfig(crop_size=128),
    )
    trainer = LandmarkTrainer(cfg)
    trainer.fit(tiny_items)

    phase_three = [r.network for r in trainer.records if r.phase == "iii"]
    assert phase_three == ["detector"] * 3 + ["gce"] + ["detector"] * 3 + ["gce"] + ["detector"] * 2


def test_updates_leave_the_other_network_untouched(tiny_items, tiny_train_config):
    trainer = LandmarkTrainer(tiny_train_config)
    trainer.start_phase(train_step_schedule(2, tiny_train_config))
    images, targets = _batch(tiny_items, tiny_train_config)

    gce_before, detector_before = _snapshot(trainer.gce), _snapshot(trainer.detector)
    _, output = trainer.detector_update(images, targets, epoch=2)
    assert _unchanged(trainer.gce, gce_before)
    assert not _unchanged(trainer.detector, detector_before)

    detector_before, gce_before = _snapshot(trainer.detector), _snapshot(trainer.gce)
    trainer.gce_update(targets, output, epoch=2)
    assert _unchanged(trainer.detector, detector_before)
    assert not _unchanged(trainer.gce, gce_before)


def test_training_is_deterministic(tiny_items, tiny_train_config):
    first = LandmarkTrainer(tiny_train_config)
    first.fit(tiny_items[:2])
    second = LandmarkTrainer(tiny_train_config)
    second.fit(tiny_items[:2])

    assert _unchanged(second.detector, _snapshot(first.detector))
    assert _unchanged(second.gce, _snapshot(first.gce))
    assert [r.l_det for r in first.records] == [r.l_det for r in second.records]


def test_zero_adversarial_weight_skips_the_evaluator(tiny_items, tiny_train_config):
    cfg = with_weights(tiny_train_config, alpha_r=1.0, alpha_e=0.0)
    trainer = LandmarkTrainer(cfg)
    gce_before = _snapshot(trainer.gce)

    summary = trainer.fit(tiny_items)

    assert summary.gce_steps == 0
    assert all(r.l_ga is None for r in trainer.records)
    assert _unchanged(trainer.gce, gce_before)


def test_non_finite_loss_stops_before_the_update(tiny_items, tiny_train_config):
    trainer = LandmarkTrainer(tiny_train_config)
    trainer.start_phase(train_step_schedule(0, tiny_train_config))
    images, targets = _batch(tiny_items, tiny_train_config)
    targets["y_map"] = torch.full_like(targets["y_map"], float("nan"))
    before = _snapshot(trainer.detector)

    with pytest.raises(TrainingDivergedError) as excinfo:
        trainer.detector_update(images, targets, epoch=0)

    details = excinfo.value.meta.details
    assert details["step"] == 0
    assert details["phase"] == "i"
    assert details["network"] == "detector"
    assert details["term"] == "l_lh"
    assert _unchanged(trainer.detector, before)


def test_updates_need_a_phase(tiny_items, tiny_train_config):
    trainer = LandmarkTrainer(tiny_train_config)
    images, targets = _batch(tiny_items, tiny_train_config)
    with pytest.raises(ValidationError):
        trainer.detector_update(images, targets, epoch=0)


def test_augmented_samples_depend_on_epoch(tiny_items, tiny_train_config):
    dataset = AugmentedScenes(tiny_items, tiny_train_config.augmentation, GridSpec.square(128), seed=0)

    dataset.set_epoch(1)
    first, _ = dataset[0]
    again, _ = dataset[0]
    dataset.set_epoch(2)
    later, _ = dataset[0]

    assert torch.equal(first, again)
    assert not torch.equal(first, later)


def test_run_training_writes_artifacts(tiny_items, tiny_train_config, tmp_path):
    summary = run_training(tiny_items[:3], tiny_train_config, tmp_path, val_items=tiny_items[3:])

    assert sorted(summary.checkpoints) == [
        "i/detector",
        "i/gce",
        "ii/detector",
        "ii/gce",
        "iii/detector",
        "iii/gce",
    ]
    detector = load_detector(tmp_path / "checkpoints" / "phase_iii" / "detector")
    assert detector.downsample == 4
    load_gce(tmp_path / "checkpoints" / "phase_iii" / "gce")

    log = LossLogRepository(tmp_path / "loss_log.jsonl").read()
    assert len(log) == summary.detector_steps + summary.gce_steps
    assert summary.validation is not None and summary.validation.num_images == 1

    written = json.loads((tmp_path / "training_summary.json").read_text())
    assert written["detector_steps"] == summary.detector_steps


def test_gce_scoring_reports_both_means(tiny_items, tiny_train_config):
    trainer = LandmarkTrainer(tiny_train_config)
    report = probe_gce(trainer.detector, trainer.gce, tiny_items[:2])

    assert report.num_images == 2
    assert 0.0 < report.real_mean < 1.0
    assert 0.0 < report.predicted_mean < 1.0


@pytest.mark.parametrize("training", [True, False])
def test_gce_scoring_and_validation_keep_module_modes(tiny_items, tiny_train_config, training):
    trainer = LandmarkTrainer(tiny_train_config)
    trainer.detector.train(training)
    trainer.gce.train(training)

    probe_gce(trainer.detector, trainer.gce, tiny_items[:1])
    assert (trainer.detector.training, trainer.gce.training) == (training, training)

    evaluate_detector(trainer.detector, tiny_items[:1])
    assert trainer.detector.training is training


def test_ablation_settings():
    cfg = TrainConfig(weights=LossWeights(alpha_r=1.0, alpha_e=0.1))

    assert ablation_settings(cfg) == [
        ("baseline", 0.0, 0.0),
        ("pixel", 1.0, 0.0),
        ("global", 0.0, 0.1),
        ("full", 1.0, 0.1),
    ]
    sweep = ablation_settings(cfg, alpha_e_sweep=True)
    assert [alpha_e for _, _, alpha_e in sweep] == [1.0, 0.5, 0.1, 0.05, 0.01, 0.0]
    assert np.all([alpha_r == 1.0 for _, alpha_r, _ in sweep])


def test_kfold_ablation_averages_every_fold_and_seed(tiny_items, tiny_train_config, tmp_path):
    splits = [
        FoldSplit(0, tiny_items[1:], tiny_items[:1]),
        FoldSplit(1, tiny_items[:3], tiny_items[3:]),
    ]

    report = run_kfold_ablation(splits, tiny_train_config, [0], tmp_path)

    assert [row.name for row in report.rows] == ["baseline", "pixel", "global", "full"]
    for row in report.rows:
        assert row.folds == [0, 1]
        assert len(row.runs) == 2
        assert row.ap50 == pytest.approx(np.mean([run.ap50 for run in row.runs]))
    assert (tmp_path / "fold_1" / "full" / "seed_0" / "checkpoints" / "phase_iii" / "gce").is_dir()


def test_kfold_ablation_needs_validation_images(tiny_items, tiny_train_config, tmp_path):
    with pytest.raises(DatasetError):
        run_kfold_ablation([FoldSplit(0, tiny_items, [])], tiny_train_config, [0], tmp_path)
