from __future__ import annotations

import json

import numpy as np
import pytest
import torch
from PIL import Image

from common.errors import CheckpointError, DatasetError, NotFoundError
from core.detector_model import detector_store, init_params
from core.gce_model import gce_store, init_gce_params
from core.params import load_param_store
from repositories.checkpoint_repo import load_checkpoint, save_checkpoint
from repositories.dataset_repo import DatasetRepository, load_annotation_file
from repositories.loss_log_repo import LossLogRepository
from schemas.config import DetectorConfig, GCEConfig, SceneConfig, config_hash
from schemas.training import LossRecord
from services.dataset_service import DatasetService, split_folds, train_val_split
from services.inference_service import load_detector, load_gce


def test_checkpoint_round_trip(tmp_path):
    model = init_params(DetectorConfig(), 4)

    save_checkpoint(tmp_path / "ckpt", detector_store(model))
    restored = load_detector(tmp_path / "ckpt")

    for name, value in model.state_dict().items():
        assert torch.equal(value, restored.state_dict()[name])
    assert (tmp_path / "ckpt" / "manifest.txt").read_text().startswith("format=1\nkind=detector\n")


def test_gce_checkpoint_round_trip(tmp_path):
    model = init_gce_params(GCEConfig(), 2)
    save_checkpoint(tmp_path / "gce", gce_store(model))

    restored = load_gce(tmp_path / "gce")

    for name, value in model.state_dict().items():
        assert torch.equal(value, restored.state_dict()[name])


def test_checkpoint_kind_is_checked(tmp_path):
    save_checkpoint(tmp_path / "gce", gce_store(init_gce_params(GCEConfig(), 0)))
    with pytest.raises(CheckpointError):
        load_detector(tmp_path / "gce")


def test_truncated_weights_are_rejected(tmp_path):
    directory = save_checkpoint(tmp_path / "ckpt", detector_store(init_params(DetectorConfig(), 0)))
    weights = directory / "weights.bin"
    weights.write_bytes(weights.read_bytes()[:-4])

    with pytest.raises(CheckpointError):
        load_checkpoint(directory)


def test_malformed_manifest_is_rejected(tmp_path):
    directory = save_checkpoint(tmp_path / "ckpt", detector_store(init_params(DetectorConfig(), 0)))
    manifest = directory / "manifest.txt"
    manifest.write_text(manifest.read_text().replace("format=1", "format=9"))

    with pytest.raises(CheckpointError):
        load_checkpoint(directory)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(NotFoundError):
        load_checkpoint(tmp_path / "nothing")


def test_architecture_mismatch_is_rejected(tmp_path):
    small = DetectorConfig(head_width=32)
    save_checkpoint(tmp_path / "ckpt", detector_store(init_params(small, 0)))
    store = load_checkpoint(tmp_path / "ckpt")

    with pytest.raises(CheckpointError):
        load_param_store(init_params(DetectorConfig(), 0), store, expected_hash=config_hash(DetectorConfig()))


def test_generated_annotations_are_byte_identical(tmp_path):
    cfg = SceneConfig(seed=11)
    DatasetService(DatasetRepository(tmp_path / "a")).generate(cfg, 3, folds=3)
    DatasetService(DatasetRepository(tmp_path / "b")).generate(cfg, 3, folds=3)

    first = (tmp_path / "a" / "annotations.json").read_bytes()
    second = (tmp_path / "b" / "annotations.json").read_bytes()
    assert first == second
    assert (tmp_path / "a" / "images" / "00002.png").read_bytes() == (tmp_path / "b" / "images" / "00002.png").read_bytes()


def test_dataset_items_round_trip(dataset_dir):
    repository = DatasetRepository(dataset_dir)
    document = repository.load_annotations()

    items = repository.load_items()

    assert [item.image_id for item in items] == [0, 1, 2, 3, 4]
    assert items[0].image.shape == (128, 128, 3)
    assert len(items[0].landmarks) == len(document.by_image()[0])
    assert len(repository.load_folds()) == 5


def test_annotation_errors_name_the_field(tmp_path):
    path = tmp_path / "annotations.json"
    path.write_text(json.dumps({"images": [{"id": 0, "file": "a.png", "width": 8}], "annotations": []}))

    with pytest.raises(DatasetError) as excinfo:
        load_annotation_file(path)

    assert excinfo.value.meta.details["field"] == "images.0.height"
    with pytest.raises(NotFoundError):
        load_annotation_file(tmp_path / "missing.json")


def test_unknown_fold_ids_are_rejected(dataset_dir):
    (dataset_dir / "folds" / "fold_0.txt").write_text("0\n99\n")
    with pytest.raises(DatasetError):
        DatasetRepository(dataset_dir).load_folds()


def test_fold_split_sizes_and_determinism():
    folds = split_folds(list(range(250)), 5, seed=0)

    assert [len(fold) for fold in folds] == [50] * 5
    assert sorted(i for fold in folds for i in fold) == list(range(250))
    assert folds == split_folds(list(range(250)), 5, seed=0)

    train, val = train_val_split(folds, 2)
    assert val == folds[2]
    assert len(train) == 200 and not set(train) & set(val)


def test_relation_maps_are_sixteen_bit(dataset_dir, tmp_path):
    written = DatasetService(DatasetRepository(dataset_dir)).export_relation_maps(tmp_path / "rel")

    assert len(written) == 5
    with Image.open(written[0]) as handle:
        assert handle.size == (32, 32)
        pixels = np.asarray(handle)
    assert pixels.max() == 65535


def test_loss_log_round_trip(tmp_path):
    log = LossLogRepository(tmp_path / "loss_log.jsonl")
    log.reset()
    records = [
        LossRecord(step=0, epoch=0, phase="i", network="detector", l_lh=1.0, l_mul=1.5, l_det=1.5),
        LossRecord(step=1, epoch=2, phase="iii", network="gce", l_gce=1.3),
    ]

    log.append(records)

    assert log.read() == records
