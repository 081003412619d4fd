from __future__ import annotations

from typing import List

import numpy as np
import pytest

from core.synthetic_scenes import generate_scene, scene_rng
from repositories.dataset_repo import DatasetItem, DatasetRepository
from schemas.config import AugConfig, OptimizerConfig, SceneConfig, TrainConfig
from services.dataset_service import DatasetService


def scene_items(count: int, *, seed: int = 0, n_landmarks=(3, 6)) -> List[DatasetItem]:
    cfg = SceneConfig(image_size=128, n_landmarks=n_landmarks, seed=seed)
    items = []
    for index in range(count):
        sample = generate_scene(cfg, scene_rng(seed, index))
        items.append(
            DatasetItem(
                image_id=index,
                file=f"images/{index:05d}.png",
                image=sample.image,
                landmarks=sample.landmarks,
            )
        )
    return items


@pytest.fixture
def tiny_items() -> List[DatasetItem]:
    return scene_items(4)


@pytest.fixture
def tiny_train_config() -> TrainConfig:
    return TrainConfig(
        epochs_per_step=1,
        optimizer=OptimizerConfig(batch_size=2, lr=1e-3),
        augmentation=AugConfig(crop_size=128),
    )


@pytest.fixture
def dataset_dir(tmp_path):
    root = tmp_path / "dataset"
    DatasetService(DatasetRepository(root)).generate(SceneConfig(image_size=128, seed=3), 5, folds=5)
    return root


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
