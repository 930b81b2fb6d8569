import numpy as np
import pytest

from afrd.config import ModelConfig, SceneSpec
from afrd.models import ImageSet, Label
from afrd.services import datagen
from afrd.services import tensor as T


@pytest.fixture
def f64():
    with T.float64_mode():
        yield


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(image_size=16, n_lightings=2, stem_channels=4, channels=[4, 6, 8])


def make_sets(
    n: int, n_lightings: int = 2, size: int = 16, seed: int = 0, label: Label = Label.NORMAL
) -> list[ImageSet]:
    rng = np.random.default_rng(seed)
    sets = []
    for i in range(n):
        images = [rng.uniform(0.0, 1.0, size=(3, size, size)) for _ in range(n_lightings)]
        mask = None
        if label is Label.ANOMALOUS:
            mask = np.zeros((size, size), dtype=bool)
            mask[2:6, 3:7] = True
        sets.append(ImageSet(images=images, label=label, sample_id=f"s{seed}_{i:03d}", mask=mask))
    return sets


@pytest.fixture
def small_scene() -> SceneSpec:
    return SceneSpec(n_lightings=6, image_size=16, seed=3)


@pytest.fixture
def small_dataset(tmp_path, small_scene):
    root = tmp_path / "data"
    datagen.generate(small_scene, 4, 2, 3, str(root))
    return root
