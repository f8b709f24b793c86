import numpy as np
import pytest
import torch

from slap.dataio import SlapDataset, Vocabulary, build_dataset, load_dataset, templates_from_names
from slap.scenegen import TEMPLATES_BY_NAME, generate_scene


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def demo_bottle():
    return generate_scene(TEMPLATES_BY_NAME["pick_bottle"], seed=11, n_distractors=1)


@pytest.fixture(scope="session")
def demo_drawer():
    return generate_scene(TEMPLATES_BY_NAME["open_top_drawer"], seed=3, n_distractors=1)


@pytest.fixture(scope="session")
def tiny_dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "tiny"
    build_dataset(templates_from_names("pick_bottle,place_in_bowl"), demos_per_task=4,
                  seed=1, out_dir=out, distractors=(0, 1))
    return out


@pytest.fixture(scope="session")
def tiny_dataset(tiny_dataset_dir) -> SlapDataset:
    return load_dataset(tiny_dataset_dir)


@pytest.fixture(scope="session")
def small_vocab():
    return Vocabulary(["bottle", "bowl", "pick", "place", "the", "up"])
