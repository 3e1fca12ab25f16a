import numpy as np
import pytest

from igcam.diffmodel import ConvClassifier, LabeledImage, ModelSpec


def random_image(rng, size=8, classes=2, image_id="img"):
    labels = np.zeros(classes, dtype=int)
    labels[rng.integers(classes)] = 1
    labels[rng.random(classes) < 0.3] = 1
    return LabeledImage(rng.uniform(0, 1, (size, size, 3)), labels, None, image_id)


@pytest.fixture
def small_spec():
    # d = 56 + 38 + 8 = 102 parameters
    return ModelSpec(input_size=(8, 8, 3), scale_factors=(1 / 2, 1 / 4), channels_per_scale=2, num_classes=2, rng_seed=3)


@pytest.fixture
def small_model(small_spec):
    return ConvClassifier(small_spec)


@pytest.fixture
def small_data():
    rng = np.random.default_rng(11)
    return [random_image(rng, image_id=f"s{i}") for i in range(6)]


# tiny end-to-end setting: every component on, a few iterations per stage
TINY_DATA = dict(num_images=8, num_val=4, num_eval=4, rng_seed=0)
TINY_TRAIN = dict(batch_size=8, epochs_stage1=2, epochs_stage2=1, epochs_stage3=1, cadence_stage1=1,
                  cadence_stage2=1, cadence_stage3=1, grid_sizes=(16, 32), augment=False)


@pytest.fixture(scope="session")
def tiny_data():
    from igcam.pipeline.data import SyntheticDatasetSpec, gen_dataset

    return gen_dataset(SyntheticDatasetSpec(**TINY_DATA))


@pytest.fixture(scope="session")
def tiny_run(tiny_data):
    from igcam.pipeline.config import TrainConfig
    from igcam.pipeline.train import train

    return train(TrainConfig(**TINY_TRAIN), tiny_data)


@pytest.fixture(scope="session")
def default_run():
    """Default configuration, seed 0, trained once per session (about two minutes)."""
    from igcam.pipeline.config import TrainConfig
    from igcam.pipeline.data import SyntheticDatasetSpec, gen_dataset
    from igcam.pipeline.train import train

    data = gen_dataset(SyntheticDatasetSpec(rng_seed=0))
    return data, train(TrainConfig(seed=0), data)


# one line per acceptance criterion, shown in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
