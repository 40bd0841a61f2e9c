import numpy as np
import pytest
import torch

from adt import detector as det
from adt.geometry import LabeledBoxes
from adt.synthdata import DataConfig, make_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_dataset():
    return make_dataset(DataConfig(seed=3, n_source=24, n_source_val=8, n_target=12, n_eval=12))


@pytest.fixture(scope="session")
def tiny_arch():
    return det.Architecture(channels=(6, 8, 8, 8), rpn_channels=8, roi_hidden=16, roi_grid=2, post_nms_top_n=8)


@pytest.fixture
def toy_image():
    rng = np.random.default_rng(0)
    return rng.uniform(0.2, 0.8, size=(32, 32, 3)).astype(np.float32)


@pytest.fixture
def toy_labels():
    return LabeledBoxes([[4.0, 5.0, 18.0, 17.0], [20.0, 8.0, 30.0, 28.0]], [1, 3])


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[key])
