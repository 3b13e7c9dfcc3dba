import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from reflect_sod.data import SaliencyDataset, SyntheticSceneSpec, generate_synthetic
from reflect_sod.network import SFCNConfig, init_params

torch.set_num_threads(1)


@pytest.fixture
def tiny_config():
    return SFCNConfig(levels=3, convs_per_level=(1, 1, 1), channels_per_level=(4, 8, 8), input_size=(16, 16))


@pytest.fixture
def tiny_model(tiny_config):
    return init_params(tiny_config, seed=3, dtype=torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    generate_synthetic(SyntheticSceneSpec(size=(32, 32), seed=5), 6, root)
    generate_synthetic(SyntheticSceneSpec(size=(32, 32), seed=6), 2, root, split="val")
    return root


@pytest.fixture(scope="session")
def synthetic_dataset(synthetic_root):
    return SaliencyDataset(synthetic_root, "train")


def pytest_terminal_summary(terminalreporter):
    import acceptance_log
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
