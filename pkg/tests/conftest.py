"""Shared fixtures: one tiny dataset on disk per session, plus a config
factory for fast trainer construction."""

import pytest

# One line per acceptance criterion, printed after the run (the terminal
# reporter is the only stream pytest's fd-level capture leaves open).
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

from tinyumm.data import SceneDataset, build_dataset
from tinyumm.scenes import SceneSpec
from tinyumm.trainer import TrainConfig


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds") / "tiny"
    build_dataset(SceneSpec(), n_train=8, n_eval=4, root_seed=7, out_dir=root)
    return root


@pytest.fixture(scope="session")
def dataset(dataset_dir):
    return SceneDataset(dataset_dir)


@pytest.fixture
def tiny_cfg(dataset_dir):
    def make(**overrides):
        base = dict(
            paradigm="maskgit", d=32, layers=2, heads=2, K=16, patch=4,
            enc_layers=1, prompt_len=16, T=20, steps=4, batch_per_task=4,
            accum=1, lr=3e-4, weight_decay=0.0, clip_norm=1.0,
            text_warmup_steps=2, seed=11, data_dir=str(dataset_dir),
        )
        base.update(overrides)
        return TrainConfig(**base)
    return make
