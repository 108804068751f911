from pathlib import Path

import pytest

from covt.core import load_config, validate_config
from covt.datapipe import build_dataset

ROOT = Path(__file__).resolve().parents[1]
TOY_CONFIG = ROOT / "configs" / "toy.cfg"


@pytest.fixture(scope="session")
def tiny_cfg():
    return validate_config({"hidden_dim": 32, "image_size": 32, "stage_steps": "2,2,2,2", "batch_size": 2,
                            "max_text_len": 64, "lr_adapter": 1e-3, "lr_projection": 1e-3, "lr_new_tokens": 1e-3})


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory, tiny_cfg):
    out = tmp_path_factory.mktemp("tiny_data")
    build_dataset(4, (1, 1, 1, 1), 0, out, tiny_cfg, replicate=True)
    return out


@pytest.fixture(scope="session")
def toy_cfg():
    return load_config(TOY_CONFIG)


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory, toy_cfg):
    out = tmp_path_factory.mktemp("toy_data")
    build_dataset(32, (1, 1, 1, 1), toy_cfg.seed, out, toy_cfg, replicate=True)
    return out


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory, toy_cfg, toy_data):
    """The full toy overfit run, shared by trainer, cli and acceptance tests."""
    from covt.trainer import train

    return train(toy_cfg, toy_data, tmp_path_factory.mktemp("toy_run"))


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance")
        for n in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[n])
