import numpy as np
import pytest
import torch

from cerkit import pipeline
from cerkit.dataset import load_manifest
from cerkit.fixtures import make_image_fixture
from cerkit.trainer import load_config


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def image_fixture(tmp_path_factory):
    """The shipped synthetic fixture: 700 train / 140 val compound images."""
    root = tmp_path_factory.mktemp("fixture")
    manifest = make_image_fixture(root)
    return root, manifest


@pytest.fixture(scope="session")
def small_fixture(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    manifest = make_image_fixture(root, n_train_per_class=12, n_val_per_class=4, n_basic_per_class=3)
    return root, manifest


@pytest.fixture(scope="session")
def toy_data(small_fixture):
    root, manifest = small_fixture
    cfg = load_config(root / "train.cfg")
    records = load_manifest(manifest)
    encoders = pipeline.build_encoders(cfg.encoders)
    aug = pipeline.augmentation_for(encoders)
    return cfg, records, encoders, aug


_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, text = mark.args
    if rep.when == "call" or rep.failed:
        status = "PASS" if rep.passed else "FAIL"
        if _CRITERIA.get(number, ("PASS",))[0] == "PASS":
            _CRITERIA[number] = (status, text)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, text = _CRITERIA[number]
        terminalreporter.write_line(f"{status} criterion {number:2d}: {text}")
