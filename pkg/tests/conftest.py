import warnings

import numpy as np
import pytest

from transocc.classifier import ClassifierConfig, TrainConfig, train
from transocc.dataio import SyntheticConfig, synthetic_splits
from transocc.transforms import apply, preset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class OracleStub:
    """Recognises transforms of known reference images perfectly (one-hot at the nearest match)."""

    model_id = "oracle"

    def __init__(self, transform_set, references):
        self.transform_set = transform_set
        self.n_classes = transform_set.n
        self.input_dims = references.shape[1:]
        # (n_refs * n, H, W, C) templates with their labels
        self.templates = np.concatenate([apply(references, s) for s in transform_set.specs])
        self.labels = np.repeat(np.arange(transform_set.n), len(references))

    def predict_proba(self, images):
        images = np.asarray(images, dtype=np.float32)
        d = ((images[:, None] - self.templates[None]) ** 2).reshape(len(images), len(self.templates), -1).sum(-1)
        out = np.zeros((len(images), self.n_classes))
        out[np.arange(len(images)), self.labels[d.argmin(1)]] = 1.0
        return out


class UniformStub:
    model_id = "uniform"

    def __init__(self, transform_set, dims):
        self.transform_set = transform_set
        self.n_classes = transform_set.n
        self.input_dims = tuple(dims)

    def predict_proba(self, images):
        return np.full((len(images), self.n_classes), 1.0 / self.n_classes)


@pytest.fixture
def oracle_stub():
    return OracleStub


@pytest.fixture
def uniform_stub():
    return UniformStub


SMALL_SYNTH = SyntheticConfig(n_majority=400, n_minority=100, n_train=300, dims=(16, 16, 1), texture_seed=5)


@pytest.fixture(scope="session")
def small_splits():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return synthetic_splits(SMALL_SYNTH)


@pytest.fixture(scope="session")
def small_model(small_splits):
    """LM(5,2) small_conv trained for 25 epochs on 300 16x16 synthetic majority images."""
    train_batch, _ = small_splits
    ts = preset("LM(5,2)")
    cc = ClassifierConfig(n_classes=ts.n, input_dims=SMALL_SYNTH.dims, seed=0)
    return train(train_batch, ts, cc, TrainConfig(epochs=25))


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        number, title = marker.args
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        item.config._criteria = getattr(item.config, "_criteria", [])
        item.config._criteria.append((number, title, status, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = getattr(config, "_criteria", [])
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status, detail in sorted(rows, key=lambda r: r[0]):
        line = f"criterion {number} [{status}] {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
