import numpy as np
import pytest

from placebocil.config import ExperimentConfig
from placebocil.data import Dataset, SyntheticSpec
from placebocil.nn import Layer, Model, init_model


def identity_extractor(head: np.ndarray) -> Model:
    """Model whose extracted features equal its input."""
    head = np.asarray(head, dtype=np.float64)
    dim = head.shape[1]
    return Model([Layer(np.eye(dim), np.zeros(dim), "identity"), Layer(head, np.zeros(head.shape[0]), "identity")])


def small_model(seed=0, input_dim=4, hidden=(6, 5), classes=3) -> Model:
    return init_model(input_dim, list(hidden), classes, np.random.default_rng(seed))


def labeled(x, y, start=0) -> Dataset:
    x = np.asarray(x, dtype=np.float64)
    return Dataset(np.arange(start, start + len(x)), x, np.asarray(y, dtype=np.int64))


def tiny_config(**overrides) -> ExperimentConfig:
    """Two phases on four classes; runs in well under a second."""
    base = dict(
        class_counts=[2, 4],
        task=SyntheticSpec(num_classes=4, feature_dim=8, train_per_class=200, test_per_class=50,
                           stream_clusters=12, stream_pool_size=2000),
        hidden=[16, 8],
        epochs=3,
        policy_epochs=1,
        policy_iters=2,
        u_cap=100,
        p_cap=20,
        batch_new=32,
        batch_exemplar=16,
        batch_placebo=16,
    )
    base.update(overrides)
    return ExperimentConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
