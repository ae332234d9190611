import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fedseit.client import TrainConfig  # noqa: E402
from fedseit.data import corpus_vocab, non_iid_split, synth_embeddings  # noqa: E402
from fedseit.model import ModelConfig  # noqa: E402
from fedseit.synthetic import SyntheticSpec, make_corpus  # noqa: E402


def tiny_model(dim=8, sizes=(2, 3), n=4):
    return ModelConfig(embedding_dim=dim, filter_sizes=sizes, filters_per_size=n)


def fast_train(**kw):
    base = dict(learning_rate=0.5, batch_size=16, epochs_per_round=2, early_stop_patience=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def small_world():
    """A 12-label synthetic corpus, 8-d embeddings and a 3x3 grid."""
    train, test = make_corpus(SyntheticSpec(labels=12, train_per_label=30, test_per_label=8, seed=3))
    table = synth_embeddings(corpus_vocab(train, test), 8, 42)
    grid = non_iid_split(train, test, 3, 3, 4, 42)
    return train, test, table, grid


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_configure(config):
    config._criteria = []


@pytest.fixture
def criterion(request, capsys):
    """``criterion(n, ok, detail)`` prints and records one pass/fail line."""
    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} ({detail})"
        request.config._criteria.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_criteria", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
