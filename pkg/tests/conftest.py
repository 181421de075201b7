import time

import numpy as np
import pytest

from erasure_lab.data import SyntheticSpec, gen_planted_dims, split
from erasure_lab.embeddings import EmbeddingTable
from erasure_lab.models import ModelConfig, train

PLANTED_SEEDS = range(10)


def planted_config(seed: int, dropout: float = 0.0) -> ModelConfig:
    return ModelConfig(
        "window_mlp",
        50,
        window=1,
        seed=seed,
        dropout_prob=dropout,
        learning_rate=0.005,
        patience=10,
        max_epochs=150,
    )


def planted_run(seed: int, dropout: float = 0.0):
    table, ds = gen_planted_dims(SyntheticSpec("planted_dims", vocab_size=2000, seed=seed))
    tr, dv, te = split(ds, (0.8, 0.1, 0.1), seed)
    return train(planted_config(seed, dropout), table, tr, dv), te


class Timed(dict):
    elapsed: float = 0.0


def _timed_runs(dropout: float) -> Timed:
    start = time.perf_counter()
    out = Timed({s: planted_run(s, dropout) for s in PLANTED_SEEDS})
    out.elapsed = time.perf_counter() - start
    return out


@pytest.fixture(scope="session")
def planted_models() -> Timed:
    """seed -> (model, test set) for the undropped planted-dimension runs."""
    return _timed_runs(0.0)


@pytest.fixture(scope="session")
def planted_dropout_models() -> Timed:
    return _timed_runs(0.2)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_table(tokens, dim: int = 4, seed: int = 0) -> EmbeddingTable:
    rng = np.random.default_rng(seed)
    return EmbeddingTable.from_vectors(list(tokens), rng.normal(size=(len(tokens), dim)))
