import time

import pytest

from segtrus.data import Dataset, Rng, generate_samples, split_dataset
from segtrus.model import NetworkConfig
from segtrus.train import TrainConfig, run_training

ACCEPTANCE_LINES = []

# desk-scale fixture shared by the training and acceptance tests
DESK_NETWORK = NetworkConfig(input_size=(32, 32), widths=(8, 16), conv_counts=(2, 2))
DESK_TRAIN = TrainConfig(learning_rate=50.0, momentum=0.9, batch_size=4, epochs=30, seed=0,
                         network=DESK_NETWORK)


def desk_dataset():
    ds = Dataset(generate_samples(64, 32, seed=0))
    return ds.with_split(split_dataset(ds, Rng(0)))


@pytest.fixture(scope="session")
def desk_run():
    ds = desk_dataset()
    start = time.perf_counter()
    ckpt, log = run_training(ds, DESK_TRAIN)
    return {"dataset": ds, "checkpoint": ckpt, "log": log, "seconds": time.perf_counter() - start}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
