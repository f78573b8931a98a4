import pytest

from phsfl import nn
from phsfl.data import dirichlet_partition, generate_synthetic

ACCEPTANCE_LINES: list[str] = []


def tiny_setup(num_clients=4, num_edges=2, alpha=1.0, seed=0, samples=160):
    ds = generate_synthetic(4, samples, (3, 8, 8), seed=seed)
    shards = dirichlet_partition(ds, num_clients, alpha, seed, num_edges=num_edges, min_size=6)
    model = nn.init_model(nn.standard_cnn(3, 4, 8, (4, 6), 8, 5, 2), seed)
    return ds, shards, model


@pytest.fixture
def tiny():
    return tiny_setup()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
