import pytest

from unirank.trainer import TrainingConfig
from unirank.world import generate_world

TINY_DIMS = dict(d_tok=4, hidden=6, d=4, d_r=2, d_model=8, n_heads=2, n_layers=2, d_ff=8)


def tiny_config(**overrides) -> TrainingConfig:
    base = dict(steps=20, batch_size=4, negatives=4, positives_per_query=2, k=10, lr=1e-2,
                refresh_every=10, pool_size=5, n_train_queries=16, **TINY_DIMS)
    base.update(overrides)
    return TrainingConfig(**base)


@pytest.fixture(scope="session")
def micro_world():
    return generate_world(21, 120, 24, vocab_size=32)


# one verdict line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
