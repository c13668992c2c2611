import numpy as np
import pytest

from prompt_transfer.model import ModelHandle, ModelSpec
from prompt_transfer.tasks import build_suite, default_vocab

SMALL_SPLITS = (64, 48, 48)


@pytest.fixture(scope="session")
def vocab():
    return tuple(default_vocab())


@pytest.fixture(scope="session")
def small_suite(vocab):
    return build_suite(0, vocab, splits=SMALL_SPLITS)


def tiny_spec(vocab, family="masked_lm", seed=0, d=16, layers=2, ffn=32, heads=2):
    return ModelSpec(family, vocab, num_layers=layers, hidden_dim=d, ffn_dim=ffn, num_heads=heads, max_seq_len=32, seed=seed)


@pytest.fixture
def tiny_model(vocab):
    return ModelHandle(tiny_spec(vocab)).freeze()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import verdicts

    if verdicts.LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(verdicts.LINES):
            terminalreporter.write_line(verdicts.LINES[n])
