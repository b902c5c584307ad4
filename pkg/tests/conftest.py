import pytest

from prefix_dpo.data import synthetic_dataset
from prefix_dpo.layout import PreferenceSample
from prefix_dpo.model import ModelConfig, init


@pytest.fixture
def sample():
    # prompt 0..2, chosen 3..4, rejected 5..7 in the shared row
    return PreferenceSample([11, 12, 13], [21, 22], [31, 32, 33])


@pytest.fixture
def small_config():
    return ModelConfig(vocab_size=40, d_model=16, n_layers=2, n_heads=2, d_ff=24, init_std=0.3, seed=3)


@pytest.fixture
def small_params(small_config):
    return init(small_config)


@pytest.fixture
def ragged_samples():
    return synthetic_dataset(6, prompt_len=(1, 9), chosen_len=(1, 5), rejected_len=(1, 6),
                             vocab_size=40, seed=7)



def pytest_terminal_summary(terminalreporter):
    from oracles import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE:
        terminalreporter.write_line(line)
