from pathlib import Path

import numpy as np
import pytest

from tokenseek.model import ModelConfig, init_params, next_token_targets

FIXTURES = Path(__file__).parent / "fixtures"

# criterion number -> (passed, detail); filled by test_acceptance, printed at the end
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def tiny_config():
    return ModelConfig(n_layers=2, hidden=8, n_heads=2, ff_dim=16, vocab=32, max_seq=12, seed=0)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, init_scale=0.3)


@pytest.fixture
def tiny_batch(tiny_config):
    rng = np.random.default_rng(5)
    tokens = rng.integers(0, tiny_config.vocab, size=9)
    return tokens, next_token_targets(tokens)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
