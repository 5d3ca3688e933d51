import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from elo_forge.model import ModelConfig, build_model

settings.register_profile(
    "default", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

REFERENCE = ModelConfig(n_layers=16, d_model=128, n_heads=4, d_ff=512, vocab_size=64, max_seq_len=128)


def tiny_config(n_layers: int = 2, seed: int = 0, **kw) -> ModelConfig:
    base = dict(n_layers=n_layers, d_model=16, n_heads=2, d_ff=32, vocab_size=64, max_seq_len=32, seed=seed)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny():
    return build_model(tiny_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
