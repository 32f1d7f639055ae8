import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from blankskip.encoder import ModelConfig, build_model  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(input_dim=4, subsample_stride=2, model_dim=8, num_layers=3, split_layer=2,
                       num_heads=2, ffn_dim=16, vocab_size=3)


@pytest.fixture
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg, seed=3)


def pytest_terminal_summary(terminalreporter):
    reports = []
    for key in ("passed", "failed", "error"):
        reports += [(key, r) for r in terminalreporter.stats.get(key, []) if getattr(r, "when", "call") == "call"]
    rows = sorted((r.nodeid, key) for key, r in reports if "test_acceptance.py" in r.nodeid)
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, key in rows:
        terminalreporter.write_line(f"{'PASS' if key == 'passed' else 'FAIL'}  {nodeid.split('::', 1)[1]}")
