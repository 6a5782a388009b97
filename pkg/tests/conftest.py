import dataclasses

import pytest
import torch

from framecast.model import BlockCausalTransformer, ModelConfig


def tiny_config(**overrides) -> ModelConfig:
    base = dict(hidden_dim=32, num_layers=2, num_heads=2, mlp_dim=64,
                rope_split=(8, 4, 4), tokens_per_frame=4, token_dim=6, num_actions=6)
    base.update(overrides)
    return ModelConfig(**base)


def randomized_model(cfg: ModelConfig, seed: int = 0, scale: float = 0.05,
                     dtype=torch.float32) -> BlockCausalTransformer:
    """A model with non-degenerate outputs (zero-init gates nudged off zero)."""
    torch.manual_seed(seed)
    model = BlockCausalTransformer(cfg)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn_like(p) * scale)
    return model.to(dtype)


@pytest.fixture
def tiny_model():
    return randomized_model(tiny_config(), seed=1)


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
    yield


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, passed in RESULTS:
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {name}")
