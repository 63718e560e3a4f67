import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from motlab.core import AttentionMode, DiffusionConfig, ModelConfig, ObjectiveMode, Sparsity, build_tower_map, make_modalities

settings.register_profile("motlab", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture])
settings.load_profile("motlab")

torch.set_default_dtype(torch.float64)


def small_config(
    names=("text", "image"),
    sparsity="dense",
    tower_mode=None,
    mode="chameleon",
    D=8,
    layers=1,
    heads=2,
    H=None,
    seq_len=16,
    vocab=12,
    **kw,
) -> ModelConfig:
    """A tiny valid config for unit tests."""
    mode = ObjectiveMode(mode)
    sparsity = Sparsity(sparsity)
    cont = ("image",) if mode is ObjectiveMode.TRANSFUSION else ()
    mods = make_modalities(names, cont)
    if tower_mode is None:
        tower_mode = "dense" if sparsity in (Sparsity.DENSE, Sparsity.MOE) else "full_mot"
    return ModelConfig(
        d_model=D, n_layers=layers, n_heads=heads, ffn_hidden=H,
        modalities=mods,
        vocab_sizes={m.id: vocab for m in mods if m.discrete},
        tower_map=build_tower_map(tower_mode, mods),
        seq_len=seq_len, sparsity=sparsity,
        objective_mode=mode,
        attention_mode=AttentionMode.HYBRID if mode is ObjectiveMode.TRANSFUSION else AttentionMode.CAUSAL,
        diffusion=DiffusionConfig(T=50, inference_steps=10) if mode is ObjectiveMode.TRANSFUSION else None,
        **kw,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
