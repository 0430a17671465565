import dataclasses

import numpy as np
import pytest
import torch

from xprotonet.config import ModelConfig
from xprotonet.model import build_model

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(**overrides) -> ModelConfig:
    """Grid 4x4 from 16x16 input, D=8, C=2, K=2."""
    base = ModelConfig(num_classes=2, prototypes_per_class=2, feature_dim=8, input_size=(16, 16),
                       backbone_id="tiny_cnn", backbone_channels=(4, 6), module_hidden=6, seed=3)
    return dataclasses.replace(base, **overrides)


def batch_norm_model(**overrides):
    """Tiny model whose backbone carries batch norm, with the tiny backbone's strides and widths."""
    model = build_model(tiny_config(**overrides))
    c_in, (c1, c2) = model.config.in_channels, model.config.backbone_channels
    model.backbone = torch.nn.Sequential(
        torch.nn.Conv2d(c_in, c1, 3, stride=2, padding=1, bias=False), torch.nn.BatchNorm2d(c1), torch.nn.ReLU(),
        torch.nn.Conv2d(c1, c2, 3, stride=2, padding=1, bias=False), torch.nn.BatchNorm2d(c2), torch.nn.ReLU(),
    )
    return model


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return build_model(tiny_config())


@pytest.fixture
def tiny_model64():
    return build_model(tiny_config()).double()


# -- acceptance reporting

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line():
    """Record one PASS/FAIL line per acceptance criterion; printed again in the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"acceptance criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
