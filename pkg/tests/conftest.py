import numpy as np
import pytest
import torch

from axialinterp.flownet import SliceGenerator
from axialinterp.volio import VolumeStack

# narrow widths keep unit tests fast; architecture and wiring are unchanged
TINY = dict(widths=(16, 12, 8), teacher_width=8)


def tiny_generator(mode: str = "fixed", seed: int = 0) -> SliceGenerator:
    torch.manual_seed(seed)
    return SliceGenerator(mode, **TINY)


def random_stack(depth: int, size: int = 64, seed: int = 0, bit_depth: int = 8) -> VolumeStack:
    rng = np.random.default_rng(seed)
    dtype = np.uint8 if bit_depth == 8 else np.uint16
    vox = rng.integers(0, 2**bit_depth, size=(depth, size, size)).astype(dtype)
    return VolumeStack(vox, bit_depth, (1.0, 1.0, 2.0))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# acceptance verdicts, echoed in the terminal summary
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
