import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from elf_fusion.config import FusionConfig, SynthSpec, TrainConfig  # noqa: E402
from elf_fusion.data import synth_dataset  # noqa: E402
from elf_fusion.fusion import init_params  # noqa: E402

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


@pytest.fixture
def cfg():
    return FusionConfig()


@pytest.fixture
def params(cfg):
    return init_params(cfg, 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_set(cfg):
    return synth_dataset(SynthSpec(samples_per_class=2, sigma=0.5, synth_seed=3), cfg)


@pytest.fixture
def quick_train():
    return TrainConfig(epochs=2, batch_size=4)


ACCEPTANCE: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
