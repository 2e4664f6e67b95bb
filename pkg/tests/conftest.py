import numpy as np
import pytest

from vitdistill.data import SyntheticDatasetSpec, generate
from vitdistill.vit import ViTConfig, ViTModel

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_config(**kw) -> ViTConfig:
    base = dict(depth=2, hidden_dim=16, heads=2, patch_size=4, image_size=8, num_classes=4)
    base.update(kw)
    return ViTConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_data():
    ds, _ = generate(SyntheticDatasetSpec(num_samples=48, image_size=8, num_classes=4, seed=0))
    return ds


@pytest.fixture(scope="session")
def tiny_teacher_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("teacher") / "ckpt"
    ViTModel(tiny_config(depth=4), seed=11).save(d)
    return d
