import numpy as np
import pytest

from sharedfusion.data import SyntheticSpec, generate, split


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset():
    """Forty small paired samples, enough to drive a model end to end."""
    return generate(SyntheticSpec(n_samples=40, image_size=8, seed=3))


@pytest.fixture(scope="session")
def tiny_splits(tiny_dataset):
    return split(len(tiny_dataset), (0.5, 0.25, 0.25), seed=0)


def tiny_model_config(**fusion):
    from sharedfusion.encoder import EncoderConfig
    from sharedfusion.fusion import FusionConfig
    from sharedfusion.model import ModelConfig

    return ModelConfig(
        encoder=EncoderConfig(stage_channels=(4, 6), input_size=8),
        fusion=FusionConfig(**{"stages": (0, 1), **fusion}),
    )


@pytest.fixture
def tiny_config():
    return tiny_model_config()


_ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    _ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_ACCEPTANCE):
            terminalreporter.write_line(_ACCEPTANCE[number])
