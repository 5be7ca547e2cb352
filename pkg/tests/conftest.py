import numpy as np
import pytest

from edgevlm import vision
from edgevlm.config import CompressionStrategy, LMConfig, ModelConfig, VisionConfig
from edgevlm.model import init_weights


def tiny_config(kind="reshape", ratio=3, vision_layers=1, lm_layers=1) -> ModelConfig:
    """24px images, 4px patches -> 36 vision tokens; small enough for finite differences."""
    return ModelConfig(
        VisionConfig(image_size=24, patch_size=4, d_vision=4, n_layers=vision_layers, n_heads=1, mlp_ratio=2),
        LMConfig(d_lm=4, n_layers=lm_layers, n_heads=1, d_ff=8, max_seq=96),
        CompressionStrategy(kind, ratio), d_proj=4).validate()


def small_config(kind="reshape", ratio=9) -> ModelConfig:
    """The default 27x27 grid with narrow layers, for fast end-to-end checks."""
    return ModelConfig(
        VisionConfig(d_vision=16, n_layers=1, n_heads=2, mlp_ratio=2),
        LMConfig(d_lm=32, n_layers=2, n_heads=2, d_ff=64),
        CompressionStrategy(kind, ratio), d_proj=32).validate()


def random_image(size: int, seed: int = 0) -> vision.Image:
    rng = np.random.default_rng(seed)
    return vision.Image(rng.integers(0, 256, (size, size, 3), dtype=np.uint8))


@pytest.fixture
def tiny():
    cfg = tiny_config()
    return cfg, init_weights(cfg, 0)


@pytest.fixture
def small():
    cfg = small_config()
    return cfg, init_weights(cfg, 0)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
