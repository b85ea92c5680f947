import numpy as np
import pytest

from seqft import nn
from seqft.data import TaskSpec
from seqft.pipeline import PipelineConfig

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    status = "PASS" if passed else "FAIL"
    ACCEPTANCE_LINES.append(f"[{status}] criterion {number:>2}: {title}" + (f" ({detail})" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


TINY_ARCH = nn.ArchMeta(image_size=16, patch_size=4, width=8, depth=2, channel_hidden=12, token_hidden=6, decoder_widths=(8, 4))
# smallest model that runs on the 32x32 synthetic tasks
SMALL_ARCH = nn.ArchMeta(image_size=32, patch_size=4, width=8, depth=1, channel_hidden=8, token_hidden=8, decoder_widths=(4, 4))


@pytest.fixture
def tiny_arch():
    return TINY_ARCH


def tiny_config(**overrides) -> PipelineConfig:
    """A configuration that runs a two-task sequence in seconds."""
    tasks = [
        TaskSpec("a_disk", 2, "disk", 0.0, n_train=10, n_test=4),
        TaskSpec("b_bar", 3, "bar", 0.1, n_train=8, n_test=4),
    ]
    base = dict(
        tasks=tasks,
        arch=SMALL_ARCH,
        k=3,
        mds_runs=4,
        iters_pretrain=20,
        iters_fft=12,
        iters_lora_kd=10,
        batch=4,
        kd_batch=4,
        pretrain_corpus=16,
    )
    base.update(overrides)
    return PipelineConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def as_float64(model: nn.ModelState) -> nn.ModelState:
    return nn.ModelState(
        model.meta, {k: nn.Tensor(v.data.astype(np.float64), name=k) for k, v in model.params.items()}
    )

