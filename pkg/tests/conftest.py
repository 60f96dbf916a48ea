from __future__ import annotations

import numpy as np
import pytest
import torch

from elinspect.anomaly_engine import ReconstructionModel
from elinspect.dataset_core import split_dataset
from elinspect.gan_training import Phase1Config, Phase2Config, train_phase1, train_phase2
from elinspect.synthcell import BenchmarkConfig, build_benchmark

torch.set_num_threads(1)


class IdentityModel(ReconstructionModel):
    """Reconstruction equals the input; residuals are exactly zero."""

    def __init__(self, size: int = 64, k: float = 1.0):
        super().__init__()
        self.size = size
        self.k = k
        self.name = "identity"

    def _run(self, x):
        zero = torch.zeros(x.shape[0])
        return x.clone(), zero, zero


class ConstantModel(ReconstructionModel):
    """Reconstruction is a constant image; scores are plain residual means."""

    def __init__(self, value: float = 0.0, size: int = 64, feature_scale: float = 0.5, k: float = 1.0):
        super().__init__()
        self.value = value
        self.size = size
        self.k = k
        self.feature_scale = feature_scale
        self.name = "constant"

    def _run(self, x):
        recon = torch.full_like(x, self.value)
        image = ((x - recon) ** 2).flatten(1).mean(1)
        return recon, image, self.feature_scale * (x - recon).abs().flatten(1).mean(1)


@pytest.fixture(scope="session")
def small_benchmark():
    return build_benchmark(BenchmarkConfig(total_defect_free=40, total_defective=12, master_seed=3))


@pytest.fixture(scope="session")
def small_split(small_benchmark):
    return split_dataset(small_benchmark, "unsupervised", 0)


@pytest.fixture(scope="session")
def defect_free(small_benchmark):
    return [s for s in small_benchmark.samples if not s.is_defective]


@pytest.fixture(scope="session")
def defective(small_benchmark):
    return [s for s in small_benchmark.samples if s.is_defective]


@pytest.fixture(scope="session")
def tiny_phase1(defect_free):
    return train_phase1(defect_free[:16], Phase1Config(width=4, batch_size=4, iterations=3, seed=1))


@pytest.fixture(scope="session")
def tiny_phase2(defect_free, tiny_phase1):
    return train_phase2(defect_free[:16], tiny_phase1, Phase2Config(iterations=6, batch_size=4, seed=1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# One line per acceptance criterion, printed after the run.
ACCEPTANCE: dict[str, str] = {}


def record(criterion: str, ok: bool, detail: str) -> bool:
    ACCEPTANCE[criterion] = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
