import numpy as np
import pytest
import torch
from hypothesis import settings

from ssiod.dataset import SceneConfig, build_phase_dataset, generate_synthetic_dataset, split_tasks
from ssiod.detector import DetectorConfig, build_detector

settings.register_profile("repo", deadline=None, print_blob=True)
settings.load_profile("repo")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def scenes():
    return generate_synthetic_dataset(SceneConfig(seed=21), 64)


@pytest.fixture(scope="session")
def spec():
    return split_tasks(list(range(8)), [4, 4])


@pytest.fixture
def model64():
    return build_detector(DetectorConfig(), seed=0, dtype=torch.float64)


@pytest.fixture(scope="session")
def tiny_phases(scenes, spec):
    """Two small phases with 16 labelled and 48 unlabelled images each."""
    return [build_phase_dataset(scenes, spec, t, 0.25, seed=t) for t in range(2)]


@pytest.fixture(scope="session")
def toy_teachers():
    """Two independently trained detectors: one on classes 0-3, one on classes 4-7."""
    from ssiod.semisup import SSLConfig, burn_in

    data = generate_synthetic_dataset(SceneConfig(seed=77), 160)
    spec = split_tasks(list(range(8)), [4, 4])
    cfg = SSLConfig(labelled_batch_size=8, burn_in_epochs=36, learning_rate=0.02)
    out = []
    for t in range(2):
        ph = build_phase_dataset(data, spec, t, 0.999, seed=t)
        model = build_detector(DetectorConfig(), seed=10 + t)
        burn_in(model, ph.labelled, cfg, np.random.default_rng(t))
        model.requires_grad_(False)
        out.append(model)
    return out
