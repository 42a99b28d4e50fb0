import numpy as np
import pytest
import torch

from musasplat.scene import SceneSpec, generate_scene


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def toy_scene():
    return generate_scene(SceneSpec())


@pytest.fixture(scope="session")
def small_scene():
    """32x32 variant for tests that only need plumbing to work."""
    return generate_scene(SceneSpec(image_size=(32, 32), focal=29.0, supersample=1, held_out_azimuths_deg=[15.0]))


# acceptance criteria record one line each here; printed at the end of the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
