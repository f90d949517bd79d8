import numpy as np
import pytest

from flamecam.model import build_unet
from flamecam.synth import FlameSceneSpec, generate_scene

# one line per acceptance criterion, echoed after the run (see test_acceptance)
acceptance_lines: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_unet():
    return build_unet(2, 8, (32, 32, 3), num_classes=4, seed=7)


@pytest.fixture(scope="session")
def small_bn_unet():
    return build_unet(2, 8, (32, 32, 3), num_classes=4, with_batchnorm=True, seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def tiny_scene_spec(seed=0, **kw):
    defaults = dict(seed=seed, height=96, width=128, nozzle_px=(8, 48),
                    lift_off_px=10, length_px=80, max_width_px=40,
                    metres_per_pixel=0.01)
    defaults.update(kw)
    return FlameSceneSpec(**defaults)


@pytest.fixture(scope="session")
def tiny_scene():
    return generate_scene(tiny_scene_spec(seed=5))
