import os
import sys

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def photometric_fit():
    """Photometric-only fit of a static textured scene (sphere at rest), 64x64."""
    from splat4d.fit import FitConfig, SyntheticSpec, init_scene, make_synthetic_scene, optimize
    from splat4d.losses import Supervision

    syn = make_synthetic_scene(SyntheticSpec(sphere_velocity=(0.0, 0.0, 0.0)), seed=0)
    scene = init_scene(*syn.images, syn.intrinsics)
    fitted, report = optimize(scene, *syn.images, Supervision.empty(), FitConfig(iterations=2000))
    return syn, fitted, report


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
