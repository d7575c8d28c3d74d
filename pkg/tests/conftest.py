"""Shared fixtures: small cameras and seeded synthetic scenes."""

import numpy as np
import pytest

from mpsfusion.core import CameraIntrinsics
from mpsfusion.synth import (
    LightRig,
    SceneSpec,
    generate_trajectory,
    make_keyframes,
    render_multispectral,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_intr():
    return CameraIntrinsics.from_fov(64, 48, 50.0)


@pytest.fixture(scope="session")
def rig():
    return LightRig.default()


@pytest.fixture(scope="session")
def sphere_scene():
    return SceneSpec(
        "sphere", radius=1.0, albedo=((0.8, 0.7, 0.6),), texture=0.3, texture_frequency=12
    )


@pytest.fixture(scope="session")
def front_pose():
    # camera at z=3 looking down -z at the origin
    return generate_trajectory(1, 3.0)[0]


@pytest.fixture(scope="session")
def small_sphere_render(sphere_scene, rig, small_intr, front_pose):
    return render_multispectral(sphere_scene, rig, small_intr, front_pose)


@pytest.fixture(scope="session")
def intr_512():
    return CameraIntrinsics.from_fov(512, 512, 40.0)


@pytest.fixture(scope="session")
def sphere_render_512(rig, intr_512, front_pose):
    scene = SceneSpec("sphere", radius=1.0, albedo=((0.8, 0.7, 0.6),))
    return render_multispectral(scene, rig, intr_512, front_pose)


@pytest.fixture(scope="session")
def textured_keyframe_512(sphere_scene, rig, intr_512, front_pose):
    return make_keyframes(sphere_scene, rig, intr_512, [front_pose], noise=0.01, seed=0)[0]


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance_log(request):
    """Record ``(criterion, passed, detail)``; summarized at the end of the run."""
    lines = request.config.stash[ACCEPTANCE_KEY]

    def log(criterion, passed, detail):
        lines.append((criterion, passed, detail))
        return passed

    return log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(lines, key=lambda x: x[0]):
        terminalreporter.write_line(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")
