import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from clpose.simdata import Blob, GaussianBlobPhantom, default_phantom, make_phantom, project_stack, random_rotations

# wide asymmetric blobs that stay above 1.5 voxels on small grids
SMALL_PHANTOM = GaussianBlobPhantom((
    Blob((0.0, 0.0, 0.0), 0.09, 1.0),
    Blob((0.14, 0.05, -0.04), 0.06, 0.8),
    Blob((-0.07, 0.15, 0.08), 0.055, 0.6),
    Blob((0.04, -0.12, 0.12), 0.05, 0.9),
))

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def phantom64():
    return make_phantom(default_phantom(), 64)


@pytest.fixture(scope="session")
def rotations30():
    return random_rotations(30, 0)


@pytest.fixture(scope="session")
def clean30(phantom64, rotations30):
    """Noiseless, centred projections of the default phantom at 30 views."""
    return project_stack(phantom64, rotations30)


@pytest.fixture(scope="session")
def phantom32():
    return make_phantom(SMALL_PHANTOM, 32)


def rot_about(axis, angle):
    from scipy.spatial.transform import Rotation

    axis = np.asarray(axis, dtype=float)
    return Rotation.from_rotvec(axis / np.linalg.norm(axis) * angle).as_matrix()


# acceptance lines recorded by test_acceptance.py, printed after the run
ACCEPTANCE: dict = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
