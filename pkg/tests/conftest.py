import numpy as np
import pytest

from hybrid_vio.geometry import CameraModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def davis_camera():
    return CameraModel(
        width=240, height=180, fx=199.0, fy=198.5, cx=121.3, cy=89.7,
        k1=-0.08, k2=0.02, p1=0.001, p2=-0.0005, k3=0.0,
    )


@pytest.fixture
def pinhole_camera():
    return CameraModel(width=240, height=180, fx=100.0, fy=100.0, cx=120.0, cy=90.0)


@pytest.fixture(scope="session")
def short_circle(tmp_path_factory):
    """A 2.5 s circle sequence on disk: 1.5 s static, then 1 s of motion."""
    from hybrid_vio.dataset_io import save_dataset
    from hybrid_vio.simulator import scenario, simulate

    sc = scenario("circle", seed=3)
    sc.trajectory.duration = 2.5
    directory = tmp_path_factory.mktemp("short_circle")
    save_dataset(directory, simulate(sc))
    return directory


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_RESULTS

    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(line)
