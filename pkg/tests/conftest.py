import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from geodepth.geometry import CameraModel


def random_camera(rng: np.random.Generator, width: int = 16, height: int = 16, identity: bool = False) -> CameraModel:
    fx, fy = rng.uniform(10.0, 80.0, size=2)
    cx, cy = rng.uniform(0.0, width - 1), rng.uniform(0.0, height - 1)
    T = np.eye(4)
    if not identity:
        T[:3, :3] = Rotation.random(random_state=rng.integers(2**31)).as_matrix()
        T[:3, 3] = rng.uniform(-1.0, 1.0, size=3)
    return CameraModel.from_pinhole(fx, fy, cx, cy, width, height, T)


def random_depth(rng: np.random.Generator, width: int = 16, height: int = 16, hole_frac: float = 0.2) -> np.ndarray:
    d = rng.uniform(0.3, 3.0, size=(height, width))
    d[rng.random((height, width)) < hole_frac] = 0.0
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, ok, detail)``; printed again in the run summary."""
    def record(n: int, ok: bool, detail: str) -> bool:
        CRITERIA[n] = (bool(ok), detail)
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        capman = request.config.pluginmanager.getplugin("capturemanager")
        with capman.global_and_fixture_disabled():
            print("\n" + line, flush=True)
        return bool(ok)
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
